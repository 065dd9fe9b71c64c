"""METEOR with exact and Porter-stem matching stages (no synonym module).

Alignment search is a dynamic programme over candidate positions whose state
is (reference positions used, reference position of the previous match). It
maximises matches, then minimises chunks, then prefers exact over stem
matches. States are pruned to ``beam`` per step, which keeps long reports
tractable; below that width the search is exhaustive.
"""

from __future__ import annotations

import math
from functools import lru_cache

from nltk.stem.porter import PorterStemmer

from ._common import check_aligned

ALPHA = 0.9
BETA = 3.0
GAMMA = 0.5
BEAM = 256

_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=65536)
def stem(token: str) -> str:
    return _stemmer.stem(token)


def align(cand, ref, beam: int = BEAM) -> tuple[int, int, int]:
    """Return ``(matches, chunks, exact_matches)`` of the best alignment."""
    ref_stems = [stem(t) for t in ref]
    edges = []
    for tok in cand:
        s = stem(tok)
        edges.append(
            [(j, tok == r) for j, (r, rs) in enumerate(zip(ref, ref_stems)) if tok == r or s == rs]
        )

    # key -> (matches, chunks, exact)
    states: dict = {(frozenset(), -1): (0, 0, 0)}

    def better(a, b):
        return (a[0], -a[1], a[2]) > (b[0], -b[1], b[2])

    for options in edges:
        nxt: dict = {}

        def push(key, val):
            old = nxt.get(key)
            if old is None or better(val, old):
                nxt[key] = val

        for (used, prev), (m, ch, ex) in states.items():
            push((used, -1), (m, ch, ex))
            for j, exact in options:
                if j in used:
                    continue
                cont = prev >= 0 and j == prev + 1
                push((used | {j}, j), (m + 1, ch if cont else ch + 1, ex + exact))
        if len(nxt) > beam:
            ranked = sorted(
                nxt.items(), key=lambda kv: (-kv[1][0], kv[1][1], -kv[1][2], sorted(kv[0][0]), kv[0][1])
            )
            nxt = dict(ranked[:beam])
        states = nxt

    best = (0, 0, 0)
    for val in states.values():
        if better(val, best):
            best = val
    return best


def meteor_single(cand, ref, alpha=ALPHA, beta=BETA, gamma=GAMMA, beam: int = BEAM) -> float:
    if not cand or not ref:
        return 0.0
    matches, chunks, _ = align(cand, ref, beam)
    if matches == 0:
        return 0.0
    p = matches / len(cand)
    r = matches / len(ref)
    fmean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / matches) ** beta
    return fmean * (1 - penalty)


def meteor(candidates, references, **kw) -> float:
    check_aligned(candidates, references)
    scores = [meteor_single(c, r, **kw) for c, r in zip(candidates, references)]
    return math.fsum(scores) / len(scores)
