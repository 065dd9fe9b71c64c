"""CIDEr-D against a single reference per case.

Document frequencies come from the reference side of the corpus being
scored, so scores depend on the whole corpus, not just each pair.
"""

from __future__ import annotations

import math
from collections import Counter

from ._common import check_aligned, ngrams

SIGMA = 6.0
MAX_ORDER = 4
SCALE = 10.0


def document_frequency(references, max_order: int = MAX_ORDER) -> list[Counter]:
    df = [Counter() for _ in range(max_order)]
    for ref in references:
        for n in range(1, max_order + 1):
            df[n - 1].update(ngrams(ref, n).keys())
    return df


def _tfidf(counts: Counter, df: Counter, log_n: float) -> dict:
    return {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}


def _norm_sq(vec: dict) -> float:
    return math.fsum(v * v for v in vec.values())


def cider_single(cand, ref, df, n_cases: int, sigma: float = SIGMA, max_order: int = MAX_ORDER) -> float:
    log_n = math.log(float(n_cases))
    sims = []
    for n in range(1, max_order + 1):
        vc = _tfidf(ngrams(cand, n), df[n - 1], log_n)
        vr = _tfidf(ngrams(ref, n), df[n - 1], log_n)
        nc, nr = _norm_sq(vc), _norm_sq(vr)
        if nc == 0.0 or nr == 0.0:
            sims.append(0.0)
            continue
        dot = math.fsum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
        sims.append(dot / math.sqrt(nc * nr))
    delta = len(cand) - len(ref)
    penalty = math.exp(-(delta**2) / (2 * sigma**2))
    return SCALE * penalty * math.fsum(sims) / max_order


def cider_scores(candidates, references, sigma: float = SIGMA) -> list[float]:
    check_aligned(candidates, references)
    df = document_frequency(references)
    n = len(references)
    return [cider_single(c, r, df, n, sigma) for c, r in zip(candidates, references)]


def cider(candidates, references, sigma: float = SIGMA) -> float:
    scores = cider_scores(candidates, references, sigma)
    return math.fsum(scores) / len(scores)
