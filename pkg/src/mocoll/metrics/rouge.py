"""ROUGE-L: LCS-based F-measure averaged over cases."""

from __future__ import annotations

import math

from ._common import check_aligned

BETA = 1.2


def lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(cand, ref, beta: float = BETA) -> float:
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(candidates, references, beta: float = BETA) -> float:
    check_aligned(candidates, references)
    scores = [rouge_l_single(c, r, beta) for c, r in zip(candidates, references)]
    return math.fsum(scores) / len(scores)
