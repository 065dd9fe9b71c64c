"""Corpus-level BLEU with clipped n-gram precision and a corpus brevity penalty."""

from __future__ import annotations

import math

from ._common import check_aligned, ngrams


def bleu(candidates, references, max_order: int = 4) -> float:
    """Corpus BLEU over orders ``1..max_order`` with uniform weights.

    Clipped match counts and candidate n-gram totals are pooled over the
    corpus before the precisions are formed. A zero precision at any order
    gives 0. The brevity penalty uses total reference and candidate lengths.
    """
    if not 1 <= max_order <= 4:
        raise ValueError("max_order must be in 1..4")
    check_aligned(candidates, references)
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            c_counts = ngrams(cand, n)
            r_counts = ngrams(ref, n)
            matches[n - 1] += sum(min(k, r_counts[g]) for g, k in c_counts.items())
            totals[n - 1] += sum(c_counts.values())

    if cand_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = math.fsum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)
