from __future__ import annotations

from collections import Counter
from typing import Sequence

Tokens = Sequence[str]


def check_aligned(candidates, references, min_cases: int = 1) -> None:
    if len(candidates) != len(references):
        raise ValueError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    if len(candidates) < min_cases:
        raise ValueError("empty candidate list")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
