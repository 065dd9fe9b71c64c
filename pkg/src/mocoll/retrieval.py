"""Few-shot caption examples for the agent: random choice or nearest images."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .backends import EmbeddingIndex, cosine_similarity
from .corpus import CaptionedCase

Strategy = Literal["random", "similarity"]

#: Number of caption examples injected into agent prompts by default.
DEFAULT_K = 5


class MissingEmbedding(KeyError):
    def __str__(self):
        return f"no embedding for case {self.args[0]!r}"


@dataclass(frozen=True)
class FewShotConfig:
    k: int = DEFAULT_K
    strategy: Strategy = "similarity"
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.strategy not in ("random", "similarity"):
            raise ValueError(f"unknown few-shot strategy {self.strategy!r}")


@dataclass(frozen=True)
class ExampleSet:
    examples: tuple[tuple[str, str], ...] = ()
    strategy_used: Optional[Strategy] = None

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def case_ids(self) -> list[str]:
        return [cid for cid, _ in self.examples]

    @property
    def captions(self) -> list[str]:
        return [cap for _, cap in self.examples]


EMPTY = ExampleSet()


def case_vector(case: CaptionedCase, index: EmbeddingIndex) -> np.ndarray:
    """Embedding of a case: its own entry, else the mean of its image vectors."""
    if case.case_id in index:
        return index[case.case_id]
    try:
        vecs = [index[ref] for ref in case.image_refs]
    except KeyError:
        raise MissingEmbedding(case.case_id) from None
    return np.mean(vecs, axis=0)


def rank_pool(query_vector, index: EmbeddingIndex, keys: Optional[Sequence[str]] = None) -> list[tuple[str, float]]:
    """All index entries (or ``keys``) by descending cosine similarity, ties by key."""
    query = np.asarray(query_vector, dtype=float)
    if query.shape != (index.dimension,):
        raise ValueError(f"query has shape {query.shape}, index dimension is {index.dimension}")
    keys = index.entries.keys() if keys is None else keys
    scored = [(k, cosine_similarity(query, index[k])) for k in keys]
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored


def select_examples(
    query: CaptionedCase,
    pool: Sequence[CaptionedCase],
    config: FewShotConfig,
    index: Optional[EmbeddingIndex] = None,
) -> ExampleSet:
    if config.k == 0:
        return ExampleSet((), config.strategy)
    candidates = sorted((c for c in pool if c.case_id != query.case_id), key=lambda c: c.case_id)
    if not candidates:
        raise ValueError("few-shot pool is empty")

    if config.strategy == "random":
        rng = random.Random(f"{config.seed}:{query.case_id}")
        chosen = rng.sample(candidates, min(config.k, len(candidates)))
    else:
        if index is None:
            raise ValueError("similarity strategy needs an embedding index")
        qvec = case_vector(query, index)
        by_id = {c.case_id: c for c in candidates}
        sims = [(cid, cosine_similarity(qvec, case_vector(c, index))) for cid, c in by_id.items()]
        sims.sort(key=lambda kv: (-kv[1], kv[0]))
        chosen = [by_id[cid] for cid, _ in sims[: config.k]]
    return ExampleSet(tuple((c.case_id, c.report_text) for c in chosen), config.strategy)
