"""Caption metrics: BLEU-1..4, METEOR, ROUGE-L and CIDEr-D.

All functions take aligned lists of token sequences (one reference per
case) and return corpus-level scores. Use :func:`mocoll.text.tokenize` to
turn raw strings into token sequences.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

from ..text import tokenize
from ._common import check_aligned
from .bleu import bleu
from .cider import cider, cider_scores
from .meteor import meteor
from .rouge import lcs_length, rouge_l, rouge_l_single

__all__ = [
    "MetricsReport",
    "bleu",
    "cider",
    "cider_scores",
    "lcs_length",
    "meteor",
    "rouge_l",
    "rouge_l_single",
    "score_all",
    "score_texts",
]

COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider")
DISPLAY = ("BLEU1", "BLEU2", "BLEU3", "BLEU4", "Meteor", "ROUGE-L", "Cider")


@dataclass(frozen=True)
class MetricsReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    n_cases: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown metric keys: {sorted(unknown)}")
        return cls(**data)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=[*COLUMNS, "n_cases"], lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.to_dict())
        return buf.getvalue()

    def to_table(self) -> str:
        """Fixed-width table, 4 decimals, in the usual captioning column order."""
        header = " | ".join(f"{h:>7}" for h in DISPLAY)
        row = " | ".join(f"{getattr(self, c):7.4f}" for c in COLUMNS)
        rule = "-" * len(header)
        return f"{header}\n{rule}\n{row}\n(n_cases = {self.n_cases})\n"


def score_all(candidates, references) -> MetricsReport:
    check_aligned(candidates, references)
    return MetricsReport(
        bleu1=bleu(candidates, references, 1),
        bleu2=bleu(candidates, references, 2),
        bleu3=bleu(candidates, references, 3),
        bleu4=bleu(candidates, references, 4),
        meteor=meteor(candidates, references),
        rouge_l=rouge_l(candidates, references),
        cider=cider(candidates, references),
        n_cases=len(candidates),
    )


def score_texts(candidates: list[str], references: list[str]) -> MetricsReport:
    return score_all([tokenize(c) for c in candidates], [tokenize(r) for r in references])
