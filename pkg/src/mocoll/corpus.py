"""Image-caption corpora: loading, report composition, splitting, vocabulary cut-off."""

from __future__ import annotations

import csv
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Literal, Optional

from .text import tokenize

log = logging.getLogger(__name__)

Split = Literal["train", "test"]

MAX_IMAGES = 4

#: Word cut-off frequencies used for the two public chest X-ray corpora.
IU_XRAY_MIN_FREQUENCY = 3
MIMIC_CXR_MIN_FREQUENCY = 10


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionedCase:
    case_id: str
    image_refs: tuple[str, ...]
    report_text: str
    split: Optional[Split] = None

    def __post_init__(self):
        if not self.case_id:
            raise CorpusError("case_id must be non-empty")
        n = len(self.image_refs)
        if not 1 <= n <= MAX_IMAGES:
            raise CorpusError(
                f"case {self.case_id!r} has {n} images; expected 1..{MAX_IMAGES}"
            )
        if not self.report_text.strip():
            raise CorpusError(f"case {self.case_id!r} has an empty report")
        if self.split not in (None, "train", "test"):
            raise CorpusError(f"case {self.case_id!r} has unknown split {self.split!r}")


@dataclass(frozen=True)
class Corpus:
    cases: tuple[CaptionedCase, ...]
    name: str = "corpus"
    vocab_cutoff: int = 0
    drop_counts: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        seen = set()
        for case in self.cases:
            if case.case_id in seen:
                raise CorpusError(f"duplicate case_id {case.case_id!r}")
            seen.add(case.case_id)

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self) -> Iterator[CaptionedCase]:
        return iter(self.cases)

    def by_split(self, split: Split) -> list[CaptionedCase]:
        return [c for c in self.cases if c.split == split]

    @property
    def train(self) -> list[CaptionedCase]:
        return self.by_split("train")

    @property
    def test(self) -> list[CaptionedCase]:
        return self.by_split("test")

    def get(self, case_id: str) -> CaptionedCase:
        for case in self.cases:
            if case.case_id == case_id:
                return case
        raise KeyError(case_id)


@dataclass(frozen=True)
class VocabFilter:
    min_frequency: int = 0
    unknown_token: str = "<unk>"

    def __post_init__(self):
        if self.min_frequency < 0:
            raise ValueError("min_frequency must be >= 0")


def compose_report(finding: Optional[str], impression: Optional[str]) -> str:
    """Join findings and impression with a single space; either may be missing."""
    parts = [p.strip() for p in (finding or "", impression or "") if p and p.strip()]
    if not parts:
        raise CorpusError("both finding and impression are empty")
    return " ".join(parts)


def _parse_images(value, index: int) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        value = value.strip()
        if not value:
            return []
        if value.startswith("["):
            try:
                value = json.loads(value)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"record {index}: images is not a valid JSON list ({exc})")
        else:
            value = value.split(";")
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise CorpusError(f"record {index}: images must be a list of strings")
    return [v.strip() for v in value if v.strip()]


def _read_records(path: Path, fmt: str) -> Iterable[tuple[int, dict]]:
    try:
        fh = path.open(encoding="utf-8", newline="")
    except OSError as exc:
        raise CorpusError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        if fmt == "jsonl":
            for index, line in enumerate(fh):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"record {index}: invalid JSON ({exc.msg})") from exc
                if not isinstance(record, dict):
                    raise CorpusError(f"record {index}: expected a JSON object")
                yield index, record
        elif fmt == "csv":
            for index, row in enumerate(csv.DictReader(fh)):
                yield index, row
        else:
            raise CorpusError(f"unknown manifest format {fmt!r}")


def load_corpus(manifest_path, format: str = "jsonl", name: Optional[str] = None) -> Corpus:
    """Load a manifest, dropping (and counting) cases without images or report text.

    Records are ``{"case_id", "images", "finding", "impression", "split"?}``;
    CSV manifests use the same column names with ``images`` holding a JSON
    list or a ``;``-separated string.
    """
    path = Path(manifest_path)
    drops: Counter = Counter()
    cases: list[CaptionedCase] = []
    seen: set[str] = set()
    for index, record in _read_records(path, format):
        case_id = record.get("case_id")
        if not isinstance(case_id, str) or not case_id.strip():
            raise CorpusError(f"record {index}: missing case_id")
        case_id = case_id.strip()
        if case_id in seen:
            raise CorpusError(f"record {index}: duplicate case_id {case_id!r}")
        seen.add(case_id)
        images = _parse_images(record.get("images"), index)
        if not images:
            drops["no_images"] += 1
            log.info("dropping %s: no images", case_id)
            continue
        if len(images) > MAX_IMAGES:
            raise CorpusError(
                f"record {index}: case {case_id!r} has {len(images)} images; at most {MAX_IMAGES} allowed"
            )
        finding, impression = record.get("finding"), record.get("impression")
        for key, val in (("finding", finding), ("impression", impression)):
            if val is not None and not isinstance(val, str):
                raise CorpusError(f"record {index}: {key} must be a string")
        try:
            report = compose_report(finding, impression)
        except CorpusError:
            drops["no_report"] += 1
            log.info("dropping %s: no report text", case_id)
            continue
        split = record.get("split") or None
        if split not in (None, "train", "test"):
            raise CorpusError(f"record {index}: unknown split {split!r}")
        cases.append(CaptionedCase(case_id, tuple(images), report, split))

    if not cases:
        raise CorpusError(f"zero surviving cases in {path}")
    if drops:
        log.warning("%s: kept %d cases, dropped %s", path.name, len(cases), dict(drops))
    return Corpus(tuple(cases), name=name or path.stem, drop_counts=dict(drops))


def split_corpus(corpus: Corpus, ratio: float = 0.8, seed: int = 0) -> Corpus:
    """Randomly assign train/test so that ``round(ratio * n)`` cases are train."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(corpus)
    if n < 2:
        raise CorpusError("cannot split a corpus with fewer than 2 cases")
    n_train = min(max(int(ratio * n + 0.5), 1), n - 1)
    ids = sorted(c.case_id for c in corpus)
    random.Random(seed).shuffle(ids)
    train_ids = set(ids[:n_train])
    cases = tuple(
        replace(c, split="train" if c.case_id in train_ids else "test") for c in corpus
    )
    return replace(corpus, cases=cases)


def token_frequencies(reports: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for text in reports:
        counts.update(tokenize(text))
    return counts


def apply_vocab_filter(corpus: Corpus, vfilter: VocabFilter) -> Corpus:
    """Replace rare tokens with ``vfilter.unknown_token``.

    Frequencies come from the train split (or every case when no split has
    been assigned). Filtered reports are emitted in normalised form; a
    cut-off of 0 leaves the corpus untouched.
    """
    if vfilter.min_frequency == 0:
        return corpus
    source = corpus.train or [c for c in corpus if c.split is None] or list(corpus)
    freq = token_frequencies(c.report_text for c in source)
    unk = vfilter.unknown_token

    def filt(text: str) -> str:
        return " ".join(t if freq[t] >= vfilter.min_frequency else unk for t in tokenize(text)) or unk

    cases = tuple(replace(c, report_text=filt(c.report_text)) for c in corpus)
    return replace(corpus, cases=cases, vocab_cutoff=vfilter.min_frequency)


def case_to_record(case: CaptionedCase) -> dict:
    rec = {"case_id": case.case_id, "images": list(case.image_refs), "report": case.report_text}
    if case.split:
        rec["split"] = case.split
    return rec


def write_corpus(corpus: Corpus, path) -> None:
    """Write the processed corpus as JSONL (report already composed)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for case in corpus:
            fh.write(json.dumps(case_to_record(case), ensure_ascii=False) + "\n")


def read_corpus(path, name: Optional[str] = None) -> Corpus:
    """Inverse of :func:`write_corpus`.

    Also accepts raw manifests, composing ``finding``/``impression`` when no
    ``report`` key is present.
    """
    path = Path(path)
    cases = []
    for index, rec in _read_records(path, "jsonl"):
        if "report" in rec:
            try:
                cases.append(
                    CaptionedCase(rec["case_id"], tuple(rec["images"]), rec["report"], rec.get("split"))
                )
            except (KeyError, TypeError) as exc:
                raise CorpusError(f"record {index}: malformed ({exc})") from exc
        else:
            return load_corpus(path, "jsonl", name=name)
    if not cases:
        raise CorpusError(f"zero surviving cases in {path}")
    return Corpus(tuple(cases), name=name or path.stem)
