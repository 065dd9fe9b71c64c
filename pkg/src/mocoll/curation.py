"""Synthetic VQA data: generate question/answer memories, select, emit.

Memories come from running the questioning loop on training cases. Each
(question, answer) turn becomes one :class:`MemoryEntry` carrying the case's
ground-truth report. Selection is a pure filter over those entries, and the
survivors are written as a fine-tuning dataset plus a manifest for an
external trainer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

from .backends import CURATION_PARAMS, SELECT_PARAMS, BackendError, ChatBackend, ChatMessage, GenerationParams
from .corpus import CaptionedCase
from .metrics import rouge_l_single
from .orchestrator import (
    Backends,
    Conversation,
    ConversationLog,
    OrchestratorConfig,
    ask_with_reprompt,
    parse_json_object,
    run_batch,
)
from .prompts import SELECT_TRIGGER, PromptSet, render
from .retrieval import FewShotConfig
from .text import tokenize

log = logging.getLogger(__name__)

#: Top-r grid for conversation-level ROUGE-L selection ablations.
TOP_R_GRID = (0.5, 0.25, 0.125)

#: Advisory fine-tuning settings copied into every dataset manifest.
ADVISORY_HPARAMS = {
    "learning_rate": 3e-7,
    "lr_scheduler": "cosine",
    "warmup_ratio": 0.03,
    "epochs_within_dataset": 5,
    "epochs_cross_dataset": 1,
    "max_tokens": 4096,
    "per_device_batch_size": 4,
    "gradient_accumulation_steps": 2,
    "loss": "autoregressive, answer tokens only, weighted KL penalty",
    "frozen": ["vision_encoder"],
}


class CurationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    case_id: str
    image_refs: tuple[str, ...]
    question: str
    answer: str
    ground_truth: str

    def __post_init__(self):
        for name in ("case_id", "question", "answer", "ground_truth"):
            if not getattr(self, name):
                raise ValueError(f"MemoryEntry.{name} must be non-empty")
        if not 1 <= len(self.image_refs) <= 4:
            raise ValueError("MemoryEntry needs 1..4 images")

    def to_record(self) -> dict:
        return {
            "case_id": self.case_id,
            "images": list(self.image_refs),
            "q": self.question,
            "a": self.answer,
            "ground_truth": self.ground_truth,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MemoryEntry":
        return cls(rec["case_id"], tuple(rec["images"]), rec["q"], rec["a"], rec["ground_truth"])


@dataclass(frozen=True)
class VqaExample:
    case_id: str
    image_refs: tuple[str, ...]
    question: str
    answer: str

    @classmethod
    def from_memory(cls, m: MemoryEntry) -> "VqaExample":
        return cls(m.case_id, m.image_refs, m.question, m.answer)


@dataclass(frozen=True)
class SelectionStrategy:
    kind: Literal["none", "top_r_rouge", "agent_based"] = "agent_based"
    r: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "top_r_rouge", "agent_based"):
            raise ValueError(f"unknown selection strategy {self.kind!r}")
        if not 0 < self.r <= 1:
            raise ValueError("r must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "SelectionStrategy":
        """``none``, ``agent`` or ``top-r=<fraction>``."""
        text = text.strip().lower()
        if text in ("none", "no"):
            return cls("none")
        if text in ("agent", "agent_based", "agent-based"):
            return cls("agent_based")
        if text.startswith(("top-r=", "top_r=")):
            return cls("top_r_rouge", float(text.split("=", 1)[1]))
        raise ValueError(f"cannot parse selection strategy {text!r}")

    def __str__(self) -> str:
        if self.kind == "top_r_rouge":
            return f"top-r={self.r:g}"
        return "agent" if self.kind == "agent_based" else "none"


@dataclass
class CurationReport:
    """Outcome of one curation run.

    ``selection_ratio`` is ``n_selected / n_memories``. For orientation, the
    agent-based selector kept 14.1% of memories on real chest X-ray data,
    against 50/25/12.5% for the top-r ROUGE-L grid.
    """

    n_memories: int
    n_selected: int
    strategy: str
    per_case: dict = field(default_factory=dict)
    rejected: int = 0
    parse_drops: int = 0
    error_drops: int = 0
    failed_cases: list = field(default_factory=list)

    @property
    def selection_ratio(self) -> float:
        return self.n_selected / self.n_memories if self.n_memories else 0.0

    def to_dict(self) -> dict:
        return {
            "n_memories": self.n_memories,
            "n_selected": self.n_selected,
            "selection_ratio": self.selection_ratio,
            "strategy": self.strategy,
            "rejected": self.rejected,
            "parse_drops": self.parse_drops,
            "error_drops": self.error_drops,
            "failed_cases": list(self.failed_cases),
            "per_case": self.per_case,
        }


def curation_config(max_questions: int = 6, k: int = 5, seed: int = 0, prompts: PromptSet = PromptSet()) -> OrchestratorConfig:
    """Loop settings for memory generation: temperature 0.1, random few-shot captions."""
    return OrchestratorConfig(
        max_questions=max_questions,
        few_shot=FewShotConfig(k=k, strategy="random", seed=seed),
        agent_params=CURATION_PARAMS,
        vqa_params=CURATION_PARAMS,
        prompts=prompts,
    )


def memories_from(conversations: Sequence[Conversation], cases: Sequence[CaptionedCase]) -> list[MemoryEntry]:
    by_id = {c.case_id: c for c in cases}
    out = []
    for conv in conversations:
        case = by_id[conv.case_id]
        for t in conv.turns:
            out.append(MemoryEntry(case.case_id, case.image_refs, t.question, t.answer, case.report_text))
    return out


def generate_memories(
    train_cases: Sequence[CaptionedCase],
    config: OrchestratorConfig,
    backends: Backends,
    parallelism: int = 1,
    *,
    caption: bool = False,
    checkpoint: Optional[ConversationLog] = None,
) -> tuple[list[MemoryEntry], list[Conversation]]:
    """Run the question loop on each case; one memory per turn.

    Captioning is skipped unless ``caption`` is set (top-r ROUGE-L
    selection needs captions to rank conversations).
    """
    convs = run_batch(train_cases, config, backends, parallelism, caption=caption, checkpoint=checkpoint)
    return memories_from(convs, train_cases), convs


# -- selection ----------------------------------------------------------------


def select_messages(entry: MemoryEntry, prompts: PromptSet) -> list[ChatMessage]:
    system = render(
        prompts.select_system,
        question=entry.question,
        answer=entry.answer,
        ground_truth=entry.ground_truth,
        instruction=prompts.instruction,
    )
    return [ChatMessage.system(system), ChatMessage.user(SELECT_TRIGGER)]


def _keep_from(reply: str) -> Optional[bool]:
    obj = parse_json_object(reply)
    if obj is None or not isinstance(obj.get("keep"), bool):
        return None
    return obj["keep"]


def judge(agent: ChatBackend, entry: MemoryEntry, prompts: PromptSet = PromptSet(), params: GenerationParams = SELECT_PARAMS) -> str:
    """``"keep"``, ``"reject"`` or ``"parse_drop"``; backend errors propagate."""
    keep, _ = ask_with_reprompt(agent, select_messages(entry, prompts), params, _keep_from)
    if keep is None:
        return "parse_drop"
    return "keep" if keep else "reject"


def select_agent_based(agent: ChatBackend, entry: MemoryEntry, prompts: PromptSet = PromptSet(), params: GenerationParams = SELECT_PARAMS) -> bool:
    """True if the selection agent keeps ``entry``; unparseable verdicts drop it."""
    return judge(agent, entry, prompts, params) == "keep"


def rank_cases_by_rouge(case_ids: Sequence[str], captions: dict, ground_truths: dict) -> list[tuple[str, float]]:
    scored = []
    for cid in case_ids:
        if not captions.get(cid):
            raise CurationError(f"no generated caption for case {cid!r}")
        scored.append((cid, rouge_l_single(tokenize(captions[cid]), tokenize(ground_truths[cid]))))
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored


def select_top_r_rouge(
    memories: Sequence[MemoryEntry],
    captions: dict,
    ground_truths: Optional[dict] = None,
    r: float = 0.5,
) -> list[MemoryEntry]:
    """All memories of the ``ceil(r * n_cases)`` cases whose captions score best by ROUGE-L."""
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    case_ids = list(dict.fromkeys(m.case_id for m in memories))
    if ground_truths is None:
        ground_truths = {m.case_id: m.ground_truth for m in memories}
    ranked = rank_cases_by_rouge(case_ids, captions, ground_truths)
    n_keep = math.ceil(r * len(case_ids) - 1e-9)
    kept = {cid for cid, _ in ranked[:n_keep]}
    return [m for m in memories if m.case_id in kept]


def curate(
    train_cases: Sequence[CaptionedCase],
    config: OrchestratorConfig,
    strategy: SelectionStrategy,
    backends: Backends,
    parallelism: int = 1,
    *,
    checkpoint: Optional[ConversationLog] = None,
    conversations: Optional[Sequence[Conversation]] = None,
) -> tuple[list[VqaExample], CurationReport, list[MemoryEntry]]:
    """Generate memories, select, and return (dataset, report, all memories).

    Pass ``conversations`` to skip generation and select over an existing run.
    """
    need_caption = strategy.kind == "top_r_rouge"
    if conversations is None:
        memories, conversations = generate_memories(
            train_cases, config, backends, parallelism, caption=need_caption, checkpoint=checkpoint
        )
    else:
        memories = memories_from(conversations, train_cases)
    if not memories:
        raise CurationError("no memories were generated")

    failed = [c.case_id for c in conversations if not c.ok]
    per_case: dict = {
        c.case_id: {"memories": len(c.turns), "selected": 0, "stop_reason": c.stop_reason}
        for c in conversations
    }
    verdicts: Counter = Counter()

    if strategy.kind == "none":
        selected = list(memories)
    elif strategy.kind == "top_r_rouge":
        captions = {c.case_id: c.caption for c in conversations if c.caption}
        usable = [m for m in memories if m.case_id in captions]
        if len(usable) < len(memories):
            log.warning("top-r selection: %d memories from uncaptioned cases excluded", len(memories) - len(usable))
        for cid, score in rank_cases_by_rouge(list(dict.fromkeys(m.case_id for m in usable)), captions, {m.case_id: m.ground_truth for m in usable}):
            per_case[cid]["rouge_l"] = score
        selected = select_top_r_rouge(usable, captions, r=strategy.r)
    else:
        selector = backends.selector

        def one(entry):
            try:
                return judge(selector, entry, config.prompts, SELECT_PARAMS)
            except BackendError as exc:
                log.warning("selection failed for %s: %s", entry.case_id, exc)
                return "error_drop"

        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                outcome = list(pool.map(one, memories))
        else:
            outcome = [one(m) for m in memories]
        verdicts.update(outcome)
        selected = [m for m, v in zip(memories, outcome) if v == "keep"]

    for m in selected:
        per_case[m.case_id]["selected"] += 1
    report = CurationReport(
        n_memories=len(memories),
        n_selected=len(selected),
        strategy=str(strategy),
        per_case=per_case,
        rejected=verdicts["reject"],
        parse_drops=verdicts["parse_drop"],
        error_drops=verdicts["error_drop"],
        failed_cases=failed,
    )
    return [VqaExample.from_memory(m) for m in selected], report, memories


# -- files ---------------------------------------------------------------------


def write_memories(memories: Sequence[MemoryEntry], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for m in memories:
            fh.write(json.dumps(m.to_record(), ensure_ascii=False) + "\n")


def read_memories(path) -> list[MemoryEntry]:
    with Path(path).open(encoding="utf-8") as fh:
        return [MemoryEntry.from_record(json.loads(line)) for line in fh if line.strip()]


CHAT_SFT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["case_id", "images", "messages"],
    "additionalProperties": False,
    "properties": {
        "case_id": {"type": "string", "minLength": 1},
        "images": {"type": "array", "minItems": 1, "maxItems": 4, "items": {"type": "string"}},
        "messages": {
            "type": "array",
            "minItems": 3,
            "maxItems": 3,
            "prefixItems": [
                {
                    "type": "object",
                    "required": ["role", "content"],
                    "properties": {"role": {"const": "system"}, "content": {"type": "string"}},
                },
                {
                    "type": "object",
                    "required": ["role", "content"],
                    "properties": {
                        "role": {"const": "user"},
                        "content": {
                            "type": "array",
                            "minItems": 2,
                            "items": {
                                "oneOf": [
                                    {
                                        "type": "object",
                                        "required": ["type", "image"],
                                        "properties": {"type": {"const": "image"}, "image": {"type": "string"}},
                                        "additionalProperties": False,
                                    },
                                    {
                                        "type": "object",
                                        "required": ["type", "text"],
                                        "properties": {"type": {"const": "text"}, "text": {"type": "string", "minLength": 1}},
                                        "additionalProperties": False,
                                    },
                                ]
                            },
                        },
                    },
                },
                {
                    "type": "object",
                    "required": ["role", "content"],
                    "properties": {"role": {"const": "assistant"}, "content": {"type": "string", "minLength": 1}},
                },
            ],
        },
    },
}


def _vqa_record(ex: VqaExample) -> dict:
    return {"case_id": ex.case_id, "images": list(ex.image_refs), "question": ex.question, "answer": ex.answer}


def _chat_record(ex: VqaExample, instruction: str) -> dict:
    user = [{"type": "image", "image": ref} for ref in ex.image_refs]
    user.append({"type": "text", "text": ex.question})
    return {
        "case_id": ex.case_id,
        "images": list(ex.image_refs),
        "messages": [
            {"role": "system", "content": instruction},
            {"role": "user", "content": user},
            {"role": "assistant", "content": ex.answer},
        ],
    }


def manifest_path(out_path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.name + ".manifest.json")


def emit_dataset(
    examples: Sequence[VqaExample],
    out_path,
    format: str = "vqa_jsonl",
    *,
    strategy: str = "unknown",
    instruction: str = PromptSet().instruction,
) -> dict:
    """Write the dataset and ``<out_path>.manifest.json``; returns the manifest."""
    if not examples:
        raise CurationError("refusing to emit an empty dataset")
    if format == "vqa_jsonl":
        records = [_vqa_record(e) for e in examples]
    elif format == "chat_sft_jsonl":
        records = [_chat_record(e, instruction) for e in examples]
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    payload = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records).encode("utf-8")
    out_path = Path(out_path)
    out_path.write_bytes(payload)
    manifest = {
        "n_examples": len(records),
        "format": format,
        "strategy": strategy,
        "dataset": out_path.name,
        "content_sha256": hashlib.sha256(payload).hexdigest(),
        "advisory_hparams": dict(ADVISORY_HPARAMS),
    }
    manifest_path(out_path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def read_dataset(path) -> list[VqaExample]:
    """Parse a dataset written by :func:`emit_dataset` (either format)."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "messages" in rec:
                user = rec["messages"][1]["content"]
                question = next(p["text"] for p in user if p.get("type") == "text")
                out.append(VqaExample(rec["case_id"], tuple(rec["images"]), question, rec["messages"][2]["content"]))
            else:
                out.append(VqaExample(rec["case_id"], tuple(rec["images"]), rec["question"], rec["answer"]))
    return out


def verify_manifest(dataset_path) -> bool:
    manifest = json.loads(manifest_path(dataset_path).read_text(encoding="utf-8"))
    digest = hashlib.sha256(Path(dataset_path).read_bytes()).hexdigest()
    return digest == manifest["content_sha256"]
