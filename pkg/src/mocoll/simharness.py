"""A deterministic synthetic finding world with scripted agent, VQA and selector oracles.

Each simulated case has a hidden set of discrete findings (present or
absent) and a report rendered from them, one sentence per finding. The
scripted VQA answers truthfully with probability ``1 - epsilon`` and returns
the negated sentence otherwise. The scripted selector keeps an answer iff
its sentence occurs in the ground-truth report. Because every answer can be
checked against the hidden state, selection precision and finding recall
are exact quantities rather than estimates.

The oracles are plain chat backends that read the rendered prompts, so the
simulation exercises the same orchestrator and curation code as a real run.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backends import EmbeddingIndex, FunctionBackend
from .corpus import CaptionedCase, Corpus
from .curation import MemoryEntry, SelectionStrategy, curate, curation_config, generate_memories
from .metrics import bleu, rouge_l
from .orchestrator import Backends, OrchestratorConfig, run_batch
from .prompts import (
    CAPTION_TRIGGER,
    QUESTION_TRIGGER,
    SELECT_TRIGGER,
    PromptError,
    parse_field,
    parse_transcript,
)
from .retrieval import FewShotConfig, select_examples
from .text import tokenize

log = logging.getLogger(__name__)

CANNOT_ANSWER = "i cannot answer that from the image(s)."
NO_FINDINGS_CAPTION = "no findings were gathered."
SIM_SCHEME = "sim://"


@dataclass(frozen=True)
class FindingTemplate:
    name: str
    present: str
    absent: str

    def sentence(self, value: bool) -> str:
        return self.present if value else self.absent

    def question(self) -> str:
        return f"What can you tell me about the {self.name}?"


DEFAULT_VOCABULARY = (
    FindingTemplate("pleural effusion", "there is a pleural effusion.", "there is no pleural effusion."),
    FindingTemplate("pneumothorax", "there is a pneumothorax.", "there is no pneumothorax."),
    FindingTemplate("heart size", "the heart is enlarged.", "the heart size is normal."),
    FindingTemplate("consolidation", "there is focal consolidation.", "there is no focal consolidation."),
    FindingTemplate("pulmonary edema", "there is pulmonary edema.", "there is no pulmonary edema."),
    FindingTemplate("aorta", "the aorta is tortuous.", "the aorta is normal in caliber."),
    FindingTemplate("thoracic spine", "there are t-spine osteophytes.", "the thoracic spine is unremarkable."),
    FindingTemplate("lung volumes", "the lungs are hyperinflated.", "the lungs are not hyperinflated."),
    FindingTemplate("atelectasis", "there is bibasilar atelectasis.", "there is no atelectasis."),
    FindingTemplate("pulmonary nodule", "there is a pulmonary nodule.", "there is no pulmonary nodule."),
    FindingTemplate("hilar contours", "the hilar contours are prominent.", "the hilar contours are normal."),
    FindingTemplate("rib fracture", "there is an acute rib fracture.", "there is no acute rib fracture."),
)


def hashed_unit(*parts) -> float:
    """Uniform float in [0, 1) derived from ``parts``; independent of call order."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


@dataclass(frozen=True)
class FindingWorld:
    vocabulary: tuple[FindingTemplate, ...] = DEFAULT_VOCABULARY
    n_findings_per_case: tuple[int, int] = (3, 5)
    n_images_per_case: tuple[int, int] = (1, 2)
    p_present: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if len(self.vocabulary) < 8:
            raise ValueError("a finding world needs at least 8 templates")
        names = [t.name for t in self.vocabulary]
        if len(set(names)) != len(names):
            raise ValueError("finding names must be unique")
        lo, hi = self.n_findings_per_case
        if not 1 <= lo <= hi <= len(self.vocabulary):
            raise ValueError("invalid n_findings_per_case range")
        ilo, ihi = self.n_images_per_case
        if not 1 <= ilo <= ihi <= 4:
            raise ValueError("invalid n_images_per_case range")

    def template(self, name: str) -> FindingTemplate:
        for t in self.vocabulary:
            if t.name == name:
                return t
        raise KeyError(name)

    def finding_in(self, question: str) -> Optional[FindingTemplate]:
        """The template whose name occurs in ``question`` (longest name wins)."""
        q = question.lower()
        hits = [t for t in self.vocabulary if t.name in q]
        return max(hits, key=lambda t: len(t.name)) if hits else None


@dataclass(frozen=True)
class SimCase:
    case: CaptionedCase
    findings: tuple[tuple[str, bool], ...]

    @property
    def case_id(self) -> str:
        return self.case.case_id

    @property
    def hidden(self) -> dict[str, bool]:
        return dict(self.findings)


def render_report(world: FindingWorld, findings: dict[str, bool]) -> str:
    """One sentence per finding, in vocabulary order."""
    return " ".join(t.sentence(findings[t.name]) for t in world.vocabulary if t.name in findings)


@dataclass
class SimWorld:
    world: FindingWorld
    cases: list[SimCase]
    index: EmbeddingIndex

    def __post_init__(self):
        self._by_id = {c.case_id: c for c in self.cases}

    def __getitem__(self, case_id: str) -> SimCase:
        return self._by_id[case_id]

    def __len__(self) -> int:
        return len(self.cases)

    def captioned(self) -> list[CaptionedCase]:
        return [c.case for c in self.cases]

    def corpus(self, name: str = "sim") -> Corpus:
        return Corpus(tuple(self.captioned()), name=name)

    def case_for_images(self, image_refs: Sequence[str]) -> SimCase:
        for ref in image_refs:
            if ref.startswith(SIM_SCHEME):
                cid = ref[len(SIM_SCHEME):].split("/", 1)[0]
                if cid in self._by_id:
                    return self._by_id[cid]
        raise KeyError(f"no simulated case for images {list(image_refs)!r}")


def embed_findings(world: FindingWorld, findings: dict[str, bool]) -> np.ndarray:
    """One-hot over (finding, value) pairs; unmentioned findings stay zero."""
    vec = np.zeros(2 * len(world.vocabulary))
    for i, t in enumerate(world.vocabulary):
        if t.name in findings:
            vec[2 * i + (0 if findings[t.name] else 1)] = 1.0
    return vec


def generate_world(world: FindingWorld, n_cases: int) -> SimWorld:
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    rng = random.Random(world.seed)
    width = len(str(n_cases - 1))
    cases = []
    index = EmbeddingIndex(2 * len(world.vocabulary))
    for i in range(n_cases):
        case_id = f"sim{i:0{width}d}"
        n = rng.randint(*world.n_findings_per_case)
        chosen = rng.sample(range(len(world.vocabulary)), n)
        findings = {world.vocabulary[j].name: rng.random() < world.p_present for j in sorted(chosen)}
        n_img = rng.randint(*world.n_images_per_case)
        images = tuple(f"{SIM_SCHEME}{case_id}/view{k}" for k in range(n_img))
        report = render_report(world, findings)
        cases.append(SimCase(CaptionedCase(case_id, images, report), tuple(findings.items())))
        index.add(case_id, embed_findings(world, findings))
    return SimWorld(world, cases, index)


# -- oracles ------------------------------------------------------------------


def scripted_vqa(sim: SimCase, question: str, epsilon: float, seed: int, world: FindingWorld) -> str:
    """Truthful finding sentence, negated with probability ``epsilon``."""
    template = world.finding_in(question)
    hidden = sim.hidden
    if template is None or template.name not in hidden:
        return CANNOT_ANSWER
    value = hidden[template.name]
    if hashed_unit("vqa", seed, sim.case_id, question) < epsilon:
        value = not value
    return template.sentence(value)


def scripted_selector(entry: MemoryEntry) -> bool:
    """Keep iff the answer sentence occurs verbatim in the ground-truth report."""
    answer = entry.answer.strip()
    return bool(answer) and answer != CANNOT_ANSWER and answer in entry.ground_truth


def answer_is_correct(world: SimWorld, entry: MemoryEntry) -> bool:
    """Check an answer against the hidden state (not against report text)."""
    template = world.world.finding_in(entry.question)
    hidden = world[entry.case_id].hidden
    if template is None or template.name not in hidden:
        return False
    return entry.answer.strip() == template.sentence(hidden[template.name])


def finding_recall(world: SimWorld, case_id: str, answers: Sequence[str]) -> float:
    sim = world[case_id]
    said = set(a.strip() for a in answers)
    hits = sum(world.world.template(n).sentence(v) in said for n, v in sim.findings)
    return hits / len(sim.findings)


@dataclass(frozen=True)
class SimConfig:
    epsilon: float = 0.0
    policy: str = "coverage"
    selector_fidelity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("epsilon", "selector_fidelity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        parse_policy(self.policy)


def parse_policy(policy: str) -> tuple[str, Optional[int]]:
    m = re.fullmatch(r"(coverage|random)|stop_after[(:=](\d+)\)?", policy.strip())
    if m is None:
        raise ValueError(f"unknown agent policy {policy!r}")
    if m.group(1):
        return m.group(1), None
    return "stop_after", int(m.group(2))


def _agent_reply(world: SimWorld, cfg: SimConfig, messages) -> str:
    system = messages[0].text
    trigger = messages[1].text if len(messages) > 1 else ""
    turns = parse_transcript(system)
    if trigger == CAPTION_TRIGGER:
        facts = [a for _, a in turns if a and a != CANNOT_ANSWER]
        return " ".join(facts) if facts else NO_FINDINGS_CAPTION
    if trigger != QUESTION_TRIGGER:
        raise PromptError("simulated agent received an unrecognised request")
    case_id = parse_field(system, "Case")
    sim = world[case_id]
    asked = {t.name for q, _ in turns if (t := world.world.finding_in(q)) is not None}
    kind, limit = parse_policy(cfg.policy)
    if kind == "stop_after" and len(turns) >= limit:
        return '{"action": "stop"}'
    if kind == "random":
        pending = [t for t in world.world.vocabulary if t.name not in asked]
        if not pending:
            return '{"action": "stop"}'
        pick = pending[int(hashed_unit("agent", cfg.seed, case_id, len(turns)) * len(pending))]
    else:
        pending = [world.world.template(n) for n, _ in sim.findings if n not in asked]
        if not pending:
            return '{"action": "stop"}'
        pick = pending[0]
    return '{"action": "ask", "question": "%s"}' % pick.question()


def _vqa_reply(world: SimWorld, cfg: SimConfig, messages) -> str:
    msg = messages[-1]
    return scripted_vqa(world.case_for_images(msg.images), msg.text, cfg.epsilon, cfg.seed, world.world)


def _select_reply(world: SimWorld, cfg: SimConfig, messages) -> str:
    system = messages[0].text
    if messages[1].text != SELECT_TRIGGER:
        raise PromptError("simulated selector received an unrecognised request")
    question = parse_field(system, "Question")
    answer = parse_field(system, "Answer")
    truth = parse_field(system, "Ground truth")
    keep = scripted_selector(MemoryEntry("sim", ("sim://",), question, answer, truth))
    if hashed_unit("select", cfg.seed, question, answer, truth) >= cfg.selector_fidelity:
        keep = not keep
    return '{"keep": %s}' % ("true" if keep else "false")


def sim_backends(world: SimWorld, cfg: SimConfig, pool: Sequence[CaptionedCase] = ()) -> Backends:
    return Backends(
        agent=FunctionBackend(lambda m, p: _agent_reply(world, cfg, m), name=f"sim-agent[{cfg.policy}]"),
        vqa=FunctionBackend(lambda m, p: _vqa_reply(world, cfg, m), name=f"sim-vqa[eps={cfg.epsilon:g}]", vision=True),
        select_agent=FunctionBackend(
            lambda m, p: _select_reply(world, cfg, m), name=f"sim-selector[fidelity={cfg.selector_fidelity:g}]"
        ),
        pool=tuple(pool),
        index=world.index,
    )


# -- ablations ----------------------------------------------------------------

ABLATIONS = ("icl_count", "conversation_length", "selection_strategy", "data_size")


@dataclass
class AblationTable:
    kind: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "columns": self.columns, "rows": self.rows}


@dataclass(frozen=True)
class AblationSetup:
    world: FindingWorld = FindingWorld()
    sim: SimConfig = SimConfig()
    n_cases: int = 200
    max_questions: int = 4
    few_shot_k: int = 0
    parallelism: int = 1


def _precision(world: SimWorld, memories) -> float:
    if not memories:
        return 0.0
    return sum(answer_is_correct(world, m) for m in memories) / len(memories)


def _conversation_length(setup: AblationSetup, grid) -> AblationTable:
    world = generate_world(setup.world, setup.n_cases)
    backends = sim_backends(world, setup.sim)
    cases = world.captioned()
    table = AblationTable("conversation_length", ["max_questions", "mean_turns", "finding_recall", "bleu1", "rouge_l"])
    for m in grid:
        config = OrchestratorConfig(max_questions=int(m), few_shot=FewShotConfig(k=0))
        convs = run_batch(cases, config, backends, setup.parallelism)
        recall = [finding_recall(world, c.case_id, [t.answer for t in c.turns]) for c in convs]
        cands = [tokenize(c.caption or "") for c in convs]
        refs = [tokenize(world[c.case_id].case.report_text) for c in convs]
        table.rows.append({
            "max_questions": int(m),
            "mean_turns": math.fsum(len(c.turns) for c in convs) / len(convs),
            "finding_recall": math.fsum(recall) / len(recall),
            "bleu1": bleu(cands, refs, 1),
            "rouge_l": rouge_l(cands, refs),
        })
    return table


def _selection_strategy(setup: AblationSetup, grid) -> AblationTable:
    world = generate_world(setup.world, setup.n_cases)
    backends = sim_backends(world, setup.sim)
    cases = world.captioned()
    config = curation_config(max_questions=setup.max_questions, k=0, seed=setup.sim.seed)
    _, convs = generate_memories(cases, config, backends, setup.parallelism, caption=True)
    table = AblationTable("selection_strategy", ["strategy", "n_memories", "n_selected", "selection_ratio", "precision"])
    for item in grid:
        strategy = item if isinstance(item, SelectionStrategy) else SelectionStrategy.parse(str(item))
        examples, report, memories = curate(cases, config, strategy, backends, setup.parallelism, conversations=convs)
        keep = {(e.case_id, e.question, e.answer) for e in examples}
        selected = [m for m in memories if (m.case_id, m.question, m.answer) in keep]
        table.rows.append({
            "strategy": str(strategy),
            "n_memories": report.n_memories,
            "n_selected": report.n_selected,
            "selection_ratio": report.selection_ratio,
            "precision": _precision(world, selected),
        })
    return table


def _jaccard(a: set, b: set) -> float:
    return len(a & b) / len(a | b) if a | b else 1.0


def _icl_count(setup: AblationSetup, grid) -> AblationTable:
    world = generate_world(setup.world, setup.n_cases)
    cases = world.captioned()
    split = max(1, int(0.8 * len(cases) + 0.5))
    pool, queries = cases[:split], cases[split:] or cases[:1]
    table = AblationTable("icl_count", ["k", "strategy", "mean_examples", "example_overlap"])
    for k in grid:
        for strategy in ("random", "similarity"):
            cfg = FewShotConfig(k=int(k), strategy=strategy, seed=setup.sim.seed)
            overlaps, sizes = [], []
            for q in queries:
                ex = select_examples(q, pool, cfg, world.index)
                sizes.append(len(ex))
                qset = set(world[q.case_id].findings)
                overlaps += [_jaccard(qset, set(world[cid].findings)) for cid in ex.case_ids]
            table.rows.append({
                "k": int(k),
                "strategy": strategy,
                "mean_examples": math.fsum(sizes) / len(sizes),
                "example_overlap": math.fsum(overlaps) / len(overlaps) if overlaps else 0.0,
            })
    return table


def _data_size(setup: AblationSetup, grid) -> AblationTable:
    biggest = max(int(n) for n in grid)
    world = generate_world(setup.world, biggest)
    backends = sim_backends(world, setup.sim)
    config = curation_config(max_questions=setup.max_questions, k=0, seed=setup.sim.seed)
    all_pairs = 2 * len(setup.world.vocabulary)
    table = AblationTable("data_size", ["n_cases", "n_memories", "n_selected", "precision", "pair_coverage"])
    for n in grid:
        cases = world.captioned()[: int(n)]
        examples, report, memories = curate(cases, config, SelectionStrategy("agent_based"), backends, setup.parallelism)
        covered = set()
        for e in examples:
            t = setup.world.finding_in(e.question)
            if t is not None:
                covered.add((t.name, e.answer))
        keep = {(e.case_id, e.question, e.answer) for e in examples}
        table.rows.append({
            "n_cases": int(n),
            "n_memories": report.n_memories,
            "n_selected": report.n_selected,
            "precision": _precision(world, [m for m in memories if (m.case_id, m.question, m.answer) in keep]),
            "pair_coverage": len(covered) / all_pairs,
        })
    return table


_RUNNERS = {
    "icl_count": _icl_count,
    "conversation_length": _conversation_length,
    "selection_strategy": _selection_strategy,
    "data_size": _data_size,
}

DEFAULT_GRIDS = {
    "icl_count": [0, 1, 3, 5],
    "conversation_length": [1, 2, 3, 4],
    "selection_strategy": ["none", "top-r=0.5", "top-r=0.25", "top-r=0.125", "agent"],
    "data_size": [25, 50, 100, 200],
}


def run_ablation(kind: str, grid: Sequence, setup: AblationSetup = AblationSetup()) -> AblationTable:
    if kind not in _RUNNERS:
        raise ValueError(f"unknown ablation {kind!r}; choose from {', '.join(ABLATIONS)}")
    if not grid:
        raise ValueError("ablation grid is empty")
    table = _RUNNERS[kind](setup, list(grid))
    table.params = {
        "n_cases": setup.n_cases,
        "max_questions": setup.max_questions,
        "epsilon": setup.sim.epsilon,
        "policy": setup.sim.policy,
        "selector_fidelity": setup.sim.selector_fidelity,
        "seed": setup.sim.seed,
        "world_seed": setup.world.seed,
        "grid": [str(g) if isinstance(g, SelectionStrategy) else g for g in grid],
    }
    return table
