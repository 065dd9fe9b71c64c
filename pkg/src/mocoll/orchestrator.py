"""The collaboration loop: the agent asks, the VQA model answers, the agent writes the caption.

For each case the questioning agent is asked for its next action up to
``max_questions`` times. It replies ``{"action": "ask", "question": ...}``
or ``{"action": "stop"}``. Every question goes to the VQA backend together
with the case images; the agent itself never sees pixels. After the loop
the captioning agent turns the numbered transcript into a report.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence, Union

from .backends import (
    EVAL_PARAMS,
    BackendError,
    ChatBackend,
    ChatMessage,
    GenerationParams,
    chat,
)
from .corpus import CaptionedCase
from .prompts import (
    CAPTION_TRIGGER,
    QUESTION_TRIGGER,
    REPROMPT,
    PromptSet,
    render,
    render_examples,
    render_transcript,
)
from .retrieval import EMPTY, ExampleSet, FewShotConfig, select_examples

log = logging.getLogger(__name__)

WITHIN_DATASET_MAX_QUESTIONS = 6
CROSS_DATASET_MAX_QUESTIONS = 3

StopReason = Literal["agent_stop", "max_questions", "error"]


class AgentProtocolError(ValueError):
    """The agent reply could not be parsed even after a re-prompt."""


class AllCasesFailed(RuntimeError):
    def __init__(self, conversations):
        super().__init__(f"all {len(conversations)} cases failed")
        self.conversations = conversations


@dataclass(frozen=True)
class ConversationTurn:
    index: int
    question: str
    answer: str


@dataclass(frozen=True)
class Ask:
    question: str

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError("Ask needs a non-empty question")


@dataclass(frozen=True)
class Stop:
    pass


AgentDecision = Union[Ask, Stop]


@dataclass
class Conversation:
    case_id: str
    turns: list[ConversationTurn] = field(default_factory=list)
    caption: Optional[str] = None
    stop_reason: Optional[StopReason] = None
    error: Optional[str] = None
    example_ids: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.stop_reason != "error"

    def to_record(self, model_meta: Optional[dict] = None) -> dict:
        rec = {
            "case_id": self.case_id,
            "turns": [{"i": t.index, "q": t.question, "a": t.answer} for t in self.turns],
            "caption": self.caption,
            "stop_reason": self.stop_reason,
            "model_meta": dict(model_meta or {}),
        }
        if self.error:
            rec["error"] = self.error
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Conversation":
        return cls(
            case_id=rec["case_id"],
            turns=[ConversationTurn(t["i"], t["q"], t["a"]) for t in rec["turns"]],
            caption=rec.get("caption"),
            stop_reason=rec.get("stop_reason"),
            error=rec.get("error"),
        )


@dataclass(frozen=True)
class OrchestratorConfig:
    max_questions: int = WITHIN_DATASET_MAX_QUESTIONS
    few_shot: FewShotConfig = FewShotConfig()
    agent_params: GenerationParams = EVAL_PARAMS
    vqa_params: GenerationParams = EVAL_PARAMS
    prompts: PromptSet = PromptSet()

    def __post_init__(self):
        if self.max_questions < 1:
            raise ValueError("max_questions must be >= 1")


@dataclass
class Backends:
    """Model roles. Captioning and selection default to the questioning agent."""

    agent: ChatBackend
    vqa: ChatBackend
    caption_agent: Optional[ChatBackend] = None
    select_agent: Optional[ChatBackend] = None
    # few-shot source and optional image-embedding index
    pool: Sequence[CaptionedCase] = ()
    index: object = None

    @property
    def captioner(self) -> ChatBackend:
        return self.caption_agent or self.agent

    @property
    def selector(self) -> ChatBackend:
        return self.select_agent or self.agent

    def describe(self) -> dict:
        return {
            "agent": self.agent.describe(),
            "vqa": self.vqa.describe(),
            "caption_agent": self.captioner.describe(),
            "select_agent": self.selector.describe(),
        }


# -- JSON replies -------------------------------------------------------------

_OBJ_RE = re.compile(r"\{.*\}", re.DOTALL)


def parse_json_object(reply: str) -> Optional[dict]:
    """First JSON object in ``reply`` (code fences and chatter tolerated), else None."""
    text = reply.strip()
    for attempt in (text, *(_OBJ_RE.findall(text)[:1])):
        try:
            obj = json.loads(attempt)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _decision_from(reply: str):
    obj = parse_json_object(reply)
    if obj is None:
        return None
    action = str(obj.get("action", "")).lower()
    if action == "stop":
        return Stop()
    if action == "ask":
        q = obj.get("question")
        if isinstance(q, str) and q.strip():
            return Ask(q.strip())
    return None


def ask_with_reprompt(backend, messages, params, parse: Callable[[str], object]):
    """Call ``backend``; if ``parse`` rejects the reply, re-prompt once. Returns (parsed, replies)."""
    reply = chat(backend, messages, params)
    parsed = parse(reply)
    if parsed is not None:
        return parsed, [reply]
    retry = [*messages, ChatMessage.assistant(reply or " "), ChatMessage.user(REPROMPT)]
    second = chat(backend, retry, params)
    return parse(second), [reply, second]


# -- steps --------------------------------------------------------------------


def question_messages(transcript, examples: ExampleSet, prompts: PromptSet, case_id: str = "") -> list[ChatMessage]:
    system = render(
        prompts.question_system,
        instruction=prompts.instruction,
        examples=render_examples(examples.captions),
        transcript=render_transcript(transcript),
        case_id=case_id,
    )
    return [ChatMessage.system(system), ChatMessage.user(QUESTION_TRIGGER)]


def caption_messages(transcript, examples: ExampleSet, prompts: PromptSet, case_id: str = "") -> list[ChatMessage]:
    system = render(
        prompts.caption_system,
        instruction=prompts.instruction,
        examples=render_examples(examples.captions),
        transcript=render_transcript(transcript),
        case_id=case_id,
    )
    return [ChatMessage.system(system), ChatMessage.user(CAPTION_TRIGGER)]


def next_question(
    agent: ChatBackend,
    transcript: Sequence[ConversationTurn],
    examples: ExampleSet = EMPTY,
    prompts: PromptSet = PromptSet(),
    params: GenerationParams = EVAL_PARAMS,
    case_id: str = "",
):
    """Ask the agent for its next action; returns :class:`Ask` or :class:`Stop`."""
    messages = question_messages(transcript, examples, prompts, case_id)
    decision, replies = ask_with_reprompt(agent, messages, params, _decision_from)
    if decision is None:
        raise AgentProtocolError(f"unparseable agent replies: {replies!r}")
    return decision


def answer_question(
    vqa: ChatBackend,
    question: str,
    image_refs: Sequence[str],
    params: GenerationParams = EVAL_PARAMS,
) -> str:
    if not question.strip():
        raise ValueError("question must be non-empty")
    if not 1 <= len(image_refs) <= 4:
        raise ValueError(f"expected 1..4 images, got {len(image_refs)}")
    answer = chat(vqa, [ChatMessage.user(question, images=image_refs)], params).strip()
    if not answer:
        raise BackendError(f"{vqa.name}: empty answer")
    return answer


def compose_caption(
    agent: ChatBackend,
    transcript: Sequence[ConversationTurn],
    examples: ExampleSet = EMPTY,
    prompts: PromptSet = PromptSet(),
    params: GenerationParams = EVAL_PARAMS,
    case_id: str = "",
) -> str:
    caption = chat(agent, caption_messages(transcript, examples, prompts, case_id), params).strip()
    if not caption:
        raise BackendError(f"{agent.name}: empty caption")
    return caption


def run_conversation(
    case: CaptionedCase,
    config: OrchestratorConfig,
    backends: Backends,
    *,
    caption: bool = True,
) -> Conversation:
    """Question/answer loop for one case, then (optionally) the captioning step.

    Failures never propagate: the conversation comes back with
    ``stop_reason="error"`` and whatever turns were completed.
    """
    conv = Conversation(case.case_id)
    try:
        if config.few_shot.k and backends.pool:
            examples = select_examples(case, backends.pool, config.few_shot, backends.index)
        else:
            examples = EMPTY
        conv.example_ids = tuple(examples.case_ids)
        for j in range(1, config.max_questions + 1):
            decision = next_question(
                backends.agent, conv.turns, examples, config.prompts, config.agent_params, case.case_id
            )
            if isinstance(decision, Stop):
                conv.stop_reason = "agent_stop"
                break
            answer = answer_question(backends.vqa, decision.question, case.image_refs, config.vqa_params)
            conv.turns.append(ConversationTurn(j, decision.question, answer))
        else:
            conv.stop_reason = "max_questions"
        if caption:
            conv.caption = compose_caption(
                backends.captioner, conv.turns, examples, config.prompts, config.agent_params, case.case_id
            )
    except Exception as exc:  # per-case isolation
        log.warning("case %s failed after %d turns: %s", case.case_id, len(conv.turns), exc)
        conv.stop_reason = "error"
        conv.error = f"{type(exc).__name__}: {exc}"
        conv.caption = None
    return conv


class ConversationLog:
    """Append-only JSONL checkpoint of finished conversations, keyed by case_id."""

    def __init__(self, path, model_meta: Optional[dict] = None):
        self.path = Path(path)
        self.model_meta = model_meta or {}
        self._lock = threading.Lock()

    def load(self) -> dict[str, Conversation]:
        done: dict[str, Conversation] = {}
        if not self.path.exists():
            return done
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                try:
                    conv = Conversation.from_record(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError):
                    continue  # torn final line from an interrupted run
                if conv.ok:
                    done[conv.case_id] = conv
                else:
                    done.pop(conv.case_id, None)
        return done

    def append(self, conv: Conversation) -> None:
        line = json.dumps(conv.to_record(self.model_meta), ensure_ascii=False)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()


def run_batch(
    cases: Sequence[CaptionedCase],
    config: OrchestratorConfig,
    backends: Backends,
    parallelism: int = 1,
    *,
    caption: bool = True,
    on_done: Optional[Callable[[Conversation], None]] = None,
    checkpoint: Optional[ConversationLog] = None,
) -> list[Conversation]:
    """Run :func:`run_conversation` over ``cases``; results keep input order.

    With ``checkpoint``, successful conversations already in the log are
    reused and every new one is appended as soon as it finishes.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if checkpoint is not None:
        done_before = checkpoint.load()
        todo = [c for c in cases if c.case_id not in done_before]
        if done_before:
            log.info("resuming: %d of %d cases already done", len(cases) - len(todo), len(cases))

        def record(conv):
            checkpoint.append(conv)
            if on_done is not None:
                on_done(conv)

        try:
            fresh = run_batch(todo, config, backends, parallelism, caption=caption, on_done=record)
        except AllCasesFailed as exc:
            fresh = exc.conversations
        by_id = {**done_before, **{c.case_id: c for c in fresh}}
        results = [by_id[c.case_id] for c in cases]
        if results and not any(c.ok for c in results):
            raise AllCasesFailed(results)
        return results

    total = len(cases)
    done = 0
    lock = threading.Lock()

    def one(case):
        nonlocal done
        conv = run_conversation(case, config, backends, caption=caption)
        with lock:
            if on_done is not None:
                on_done(conv)
            done += 1
            if done % 50 == 0 or done == total:
                log.info("conversations: %d/%d", done, total)
        return conv

    if parallelism == 1:
        results = [one(c) for c in cases]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, cases))
    if results and not any(c.ok for c in results):
        raise AllCasesFailed(results)
    return results
