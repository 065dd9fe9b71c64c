"""Prompt templates for the questioning, captioning and selection roles.

Templates use ``{name}`` placeholders for a fixed set of names only, so JSON
braces in the text need no escaping. These defaults are this package's own
wording; override them per run through the config file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

DEFAULT_INSTRUCTION = "Provide a diagnostic report based on the given image(s)."

PLACEHOLDERS = ("instruction", "examples", "transcript", "case_id", "question", "answer", "ground_truth")
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")

REQUIRED = {
    "question_system": ("examples", "transcript"),
    "caption_system": ("examples", "transcript"),
    "select_system": ("question", "answer", "ground_truth"),
}

QUESTION_SYSTEM = """\
You are an experienced radiologist writing a report for a study you cannot see. \
A visual question answering (VQA) model can see the image(s) and answers your questions.
Task: {instruction}
{examples}
Case: {case_id}
Conversation so far:
{transcript}

Ask one new question that helps complete the report, starting broad and then \
asking about specific details, or stop once you have enough information.
Reply with a single JSON object and nothing else:
{"action": "ask", "question": "<your question>"} or {"action": "stop"}"""

CAPTION_SYSTEM = """\
You are an experienced radiologist. {instruction}
You cannot see the image(s); rely on the question-answer transcript with the VQA model below.
{examples}
Case: {case_id}
Transcript:
{transcript}

Write the final report as plain prose in the style of the example reports. \
Output only the report text."""

SELECT_SYSTEM = """\
You are reviewing synthetic training data for a visual question answering model. \
Compare the answer with the ground-truth report, as a teacher checks a student's \
work against the answer key. Keep the pair only if the question is appropriate and \
the answer is consistent with the ground truth.
Question: {question}
Answer: {answer}
Ground truth: {ground_truth}

Reply with a single JSON object and nothing else: {"keep": true} or {"keep": false}"""

QUESTION_TRIGGER = "What is your next action?"
CAPTION_TRIGGER = "Write the report."
SELECT_TRIGGER = "Should this pair be kept?"
REPROMPT = "Your previous reply was not valid JSON in the requested format. Reply with exactly one JSON object as instructed."

EXAMPLES_HEADER = "Example reports from similar studies:"
EMPTY_TRANSCRIPT = "(no findings gathered yet)"


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSet:
    question_system: str = QUESTION_SYSTEM
    caption_system: str = CAPTION_SYSTEM
    select_system: str = SELECT_SYSTEM
    instruction: str = DEFAULT_INSTRUCTION

    def __post_init__(self):
        for attr, names in REQUIRED.items():
            template = getattr(self, attr)
            missing = [n for n in names if "{" + n + "}" not in template]
            if missing:
                raise PromptError(f"{attr} is missing placeholders: {', '.join(missing)}")


def render(template: str, **values: str) -> str:
    def sub(m):
        return values.get(m.group(1), "")

    text = _PLACEHOLDER_RE.sub(sub, template)
    return re.sub(r"\n{3,}", "\n\n", text)


def render_examples(captions: Sequence[str]) -> str:
    """Numbered example block, or the empty string when there are no examples."""
    if not captions:
        return ""
    lines = [EXAMPLES_HEADER]
    lines += [f"{i}. {c}" for i, c in enumerate(captions, 1)]
    return "\n".join(lines)


def _one_line(text: str) -> str:
    return text.replace("\r", " ").replace("\n", " ")


def render_transcript(turns) -> str:
    """Numbered ``Qn:``/``An:`` lines from objects with ``question``/``answer``."""
    if not turns:
        return EMPTY_TRANSCRIPT
    lines = []
    for i, t in enumerate(turns, 1):
        lines.append(f"Q{i}: {_one_line(t.question)}")
        lines.append(f"A{i}: {_one_line(t.answer)}")
    return "\n".join(lines)


_TURN_RE = re.compile(r"^([QA])(\d+): (.*)$", re.MULTILINE)


def parse_transcript(text: str) -> list[tuple[str, str]]:
    """Recover (question, answer) pairs from a rendered prompt."""
    qs: dict[int, str] = {}
    ans: dict[int, str] = {}
    for kind, num, body in _TURN_RE.findall(text):
        (qs if kind == "Q" else ans)[int(num)] = body
    return [(qs[i], ans.get(i, "")) for i in sorted(qs)]


def parse_field(text: str, label: str) -> str:
    """Value after ``label:`` on its own line (e.g. ``Case``, ``Question``)."""
    m = re.search(rf"^{re.escape(label)}: (.*)$", text, re.MULTILINE)
    if m is None:
        raise PromptError(f"prompt has no {label!r} line")
    return m.group(1)
