"""Chat backends for the agent and VQA roles, plus image-embedding storage.

Every backend exposes ``complete(messages, params) -> str``. Call sites go
through :func:`chat`, which validates the request first. Three kinds ship
here:

* :class:`RemoteBackend` speaks the OpenAI-style ``/v1/chat/completions``
  protocol over HTTP, with retries on transport errors and 429/5xx.
* :class:`ScriptedBackend` replays a fixed list of replies.
* :class:`FunctionBackend` wraps a deterministic ``(messages, params) -> str``
  callable (the simulation oracles are built this way).
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import httpx
import numpy as np

log = logging.getLogger(__name__)
trace_log = logging.getLogger("mocoll.trace")

AGENT_KEY_ENV = "MOCOLL_AGENT_KEY"
VQA_KEY_ENV = "MOCOLL_VQA_KEY"


class BackendError(RuntimeError):
    pass


class ScriptExhausted(BackendError):
    pass


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class Text:
    text: str


@dataclass(frozen=True)
class ImageRef:
    ref: str


Part = Union[Text, ImageRef]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: tuple[Part, ...]

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content:
            raise ValueError("a message needs at least one part")
        if self.role != "user" and self.has_images:
            raise ValueError("images may only appear in user messages")

    @classmethod
    def system(cls, text: str) -> "ChatMessage":
        return cls("system", (Text(text),))

    @classmethod
    def assistant(cls, text: str) -> "ChatMessage":
        return cls("assistant", (Text(text),))

    @classmethod
    def user(cls, text: str, images: Sequence[str] = ()) -> "ChatMessage":
        return cls("user", (*(ImageRef(i) for i in images), Text(text)))

    @property
    def has_images(self) -> bool:
        return any(isinstance(p, ImageRef) for p in self.content)

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.content if isinstance(p, Text))

    @property
    def images(self) -> list[str]:
        return [p.ref for p in self.content if isinstance(p, ImageRef)]


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    max_tokens: int = 4096

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


EVAL_PARAMS = GenerationParams(temperature=0.0, max_tokens=4096)
CURATION_PARAMS = GenerationParams(temperature=0.1, max_tokens=4096)
SELECT_PARAMS = GenerationParams(temperature=0.0, max_tokens=4096)


# -- backends -----------------------------------------------------------------


class ChatBackend:
    name: str = "backend"
    supports_vision: bool = False

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams) -> str:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": type(self).__name__, "name": self.name, "vision": self.supports_vision}


def chat(backend: ChatBackend, messages: Sequence[ChatMessage], params: GenerationParams = EVAL_PARAMS) -> str:
    """Send ``messages`` to ``backend`` and return the assistant text."""
    if not messages:
        raise ValueError("message list is empty")
    if not backend.supports_vision and any(m.has_images for m in messages):
        raise BackendError(f"backend {backend.name!r} is text-only but the request carries images")
    return backend.complete(list(messages), params)


class ScriptedBackend(ChatBackend):
    """Replays ``replies`` in order; calls are serialised."""

    def __init__(self, replies: Sequence[str], name: str = "scripted", vision: bool = False):
        self.replies = list(replies)
        self.name = name
        self.supports_vision = vision
        self.calls: list[list[ChatMessage]] = []
        self._pos = 0
        self._lock = threading.Lock()

    def complete(self, messages, params):
        with self._lock:
            self.calls.append(list(messages))
            if self._pos >= len(self.replies):
                raise ScriptExhausted(f"{self.name}: script exhausted after {self._pos} replies")
            reply = self.replies[self._pos]
            self._pos += 1
            return reply


class FunctionBackend(ChatBackend):
    """Backend driven by a pure function of the request.

    The function must be deterministic for replays to be order independent;
    a lock is still held so that stateful callables stay safe.
    """

    def __init__(self, fn: Callable[[list[ChatMessage], GenerationParams], str], name: str = "function", vision: bool = False):
        self.fn = fn
        self.name = name
        self.supports_vision = vision
        self._lock = threading.Lock()

    def complete(self, messages, params):
        with self._lock:
            return self.fn(list(messages), params)


def encode_image(ref: str) -> str:
    """Return a URL usable in an ``image_url`` part: remote URLs pass through, files become data URLs."""
    if ref.startswith(("http://", "https://", "data:")):
        return ref
    path = Path(ref)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise BackendError(f"cannot read image {ref!r}: {exc}") from exc
    mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def to_wire(message: ChatMessage) -> dict:
    if not message.has_images and len(message.content) == 1:
        return {"role": message.role, "content": message.text}
    parts = []
    for p in message.content:
        if isinstance(p, Text):
            parts.append({"type": "text", "text": p.text})
        else:
            parts.append({"type": "image_url", "image_url": {"url": encode_image(p.ref)}})
    return {"role": message.role, "content": parts}


RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


class RemoteBackend(ChatBackend):
    """Client for an OpenAI-compatible chat completions server."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        *,
        name: Optional[str] = None,
        vision: bool = False,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff: float = 1.0,
        max_in_flight: int = 8,
        trace: bool = False,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.name = name or model
        self.supports_vision = vision
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.trace = trace
        self._slots = threading.BoundedSemaphore(max_in_flight)
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @property
    def url(self) -> str:
        return f"{self.base_url}/v1/chat/completions"

    def describe(self) -> dict:
        return {**super().describe(), "model": self.model, "base_url": self.base_url}

    def close(self) -> None:
        self._client.close()

    def build_request(self, messages, params) -> dict:
        return {
            "model": self.model,
            "messages": [to_wire(m) for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }

    def complete(self, messages, params):
        body = self.build_request(messages, params)
        if self.trace:
            trace_log.info("POST %s (Authorization: <redacted>) %s", self.url, json.dumps(body))
        with self._slots:
            resp = self._post_with_retry(body)
        if self.trace:
            trace_log.info("response %s %s", resp.status_code, resp.text)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"{self.name}: response has no assistant content") from exc
        if not isinstance(content, str):
            raise BackendError(f"{self.name}: assistant content is not text")
        return content

    def _post_with_retry(self, body: dict) -> httpx.Response:
        last: Optional[str] = None
        for attempt in range(self.max_attempts):
            if attempt:
                delay = self.backoff * 2 ** (attempt - 1)
                log.warning("%s: retry %d/%d in %.1fs after %s", self.name, attempt, self.max_attempts - 1, delay, last)
                time.sleep(delay)
            try:
                resp = self._client.post(self.url, json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code in RETRY_STATUSES:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendError(f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}")
            return resp
        raise BackendError(f"{self.name}: giving up after {self.max_attempts} attempts ({last})")


# -- embeddings ---------------------------------------------------------------


@dataclass
class EmbeddingIndex:
    """Vectors keyed by case_id (or by image ref for per-image indexes)."""

    dimension: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, key: str, vector) -> None:
        vec = np.asarray(vector, dtype=float)
        if vec.ndim != 1 or vec.shape[0] != self.dimension:
            raise ValueError(f"{key}: expected a {self.dimension}-d vector, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"{key}: vector has non-finite values")
        if key in self.entries:
            raise ValueError(f"duplicate embedding key {key!r}")
        self.entries[key] = vec

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __getitem__(self, key) -> np.ndarray:
        return self.entries[key]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "EmbeddingIndex":
        if not mapping:
            raise ValueError("empty embedding mapping")
        first = next(iter(mapping.values()))
        index = cls(len(first))
        for key, vec in mapping.items():
            index.add(key, vec)
        return index


def load_embedding_index(path) -> EmbeddingIndex:
    """Read ``{"case_id": str, "vector": [float, ...]}`` JSONL records."""
    index: Optional[EmbeddingIndex] = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key, vec = rec["case_id"], rec["vector"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed embedding record") from exc
            if not isinstance(key, str) or not isinstance(vec, list):
                raise ValueError(f"{path}:{lineno}: malformed embedding record")
            if index is None:
                if not vec:
                    raise ValueError(f"{path}:{lineno}: zero-length vector for {key!r}")
                index = EmbeddingIndex(len(vec))
            if len(vec) != index.dimension:
                raise ValueError(
                    f"{path}:{lineno}: {key!r} has dimension {len(vec)}, expected {index.dimension}"
                )
            index.add(key, vec)
    if index is None:
        raise ValueError(f"{path}: embedding file is empty")
    return index


def write_embedding_index(index: EmbeddingIndex, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for key, vec in index.entries.items():
            fh.write(json.dumps({"case_id": key, "vector": [float(v) for v in vec]}) + "\n")


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either is the zero vector."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na2, nb2 = float(np.dot(a, a)), float(np.dot(b, b))
    if na2 == 0.0 or nb2 == 0.0:
        return 0.0
    return float(np.dot(a, b) / np.sqrt(na2 * nb2))


def api_key(env_var: str) -> Optional[str]:
    return os.environ.get(env_var) or None
