"""Chat-completion and embedding providers.

Two implementations share one contract: :class:`ScriptedBackend` is a pure
function of (request, seed, fixtures) and never touches the network;
:class:`RemoteBackend` speaks the OpenAI-compatible HTTP API with bounded
retries and exponential backoff. Both account token usage against an
optional budget.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .schema import ToolSpec

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")


class BackendError(RuntimeError):
    pass


class Timeout(BackendError):
    pass


class RateLimited(BackendError):
    pass


class ProviderError(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"provider returned {status}: {body[:200]}")
        self.status = status
        self.body = body


class BudgetExceeded(BackendError):
    pass


class EmbeddingFailure(BackendError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str = ""
    tool_calls: tuple[dict, ...] = ()
    tool_results: tuple[dict, ...] = ()

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            out["tool_calls"] = list(self.tool_calls)
        if self.tool_results:
            out["tool_results"] = list(self.tool_results)
        return out


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    tools: tuple[ToolSpec, ...] = ()
    temperature: float = 0.7
    max_tokens: int = 1024
    logprobs_requested: bool = False
    # Which pipeline agent is speaking; scripted backends dispatch on it.
    agent: str = "assistant"
    # Structured context for scripted agents. Never sent over the wire.
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be system or user")
        for m in self.messages:
            if m.role not in ROLES:
                raise ValueError(f"bad role {m.role!r}")
        if not 0 <= self.temperature <= 2:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def canonical(self) -> str:
        body = {
            "agent": self.agent,
            "messages": [m.to_json() for m in self.messages],
            "tools": sorted(t.name for t in self.tools),
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "logprobs": self.logprobs_requested,
            "metadata": self.metadata,
        }
        return json.dumps(body, sort_keys=True, ensure_ascii=False, default=str)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    logprobs: tuple[float, ...] | None = None
    usage: Usage = Usage()


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model: str = ""

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def normalize(vec: Sequence[float]) -> tuple[float, ...]:
    arr = np.asarray(vec, dtype=float)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise EmbeddingFailure("cannot normalise a zero vector")
    return tuple((arr / norm).tolist())


def count_tokens(text: str) -> int:
    """Cheap deterministic token estimate (whitespace pieces)."""
    return len(text.split())


class Backend(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...

    @property
    def parallelism(self) -> int: ...


class TokenBudget:
    """Thread-safe usage ledger with an optional ceiling."""

    def __init__(self, limit: int | None = None):
        self.limit = limit
        self.entries: list[tuple[str, int, int]] = []
        self._lock = threading.Lock()

    @property
    def total(self) -> int:
        with self._lock:
            return sum(p + c for _, p, c in self.entries)

    def check(self) -> None:
        if self.limit is not None and self.total >= self.limit:
            raise BudgetExceeded(f"token budget of {self.limit} exhausted")

    def record(self, agent: str, usage: Usage) -> None:
        with self._lock:
            self.entries.append((agent, usage.prompt_tokens, usage.completion_tokens))

    def by_agent(self) -> dict[str, int]:
        out: dict[str, int] = {}
        with self._lock:
            for agent, p, c in self.entries:
                out[agent] = out.get(agent, 0) + p + c
        return out


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------

Responder = Callable[[ChatRequest, random.Random], str]


def _seed_int(*parts: Any) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


def load_fixtures(path: str | Path) -> dict[tuple[str, int, str], str]:
    """Read a JSONL transcript: ``{"agent", "step", "text"[, "key"]}`` per line."""
    out: dict[tuple[str, int, str], str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        out[(row["agent"], int(row.get("step", 0)), str(row.get("key", "")))] = row["text"]
    return out


class ScriptedBackend:
    """Deterministic offline backend.

    Chat replies come from, in order: the fixture table keyed by
    ``(agent, step, key)``, then a per-agent responder callable, then a
    seeded echo. ``step`` is ``metadata["step"]`` when given, else the
    number of assistant messages already in the request; ``key`` is
    ``metadata["fixture_key"]``. Embeddings are seeded pseudo-random unit
    vectors, with ``embedding_overrides`` pinning chosen texts.
    """

    def __init__(
        self,
        seed: int = 0,
        fixtures: Mapping[tuple[str, int, str], str] | None = None,
        responders: Mapping[str, Responder] | None = None,
        embedding_overrides: Mapping[str, Sequence[float]] | None = None,
        embedding_dim: int = 64,
        budget: TokenBudget | None = None,
        parallelism: int = 8,
        model: str = "scripted",
    ):
        self.seed = seed
        self.fixtures = dict(fixtures or {})
        self.responders = dict(responders or {})
        self.embedding_overrides = {k: normalize(v) for k, v in (embedding_overrides or {}).items()}
        self.embedding_dim = embedding_dim
        self.budget = budget or TokenBudget()
        self._parallelism = parallelism
        self.model = model

    @property
    def parallelism(self) -> int:
        return self._parallelism

    def _step(self, request: ChatRequest) -> int:
        if "step" in request.metadata:
            return int(request.metadata["step"])
        return sum(1 for m in request.messages if m.role == "assistant")

    def chat(self, request: ChatRequest) -> ChatResponse:
        self.budget.check()
        key = str(request.metadata.get("fixture_key", ""))
        step = self._step(request)
        text = self.fixtures.get((request.agent, step, key))
        if text is None:
            rng = random.Random(_seed_int(self.seed, request.canonical()))
            responder = self.responders.get(request.agent)
            if responder is not None:
                text = responder(request, rng)
            else:
                text = f"[{request.agent}] ack {rng.randint(0, 10**6)}"
        prompt_tokens = sum(count_tokens(m.content) for m in request.messages)
        usage = Usage(prompt_tokens, count_tokens(text))
        logprobs = None
        if request.logprobs_requested:
            lp_rng = random.Random(_seed_int(self.seed, "lp", request.canonical(), text))
            logprobs = tuple(-lp_rng.uniform(0.01, 2.0) for _ in range(max(usage.completion_tokens, 1)))
        self.budget.record(request.agent, usage)
        return ChatResponse(text=text, finish_reason="stop", logprobs=logprobs, usage=usage)

    def embed_one(self, text: str) -> tuple[float, ...]:
        if text in self.embedding_overrides:
            return self.embedding_overrides[text]
        gen = np.random.default_rng(_seed_int(self.seed, "embed", text))
        return normalize(gen.standard_normal(self.embedding_dim))

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        self.budget.check()
        out = []
        for text in texts:
            if not text:
                raise EmbeddingFailure("cannot embed empty text")
            out.append(EmbeddingVector(self.embed_one(text), self.model))
        self.budget.record("embed", Usage(sum(count_tokens(t) for t in texts), 0))
        return out


# ---------------------------------------------------------------------------
# Remote backend
# ---------------------------------------------------------------------------


@dataclass
class AttemptRecord:
    endpoint: str
    attempt: int
    outcome: str
    backoff: float


class RemoteBackend:
    """OpenAI-compatible ``/chat/completions`` and ``/embeddings`` client."""

    def __init__(
        self,
        base_url: str,
        chat_model: str,
        embed_model: str = "",
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_base: float = 1.0,
        backoff_cap: float = 30.0,
        parallelism: int = 8,
        budget: TokenBudget | None = None,
        sleep: Callable[[float], None] = time.sleep,
        client: Any = None,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.chat_model = chat_model
        self.embed_model = embed_model or chat_model
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.budget = budget or TokenBudget()
        self._sleep = sleep
        self._parallelism = parallelism
        self._gate = threading.BoundedSemaphore(parallelism)
        self.request_log: list[AttemptRecord] = []
        self._log_lock = threading.Lock()
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    @property
    def parallelism(self) -> int:
        return self._parallelism

    def backoff(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * (2**attempt))

    def _log(self, rec: AttemptRecord) -> None:
        with self._log_lock:
            self.request_log.append(rec)

    def _post(self, endpoint: str, payload: dict[str, Any]) -> dict[str, Any]:
        import httpx

        url = f"{self.base_url}/{endpoint}"
        last: BackendError | None = None
        for attempt in range(self.max_retries + 1):
            self.budget.check()
            try:
                with self._gate:
                    resp = self._client.post(url, json=payload)
            except (httpx.TimeoutException, httpx.ConnectError, httpx.RemoteProtocolError) as exc:
                last = Timeout(f"{endpoint}: {exc}")
                outcome = "timeout"
            else:
                if resp.status_code == 200:
                    self._log(AttemptRecord(endpoint, attempt, "ok", 0.0))
                    return resp.json()
                if resp.status_code == 429:
                    last = RateLimited(f"{endpoint}: rate limited")
                    outcome = "rate_limited"
                elif resp.status_code >= 500:
                    last = ProviderError(resp.status_code, resp.text)
                    outcome = f"http_{resp.status_code}"
                else:
                    self._log(AttemptRecord(endpoint, attempt, f"http_{resp.status_code}", 0.0))
                    raise ProviderError(resp.status_code, resp.text)
            if attempt == self.max_retries:
                self._log(AttemptRecord(endpoint, attempt, outcome, 0.0))
                break
            delay = self.backoff(attempt)
            self._log(AttemptRecord(endpoint, attempt, outcome, delay))
            logger.warning("%s attempt %d failed (%s); retrying in %.1fs", endpoint, attempt, outcome, delay)
            self._sleep(delay)
        assert last is not None
        raise last

    def chat(self, request: ChatRequest) -> ChatResponse:
        payload: dict[str, Any] = {
            "model": self.chat_model,
            "messages": [_wire_message(m) for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.logprobs_requested:
            payload["logprobs"] = True
        data = self._post("chat/completions", payload)
        try:
            choice = data["choices"][0]
            text = choice["message"].get("content") or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(200, json.dumps(data)[:500]) from exc
        usage_raw = data.get("usage") or {}
        usage = Usage(int(usage_raw.get("prompt_tokens", 0)), int(usage_raw.get("completion_tokens", 0)))
        logprobs = None
        lp = (choice.get("logprobs") or {}).get("content") if request.logprobs_requested else None
        if lp:
            logprobs = tuple(float(t["logprob"]) for t in lp)
        self.budget.record(request.agent, usage)
        return ChatResponse(text, choice.get("finish_reason") or "stop", logprobs, usage)

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if any(not t for t in texts):
            raise EmbeddingFailure("cannot embed empty text")
        data = self._post("embeddings", {"model": self.embed_model, "input": list(texts)})
        rows = sorted(data.get("data", []), key=lambda r: r.get("index", 0))
        if len(rows) != len(texts):
            raise EmbeddingFailure(f"expected {len(texts)} embeddings, got {len(rows)}")
        usage_raw = data.get("usage") or {}
        self.budget.record("embed", Usage(int(usage_raw.get("prompt_tokens", 0)), 0))
        return [EmbeddingVector(normalize(r["embedding"]), self.embed_model) for r in rows]

    def close(self) -> None:
        self._client.close()


def _wire_message(m: Message) -> dict[str, Any]:
    # Tool turns are flattened to text; providers disagree on structured tool messages.
    if m.role == "tool":
        return {"role": "user", "content": f"<tool_response>\n{m.content}\n</tool_response>"}
    return {"role": m.role, "content": m.content}


def embed_texts(backend: Backend, texts: Iterable[str], batch: int = 64) -> list[EmbeddingVector]:
    texts = list(texts)
    out: list[EmbeddingVector] = []
    for i in range(0, len(texts), batch):
        out.extend(backend.embed(texts[i : i + batch]))
    return out
