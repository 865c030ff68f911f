"""Pluggable chat and embedding providers with token accounting.

Two chat providers ship: ``LiveProvider`` speaks a plain HTTP
chat-completion wire protocol, and ``ScriptedProvider`` plays back fixture
responses keyed by a SHA-256 digest of the stage plus the canonicalized
message sequence, so every pipeline test runs deterministically and
offline. ``CallbackProvider`` wraps an arbitrary response function (used to
author fixtures) and ``RecordingProvider`` captures any provider's traffic
into a fixture file.

Token usage is tracked per stage in a ``UsageLedger``; prompt-prefix reuse
is modeled by ``PromptPrefixCache``, which reports how many tokens of a
request were already sent earlier in the same session.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .domain import DvarError, FrameRef, canonical_json

logger = logging.getLogger(__name__)

Message = tuple[str, str]

_ROLES = ("system", "user", "assistant")

DEFAULT_EMBED_DIMENSION = 256
API_KEY_ENV = "DVAR_API_KEY"


class Stage(str, Enum):
    EVIDENCE = "evidence"
    DEBATE = "debate"
    COMPRESS = "compress"
    ARBITER = "arbiter"
    DIAGNOSE = "diagnose"


# Stages that require deterministic decoding.
_ZERO_TEMPERATURE_STAGES = (Stage.COMPRESS, Stage.ARBITER)


class TransportError(DvarError):
    """Network-level failure talking to a live provider (retryable)."""


class ContractError(DvarError):
    """A request violates a provider contract (never retried)."""


class ScriptMissError(DvarError):
    """The scripted fixture has no entry for a request digest."""

    def __init__(self, digest: str, stage: str) -> None:
        super().__init__(f"no scripted response for digest {digest} (stage {stage})")
        self.digest = digest
        self.stage = stage


def default_token_length(text: str) -> int:
    """Default length function: maximal runs of non-whitespace characters."""
    return len(text.split())


@dataclass(frozen=True)
class ChatRequest:
    """One chat call: a message sequence bound to a pipeline stage."""

    session_id: str
    stage: Stage
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_output_tokens: int = 1024
    attachments: tuple[FrameRef, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(
            self, "messages", tuple((role, text) for role, text in self.messages)
        )
        object.__setattr__(self, "attachments", tuple(self.attachments))
        if not self.messages:
            raise ValueError("messages must be nonempty")
        for role, _ in self.messages:
            if role not in _ROLES:
                raise ValueError(f"unknown message role {role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    @property
    def digest(self) -> str:
        return request_digest(self.stage, self.messages)


@dataclass(frozen=True)
class ChatResponse:
    """Response text plus the token usage the provider reported."""

    text: str
    input_tokens: int = 0
    cached_input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self) -> None:
        for name in ("input_tokens", "cached_input_tokens", "output_tokens"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.cached_input_tokens > self.input_tokens:
            raise ValueError("cached_input_tokens cannot exceed input_tokens")


def canonical_messages(messages: Sequence[Message]) -> str:
    return canonical_json([{"role": r, "text": t} for r, t in messages])


def request_digest(stage: Stage | str, messages: Sequence[Message]) -> str:
    """SHA-256 digest keying scripted fixtures: stage + canonical messages."""
    stage_value = stage.value if isinstance(stage, Stage) else str(stage)
    payload = stage_value + "\n" + canonical_messages(messages)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class PromptPrefixCache:
    """Longest previously-sent message-prefix tracker for one session.

    Sending a sequence makes every prefix of it reusable, so a later request
    that branches off an earlier one still gets credit for the shared
    prefix. Single-writer per session: sessions never share an instance.
    """

    def __init__(self, length_fn: Callable[[str], int] = default_token_length) -> None:
        self._length_fn = length_fn
        self._seen: set[tuple[Message, ...]] = set()

    def observe(self, messages: Sequence[Message]) -> int:
        """Return cached token count for this sequence, then record it."""
        sequence = tuple((role, text) for role, text in messages)
        cached = 0
        for k in range(len(sequence), 0, -1):
            if sequence[:k] in self._seen:
                cached = sum(self._length_fn(text) for _, text in sequence[:k])
                break
        for k in range(1, len(sequence) + 1):
            self._seen.add(sequence[:k])
        return cached


def cached_prefix_tokens(session: PromptPrefixCache, messages: Sequence[Message]) -> int:
    """Token length of the longest message prefix already sent in `session`."""
    return session.observe(messages)


@dataclass
class StageUsage:
    input_tokens: int = 0
    cached_input_tokens: int = 0
    output_tokens: int = 0
    calls: int = 0

    def to_record(self) -> dict[str, int]:
        return {
            "input_tokens": self.input_tokens,
            "cached_input_tokens": self.cached_input_tokens,
            "output_tokens": self.output_tokens,
            "calls": self.calls,
        }


class UsageLedger:
    """Per-stage token accumulators; single writer per session."""

    def __init__(self) -> None:
        self._stages: dict[str, StageUsage] = {}

    def record(self, stage: Stage | str, response: ChatResponse) -> None:
        key = stage.value if isinstance(stage, Stage) else str(stage)
        usage = self._stages.setdefault(key, StageUsage())
        usage.input_tokens += response.input_tokens
        usage.cached_input_tokens += response.cached_input_tokens
        usage.output_tokens += response.output_tokens
        usage.calls += 1

    def stage_usage(self, stage: Stage | str) -> StageUsage:
        key = stage.value if isinstance(stage, Stage) else str(stage)
        return self._stages.get(key, StageUsage())

    def totals(self) -> tuple[int, int, int, int]:
        """(input, cached, output, grand_total) summed over stages."""
        input_total = sum(u.input_tokens for u in self._stages.values())
        cached_total = sum(u.cached_input_tokens for u in self._stages.values())
        output_total = sum(u.output_tokens for u in self._stages.values())
        return input_total, cached_total, output_total, input_total + output_total

    def merge(self, other: "UsageLedger") -> None:
        """Fold another session's ledger into this one (run-end aggregation)."""
        for key, usage in other._stages.items():
            mine = self._stages.setdefault(key, StageUsage())
            mine.input_tokens += usage.input_tokens
            mine.cached_input_tokens += usage.cached_input_tokens
            mine.output_tokens += usage.output_tokens
            mine.calls += usage.calls

    def to_record(self) -> dict[str, Any]:
        stages = {key: self._stages[key].to_record() for key in sorted(self._stages)}
        input_total, cached_total, output_total, grand = self.totals()
        return {
            "stages": stages,
            "totals": {
                "input_tokens": input_total,
                "cached_input_tokens": cached_total,
                "output_tokens": output_total,
                "grand_total": grand,
            },
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "UsageLedger":
        ledger = cls()
        for key, usage in rec.get("stages", {}).items():
            ledger._stages[key] = StageUsage(
                input_tokens=int(usage.get("input_tokens", 0)),
                cached_input_tokens=int(usage.get("cached_input_tokens", 0)),
                output_tokens=int(usage.get("output_tokens", 0)),
                calls=int(usage.get("calls", 0)),
            )
        return ledger


def ledger_totals(ledger: UsageLedger) -> tuple[int, int, int, int]:
    """(input, cached, output, grand_total); grand_total = input + output."""
    return ledger.totals()


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 1 << 64


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    value = _FNV_OFFSET
    for byte in data:
        value ^= byte
        value = (value * _FNV_PRIME) % _U64
    return value


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """Unit-norm dense vector; ``zero_flag`` marks an all-zero pre-image."""

    values: np.ndarray
    zero_flag: bool = False

    def __post_init__(self) -> None:
        array = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", array)
        if self.zero_flag:
            if np.any(array):
                raise ValueError("zero_flag vector must be all-zero")
        else:
            norm = float(np.linalg.norm(array))
            if abs(norm - 1.0) > 1e-9:
                raise ValueError(f"embedding norm {norm} not within 1e-9 of 1")

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    def to_list(self) -> list[float]:
        return [float(v) for v in self.values]

    @classmethod
    def from_list(cls, values: Iterable[float]) -> "EmbeddingVector":
        array = np.asarray(list(values), dtype=np.float64)
        return cls(values=array, zero_flag=not np.any(array))


def hash_embed(text: str, dimension: int = DEFAULT_EMBED_DIMENSION) -> EmbeddingVector:
    """Deterministic signed feature-hashing embedding.

    Lowercase whitespace tokens are hashed with 64-bit FNV-1a; each token
    adds +-1 (sign from the hash's top bit) at index ``hash % dimension``.
    The result is L2-normalized; empty input yields a zero vector with
    ``zero_flag`` set.
    """
    if dimension < 8:
        raise ValueError("dimension must be at least 8")
    accum = np.zeros(dimension, dtype=np.float64)
    tokens = text.lower().split()
    for token in tokens:
        digest = fnv1a_64(token.encode("utf-8"))
        index = digest % dimension
        sign = 1.0 if (digest >> 63) == 0 else -1.0
        accum[index] += sign
    norm = float(np.linalg.norm(accum))
    if norm == 0.0:
        return EmbeddingVector(values=np.zeros(dimension), zero_flag=True)
    return EmbeddingVector(values=accum / norm, zero_flag=False)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity; zero-flagged vectors are orthogonal to everything."""
    if a.zero_flag or b.zero_flag:
        return 0.0
    return float(np.dot(a.values, b.values))


EMBEDDER_ID = "hash_embed/fnv1a64/v1"


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


class ChatProvider(ABC):
    """Chat-completion provider; safe for concurrent in-flight requests."""

    def complete(self, request: ChatRequest) -> ChatResponse:
        if request.stage in _ZERO_TEMPERATURE_STAGES and request.temperature != 0:
            raise ContractError(
                f"{request.stage.value} requests require temperature 0, "
                f"got {request.temperature}"
            )
        return self._complete(request)

    @abstractmethod
    def _complete(self, request: ChatRequest) -> ChatResponse: ...


def complete(provider: ChatProvider, request: ChatRequest) -> ChatResponse:
    """Send one chat request through a configured provider."""
    return provider.complete(request)


class _SessionCacheMixin:
    """Per-session prompt prefix caches for offline providers."""

    def __init__(self, length_fn: Callable[[str], int] = default_token_length) -> None:
        self._length_fn = length_fn
        self._session_caches: dict[str, PromptPrefixCache] = {}
        self._cache_lock = threading.Lock()

    def _session_cache(self, session_id: str) -> PromptPrefixCache:
        with self._cache_lock:
            cache = self._session_caches.get(session_id)
            if cache is None:
                cache = PromptPrefixCache(self._length_fn)
                self._session_caches[session_id] = cache
            return cache

    def _computed_usage(self, request: ChatRequest, text: str) -> tuple[int, int, int]:
        input_tokens = sum(self._length_fn(t) for _, t in request.messages)
        cached = self._session_cache(request.session_id).observe(request.messages)
        return input_tokens, min(cached, input_tokens), self._length_fn(text)


class ScriptedProvider(_SessionCacheMixin, ChatProvider):
    """Fixture playback keyed by request digest; byte-identical across runs.

    Fixture files are JSONL with one record per entry:
    ``{digest, stage, text, input_tokens, cached_input_tokens, output_tokens}``.
    Usage fields are optional; absent usage is computed with the default
    length function plus the per-session prefix cache.
    """

    def __init__(
        self,
        fixture: str | Path | Iterable[dict[str, Any]],
        length_fn: Callable[[str], int] = default_token_length,
    ) -> None:
        _SessionCacheMixin.__init__(self, length_fn)
        if isinstance(fixture, (str, Path)):
            records = load_fixture(fixture)
        else:
            records = list(fixture)
        self._entries: dict[str, dict[str, Any]] = {}
        for rec in records:
            self._entries[rec["digest"]] = rec

    def __len__(self) -> int:
        return len(self._entries)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        digest = request.digest
        entry = self._entries.get(digest)
        if entry is None:
            raise ScriptMissError(digest, request.stage.value)
        text = entry["text"]
        if "input_tokens" in entry:
            # Fixture usage wins; still observe the cache so later prefix
            # queries in this session see the sequence.
            self._session_cache(request.session_id).observe(request.messages)
            return ChatResponse(
                text=text,
                input_tokens=int(entry["input_tokens"]),
                cached_input_tokens=int(entry.get("cached_input_tokens", 0)),
                output_tokens=int(entry.get("output_tokens", 0)),
            )
        input_tokens, cached, output_tokens = self._computed_usage(request, text)
        return ChatResponse(
            text=text,
            input_tokens=input_tokens,
            cached_input_tokens=cached,
            output_tokens=output_tokens,
        )


class CallbackProvider(_SessionCacheMixin, ChatProvider):
    """Deterministic provider answering through a response function.

    The function maps a ChatRequest to response text; usage is computed with
    the default length function and the per-session prefix cache. Used to
    author scripted fixtures and to drive simulations.
    """

    def __init__(
        self,
        respond: Callable[[ChatRequest], str],
        length_fn: Callable[[str], int] = default_token_length,
    ) -> None:
        _SessionCacheMixin.__init__(self, length_fn)
        self._respond = respond

    def _complete(self, request: ChatRequest) -> ChatResponse:
        text = self._respond(request)
        input_tokens, cached, output_tokens = self._computed_usage(request, text)
        return ChatResponse(
            text=text,
            input_tokens=input_tokens,
            cached_input_tokens=cached,
            output_tokens=output_tokens,
        )


class RecordingProvider(ChatProvider):
    """Delegates to an inner provider and captures traffic as fixture records."""

    def __init__(self, inner: ChatProvider) -> None:
        self._inner = inner
        self._records: dict[str, dict[str, Any]] = {}
        self._lock = threading.Lock()

    def _complete(self, request: ChatRequest) -> ChatResponse:
        response = self._inner.complete(request)
        record = {
            "digest": request.digest,
            "stage": request.stage.value,
            "text": response.text,
            "input_tokens": response.input_tokens,
            "cached_input_tokens": response.cached_input_tokens,
            "output_tokens": response.output_tokens,
        }
        with self._lock:
            existing = self._records.get(record["digest"])
            if existing is not None and existing["text"] != record["text"]:
                raise ContractError(
                    f"conflicting responses recorded for digest {record['digest']}"
                )
            self._records.setdefault(record["digest"], record)
        return response

    @property
    def records(self) -> list[dict[str, Any]]:
        return list(self._records.values())

    def save(self, path: str | Path) -> None:
        save_fixture(self.records, path)


def load_fixture(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def save_fixture(records: Iterable[dict[str, Any]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for rec in sorted(records, key=lambda r: r["digest"]):
            handle.write(canonical_json(rec) + "\n")


class LiveProvider(ChatProvider):
    """HTTP chat-completion client.

    POSTs ``{model, messages, temperature, max_tokens}`` to the configured
    URL with a bearer token read from the DVAR_API_KEY environment variable.
    Transport failures are retried at most ``max_retries`` times with the
    configured backoff; contract violations are never retried.
    """

    def __init__(
        self,
        url: str,
        model: str,
        *,
        timeout: float = 120.0,
        max_retries: int = 2,
        backoff_seconds: float = 0.5,
        api_key_env: str = API_KEY_ENV,
        fallback_api_key: str | None = None,
    ) -> None:
        self.url = url
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.api_key_env = api_key_env
        self.fallback_api_key = fallback_api_key

    def _render_messages(self, request: ChatRequest) -> list[dict[str, str]]:
        rendered = [{"role": role, "content": text} for role, text in request.messages]
        if request.attachments:
            listing = ", ".join(
                f"{ref.path} (t={ref.timestamp:.3f}s)" for ref in request.attachments
            )
            rendered.append({"role": "user", "content": f"[attached frames: {listing}]"})
        return rendered

    def _complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        # environment always overrides any configured key
        api_key = os.environ.get(self.api_key_env) or self.fallback_api_key
        if not api_key:
            raise ContractError(
                f"environment variable {self.api_key_env} is not set"
            )
        body = {
            "model": self.model,
            "messages": self._render_messages(request),
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {
            "Authorization": f"Bearer {api_key}",
            "Content-Type": "application/json",
        }
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_seconds * (2 ** (attempt - 1)))
            try:
                reply = requests.post(
                    self.url, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("transport failure (attempt %d): %s", attempt + 1, exc)
                continue
            if reply.status_code >= 500:
                last_error = TransportError(
                    f"server error {reply.status_code} from {self.url}"
                )
                logger.warning("server error %d (attempt %d)", reply.status_code, attempt + 1)
                continue
            if reply.status_code != 200:
                raise TransportError(
                    f"request failed with status {reply.status_code}: {reply.text[:200]}"
                )
            return self._parse_reply(reply.json())
        raise TransportError(f"transport failed after retries: {last_error}")

    @staticmethod
    def _parse_reply(payload: dict[str, Any]) -> ChatResponse:
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed provider response: {exc}") from exc
        usage = payload.get("usage", {}) or {}
        input_tokens = int(usage.get("prompt_tokens", 0))
        output_tokens = int(usage.get("completion_tokens", 0))
        details = usage.get("prompt_tokens_details", {}) or {}
        cached = int(details.get("cached_tokens", 0))
        return ChatResponse(
            text=text,
            input_tokens=input_tokens,
            cached_input_tokens=min(cached, input_tokens),
            output_tokens=output_tokens,
        )


class LedgeredProvider(ChatProvider):
    """Wraps a provider, recording every response into a usage ledger."""

    def __init__(self, inner: ChatProvider, ledger: UsageLedger) -> None:
        self._inner = inner
        self.ledger = ledger

    def _complete(self, request: ChatRequest) -> ChatResponse:
        response = self._inner.complete(request)
        self.ledger.record(request.stage, response)
        return response
