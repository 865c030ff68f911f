"""Structured knowledge base with dense retrieval and freeze semantics.

Entries describe observable phenomena rather than generator identities:
positive-guidance entries are known generative failure modes, negative-
guidance entries are misleading natural cues that previously caused wrong
calls. Ingestion is dual-stream: curated entries loaded from a KB file
(proactive) and candidates distilled from misclassification diagnoses
(reactive, never auto-verified). Retrieval is an exact cosine scan over
hash embeddings; at the KB scales this engine targets (<= 10^4 entries) a
linear scan beats any index in both simplicity and determinism.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable

from .backend import (
    DEFAULT_EMBED_DIMENSION,
    EMBEDDER_ID,
    ChatProvider,
    ChatRequest,
    EmbeddingVector,
    Stage,
    cosine_similarity,
    hash_embed,
)
from . import prompts
from .domain import DvarError, Label, canonical_json
from .parsing import ParseError, call_with_schema, extract_json_object, require_str

logger = logging.getLogger(__name__)

DUPLICATE_COSINE_THRESHOLD = 0.95
DESCRIPTION_MIN_CHARS = 20
DESCRIPTION_MAX_CHARS = 2000


class KBError(DvarError):
    """Base class for knowledge-base errors."""


class FrozenKBError(KBError):
    """Mutation attempted on a frozen knowledge base."""


class AlreadyFrozenError(KBError):
    """Freeze called twice."""


class ConsistencyError(KBError):
    """A candidate entry failed a consistency check."""


class DuplicateEntryError(KBError):
    """A candidate duplicates an existing entry of the same guidance type."""

    def __init__(self, existing_id: str, similarity: float) -> None:
        super().__init__(
            f"duplicate of existing entry {existing_id} "
            f"(cosine {similarity:.4f} >= {DUPLICATE_COSINE_THRESHOLD})"
        )
        self.existing_id = existing_id
        self.similarity = similarity


class GuidanceType(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class Provenance(str, Enum):
    PROACTIVE = "proactive"
    REACTIVE = "reactive"


def now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def entry_text(phenomenon: str, description: str) -> str:
    return f"{phenomenon}. {description}"


def entry_id_for(guidance_type: str, phenomenon: str, description: str) -> str:
    payload = f"{guidance_type}\n{phenomenon}\n{description}"
    return "kb-" + hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class KBEntry:
    """One (phenomenon, description, type) tuple with embedding and provenance."""

    entry_id: str
    phenomenon: str
    description: str
    guidance_type: GuidanceType
    provenance: Provenance
    verified: bool
    embedding: EmbeddingVector
    created_at: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "guidance_type", GuidanceType(self.guidance_type))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if not self.phenomenon.strip():
            raise ValueError("phenomenon must be nonempty")
        if not DESCRIPTION_MIN_CHARS <= len(self.description) <= DESCRIPTION_MAX_CHARS:
            raise ValueError(
                f"description length {len(self.description)} outside "
                f"[{DESCRIPTION_MIN_CHARS}, {DESCRIPTION_MAX_CHARS}]"
            )

    def to_record(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "phenomenon": self.phenomenon,
            "description": self.description,
            "guidance_type": self.guidance_type.value,
            "provenance": self.provenance.value,
            "verified": self.verified,
            "embedding": self.embedding.to_list(),
            "created_at": self.created_at,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "KBEntry":
        return cls(
            entry_id=rec["entry_id"],
            phenomenon=rec["phenomenon"],
            description=rec["description"],
            guidance_type=GuidanceType(rec["guidance_type"]),
            provenance=Provenance(rec["provenance"]),
            verified=bool(rec["verified"]),
            embedding=EmbeddingVector.from_list(rec["embedding"]),
            created_at=rec["created_at"],
        )


@dataclass(frozen=True)
class RetrievalResult:
    """Top-k positive and negative entries for one query."""

    positive_hits: tuple[tuple[KBEntry, float], ...]
    negative_hits: tuple[tuple[KBEntry, float], ...]
    query_digest: str

    @classmethod
    def empty(cls, query_digest: str = "") -> "RetrievalResult":
        return cls(positive_hits=(), negative_hits=(), query_digest=query_digest)

    def context_digest(self) -> str:
        payload = canonical_json(
            {
                "query_digest": self.query_digest,
                "positive": [[e.entry_id, sim] for e, sim in self.positive_hits],
                "negative": [[e.entry_id, sim] for e, sim in self.negative_hits],
            }
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def guidance_text(self) -> str:
        """Stable textual rendering for prompt injection."""
        lines: list[str] = []
        for title, hits in (
            ("Known generative failure modes", self.positive_hits),
            ("Known misleading natural cues", self.negative_hits),
        ):
            lines.append(f"{title}:")
            if not hits:
                lines.append("- (none retrieved)")
            for entry, _ in hits:
                lines.append(f"- {entry.phenomenon}: {entry.description}")
        return "\n".join(lines)


class KBIndex:
    """Knowledge entries plus freeze/version control.

    Before freeze, mutations are serialized through an internal lock; after
    freeze the index is immutable and safe for unlimited concurrent readers.
    """

    def __init__(
        self,
        dimension: int = DEFAULT_EMBED_DIMENSION,
        embedder_id: str = EMBEDDER_ID,
        embed_fn: Callable[[str, int], EmbeddingVector] = hash_embed,
    ) -> None:
        self.dimension = dimension
        self.embedder_id = embedder_id
        self._embed_fn = embed_fn
        self._entries: list[KBEntry] = []
        self._frozen = False
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[KBEntry, ...]:
        return tuple(self._entries)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def version(self) -> str:
        """Content digest, invariant under insertion order."""
        lines = sorted(canonical_json(e.to_record()) for e in self._entries)
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()

    def embed(self, text: str) -> EmbeddingVector:
        return self._embed_fn(text, self.dimension)

    def get(self, entry_id: str) -> KBEntry | None:
        for entry in self._entries:
            if entry.entry_id == entry_id:
                return entry
        return None

    def add_entry(
        self,
        phenomenon: str,
        description: str,
        guidance_type: GuidanceType | str,
        provenance: Provenance | str = Provenance.PROACTIVE,
        verified: bool = False,
        created_at: str | None = None,
    ) -> str:
        """Consistency-check, dedup, embed and append a candidate entry.

        Returns the fresh entry_id; raises FrozenKBError, ConsistencyError
        or DuplicateEntryError.
        """
        with self._lock:
            if self._frozen:
                raise FrozenKBError("knowledge base is frozen")
            try:
                gtype = GuidanceType(guidance_type)
            except ValueError:
                raise ConsistencyError(f"invalid guidance_type {guidance_type!r}") from None
            try:
                prov = Provenance(provenance)
            except ValueError:
                raise ConsistencyError(f"invalid provenance {provenance!r}") from None
            if not phenomenon.strip():
                raise ConsistencyError("phenomenon must be nonempty")
            if len(description) < DESCRIPTION_MIN_CHARS:
                raise ConsistencyError(
                    f"description too short ({len(description)} < {DESCRIPTION_MIN_CHARS} chars)"
                )
            if len(description) > DESCRIPTION_MAX_CHARS:
                raise ConsistencyError(
                    f"description too long ({len(description)} > {DESCRIPTION_MAX_CHARS} chars)"
                )
            embedding = self.embed(entry_text(phenomenon, description))
            for existing in self._entries:
                if existing.guidance_type is not gtype:
                    continue
                similarity = cosine_similarity(embedding, existing.embedding)
                if similarity >= DUPLICATE_COSINE_THRESHOLD:
                    raise DuplicateEntryError(existing.entry_id, similarity)
            entry = KBEntry(
                entry_id=entry_id_for(gtype.value, phenomenon, description),
                phenomenon=phenomenon,
                description=description,
                guidance_type=gtype,
                provenance=prov,
                verified=verified,
                embedding=embedding,
                created_at=created_at if created_at is not None else now_iso(),
            )
            self._entries.append(entry)
            return entry.entry_id

    def add_candidate(self, candidate: KBEntry) -> str:
        """Add a pre-built candidate (reactive stream), re-running all checks."""
        return self.add_entry(
            phenomenon=candidate.phenomenon,
            description=candidate.description,
            guidance_type=candidate.guidance_type,
            provenance=candidate.provenance,
            verified=candidate.verified,
            created_at=candidate.created_at,
        )

    def verify_entry(self, entry_id: str) -> None:
        """Mark an entry as manually verified."""
        with self._lock:
            if self._frozen:
                raise FrozenKBError("knowledge base is frozen")
            for i, entry in enumerate(self._entries):
                if entry.entry_id == entry_id:
                    self._entries[i] = replace(entry, verified=True)
                    return
            raise KBError(f"no entry with id {entry_id}")

    def freeze(self) -> str:
        """Mark the index immutable and return its content-digest version."""
        with self._lock:
            if self._frozen:
                raise AlreadyFrozenError("knowledge base is already frozen")
            self._frozen = True
            return self.version

    def retrieve(
        self,
        trace_description: str,
        debate_context: str,
        k_pos: int = 3,
        k_neg: int = 3,
        include_unverified: bool = False,
    ) -> RetrievalResult:
        """Top-k positive and negative entries by cosine similarity.

        The query is the trace description concatenated with the debate
        context. Ordering is similarity descending with entry_id ascending
        tie-breaks. Empty KBs and zero-flag query embeddings return empty
        hit lists.
        """
        if k_pos < 0 or k_neg < 0:
            raise ValueError("k_pos and k_neg must be non-negative")
        query = trace_description + "\n" + debate_context
        query_digest = hashlib.sha256(query.encode("utf-8")).hexdigest()
        query_vec = self.embed(query)
        if query_vec.zero_flag or not self._entries:
            return RetrievalResult.empty(query_digest)
        scored: dict[GuidanceType, list[tuple[KBEntry, float]]] = {
            GuidanceType.POSITIVE: [],
            GuidanceType.NEGATIVE: [],
        }
        for entry in self._entries:
            if not include_unverified and not entry.verified:
                continue
            scored[entry.guidance_type].append(
                (entry, cosine_similarity(query_vec, entry.embedding))
            )
        def top(hits: list[tuple[KBEntry, float]], k: int):
            ordered = sorted(hits, key=lambda pair: (-pair[1], pair[0].entry_id))
            return tuple(ordered[:k])
        return RetrievalResult(
            positive_hits=top(scored[GuidanceType.POSITIVE], k_pos),
            negative_hits=top(scored[GuidanceType.NEGATIVE], k_neg),
            query_digest=query_digest,
        )


def add_entry(kb: KBIndex, **fields: Any) -> str:
    return kb.add_entry(**fields)


def retrieve(
    kb: KBIndex,
    trace_description: str,
    debate_context: str,
    k_pos: int = 3,
    k_neg: int = 3,
    include_unverified: bool = False,
) -> RetrievalResult:
    return kb.retrieve(trace_description, debate_context, k_pos, k_neg, include_unverified)


def freeze(kb: KBIndex) -> str:
    return kb.freeze()


DIAGNOSE_PROMPT_ID = "diagnose.v1"


def _parse_candidates(text: str, created_at: str) -> list[KBEntry]:
    obj = extract_json_object(text)
    raw = obj.get("candidates")
    if not isinstance(raw, list):
        raise ParseError("field 'candidates' missing or not a list")
    candidates: list[KBEntry] = []
    for item in raw:
        if not isinstance(item, dict):
            raise ParseError("candidate entries must be objects")
        phenomenon = require_str(item, "phenomenon", allow_empty=False)
        description = require_str(item, "description", allow_empty=False)
        gtype = item.get("guidance_type", GuidanceType.NEGATIVE.value)
        if gtype not in (GuidanceType.POSITIVE.value, GuidanceType.NEGATIVE.value):
            raise ParseError(f"candidate guidance_type {gtype!r} invalid")
        try:
            candidates.append(
                KBEntry(
                    entry_id=entry_id_for(gtype, phenomenon, description),
                    phenomenon=phenomenon,
                    description=description,
                    guidance_type=GuidanceType(gtype),
                    provenance=Provenance.REACTIVE,
                    verified=False,
                    embedding=hash_embed(entry_text(phenomenon, description)),
                    created_at=created_at,
                )
            )
        except ValueError as exc:
            logger.warning("dropping invalid diagnosis candidate: %s", exc)
    return candidates


def reactive_diagnose(
    failure: tuple[Any, Label | str],
    provider: ChatProvider,
    *,
    session_id: str = "diagnose",
    parse_retries: int = 1,
    created_at: str | None = None,
) -> list[KBEntry]:
    """Distill KB candidates from one misclassified sample.

    ``failure`` pairs a verdict record (anything with ``to_record()`` or a
    plain dict) with the true label. Candidates come back with reactive
    provenance and ``verified = False``; a parse failure after one retry
    yields an empty list with a logged diagnostic rather than an error.
    """
    record, true_label = failure
    true_label = Label(true_label)
    payload = record.to_record() if hasattr(record, "to_record") else dict(record)
    predicted = payload.get("verdict", {}).get("label")
    if predicted == true_label.value:
        raise ValueError("reactive diagnosis requires a misclassified sample")
    stamp = created_at if created_at is not None else now_iso()
    messages = [
        ("system", prompts.load(DIAGNOSE_PROMPT_ID)),
        (
            "user",
            "True label: " + true_label.value + "\nReasoning trace:\n" + canonical_json(payload),
        ),
    ]
    def request_for(msgs: list[tuple[str, str]]) -> ChatRequest:
        return ChatRequest(
            session_id=session_id,
            stage=Stage.DIAGNOSE,
            messages=tuple(msgs),
            temperature=0.0,
        )

    try:
        return call_with_schema(
            send=lambda msgs: provider.complete(request_for(msgs)).text,
            messages=messages,
            parse=lambda text: _parse_candidates(text, stamp),
            retries=parse_retries,
        )
    except ParseError as exc:
        logger.error("reactive diagnosis unparseable after retry: %s", exc)
        return []


# ---------------------------------------------------------------------------
# KB file format: JSONL with a leading metadata line
# ---------------------------------------------------------------------------


def save_kb(kb: KBIndex, path: str | Path) -> None:
    """Write the KB file: metadata line first, then one entry per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": kb.version,
        "frozen": kb.frozen,
        "embedder_id": kb.embedder_id,
        "dimension": kb.dimension,
    }
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(canonical_json(meta) + "\n")
        for entry in kb.entries:
            handle.write(canonical_json(entry.to_record()) + "\n")


def load_kb(path: str | Path) -> KBIndex:
    """Load a KB file, verifying the metadata line and stored version."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line.strip() for line in handle if line.strip()]
    if not lines:
        raise KBError(f"KB file {path} is empty")
    meta = json.loads(lines[0])
    expected_meta_keys = {"version", "frozen", "embedder_id", "dimension"}
    if not expected_meta_keys <= set(meta):
        raise KBError(f"KB file {path} lacks a metadata line")
    if meta["embedder_id"] != EMBEDDER_ID:
        raise ConsistencyError(
            f"KB built with embedder {meta['embedder_id']!r}; "
            f"this engine provides {EMBEDDER_ID!r}"
        )
    kb = KBIndex(dimension=int(meta["dimension"]), embedder_id=meta["embedder_id"])
    for line in lines[1:]:
        entry = KBEntry.from_record(json.loads(line))
        kb._entries.append(entry)
    if kb.version != meta["version"]:
        raise ConsistencyError(
            f"KB file {path} version mismatch: stored {meta['version'][:12]}..., "
            f"recomputed {kb.version[:12]}..."
        )
    if meta["frozen"]:
        kb._frozen = True
    return kb
