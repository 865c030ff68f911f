"""Shared domain types for the detection pipeline plus the pure signal algebra.

Every value here is a frozen dataclass: immutable after construction and safe
to share across concurrent tasks. The canonical serialized form of each type
is a flat key/value record with snake_case field names, produced by
``to_record`` and restored by ``from_record``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class DvarError(Exception):
    """Base class for engine errors."""


class TraceValidationError(DvarError):
    """A trace violates its invariants against a given clip."""


class TraceCategory(str, Enum):
    TEMPORAL = "temporal"
    PHYSICAL = "physical"
    TEXTURE = "texture"
    LIGHTING = "lighting"
    GEOMETRY = "geometry"
    OTHER = "other"


class Stance(str, Enum):
    NAT = "nat"
    GEN = "gen"


class SignalKind(str, Enum):
    RESOLVED = "resolved"
    UNRESOLVED = "unresolved"


class Label(str, Enum):
    REAL = "real"
    FAKE = "fake"


class DecidedBy(str, Enum):
    REFERENCE_RULE = "reference_rule"
    LLM_ARBITER = "llm_arbiter"


def expected_frame_count(duration_seconds: float, fps: float) -> int:
    """Frame count for a clip: max(1, floor(fps * duration))."""
    return max(1, math.floor(fps * duration_seconds))


@dataclass(frozen=True)
class FrameRef:
    """Opaque reference to one sampled frame: a path plus its timestamp."""

    path: str
    timestamp: float

    def to_record(self) -> dict[str, Any]:
        return {"path": self.path, "timestamp": self.timestamp}

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "FrameRef":
        return cls(path=rec["path"], timestamp=float(rec["timestamp"]))


@dataclass(frozen=True)
class VideoClip:
    """A sampled frame sequence with timestamps and a key-frame index."""

    video_id: str
    duration_seconds: float
    fps: float
    frames: tuple[FrameRef, ...]
    key_frame_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.duration_seconds < 0:
            raise ValueError("duration_seconds must be non-negative")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        expected = expected_frame_count(self.duration_seconds, self.fps)
        if len(self.frames) != expected:
            raise ValueError(
                f"clip {self.video_id!r} has {len(self.frames)} frames, "
                f"expected max(1, floor(fps * duration)) = {expected}"
            )
        prev = -math.inf
        for ref in self.frames:
            if ref.timestamp <= prev:
                raise ValueError("frame timestamps must be strictly increasing")
            if ref.timestamp >= self.duration_seconds:
                raise ValueError(
                    f"frame timestamp {ref.timestamp} not below duration "
                    f"{self.duration_seconds}"
                )
            prev = ref.timestamp
        if not 0 <= self.key_frame_index < len(self.frames):
            raise ValueError(
                f"key_frame_index {self.key_frame_index} outside [0, {len(self.frames)})"
            )

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def key_frame(self) -> FrameRef:
        return self.frames[self.key_frame_index]

    def to_record(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "duration_seconds": self.duration_seconds,
            "fps": self.fps,
            "frames": [f.to_record() for f in self.frames],
            "key_frame_index": self.key_frame_index,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "VideoClip":
        return cls(
            video_id=rec["video_id"],
            duration_seconds=float(rec["duration_seconds"]),
            fps=float(rec["fps"]),
            frames=tuple(FrameRef.from_record(f) for f in rec["frames"]),
            key_frame_index=int(rec["key_frame_index"]),
        )


@dataclass(frozen=True)
class SceneObservation:
    """Structured description of the environment, objects and interactions."""

    summary: str
    environment: str = ""
    objects: tuple[str, ...] = ()
    interactions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "interactions", tuple(self.interactions))
        if not self.summary:
            raise ValueError("scene summary must be nonempty")

    def to_record(self) -> dict[str, Any]:
        return {
            "summary": self.summary,
            "environment": self.environment,
            "objects": list(self.objects),
            "interactions": list(self.interactions),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "SceneObservation":
        return cls(
            summary=rec["summary"],
            environment=rec.get("environment", ""),
            objects=tuple(rec.get("objects", ())),
            interactions=tuple(rec.get("interactions", ())),
        )


@dataclass(frozen=True)
class Trace:
    """One observed anomaly that the debate must explain.

    Construction is permissive; ``validate_trace`` enforces the invariants
    against a concrete clip, because frame-index bounds need the frame count.
    """

    trace_id: str
    description: str
    category: TraceCategory
    frame_indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", TraceCategory(self.category))
        object.__setattr__(
            self, "frame_indices", tuple(int(i) for i in self.frame_indices)
        )

    def to_record(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "description": self.description,
            "category": self.category.value,
            "frame_indices": list(self.frame_indices),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Trace":
        return cls(
            trace_id=rec["trace_id"],
            description=rec["description"],
            category=TraceCategory(rec["category"]),
            frame_indices=tuple(rec.get("frame_indices", ())),
        )


@dataclass(frozen=True)
class Hypothesis:
    """One agent's explanation for a trace, with its auxiliary assumptions."""

    stance: Stance
    statement: str
    assumptions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "stance", Stance(self.stance))
        object.__setattr__(self, "assumptions", tuple(self.assumptions))
        if not self.statement:
            raise ValueError("hypothesis statement must be nonempty")

    def to_record(self) -> dict[str, Any]:
        return {
            "stance": self.stance.value,
            "statement": self.statement,
            "assumptions": list(self.assumptions),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Hypothesis":
        return cls(
            stance=Stance(rec["stance"]),
            statement=rec["statement"],
            assumptions=tuple(rec.get("assumptions", ())),
        )


@dataclass(frozen=True)
class EvidenceSignal:
    """Per-trace outcome: a resolved vote in {-1, +1} or a cost gap in tokens.

    Exactly one of ``resolved_value`` / ``cost_gap`` is present, matching
    ``kind``. Positive cost gaps favor the generative hypothesis (the natural
    explanation is longer).
    """

    trace_id: str
    kind: SignalKind
    resolved_value: int | None = None
    cost_gap: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SignalKind(self.kind))
        if self.kind is SignalKind.RESOLVED:
            if self.resolved_value not in (-1, 1) or self.cost_gap is not None:
                raise ValueError(
                    "resolved signal requires resolved_value in {-1, +1} and no cost_gap"
                )
        else:
            if self.cost_gap is None or self.resolved_value is not None:
                raise ValueError(
                    "unresolved signal requires cost_gap and no resolved_value"
                )

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"trace_id": self.trace_id, "kind": self.kind.value}
        if self.kind is SignalKind.RESOLVED:
            rec["resolved_value"] = self.resolved_value
        else:
            rec["cost_gap"] = self.cost_gap
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "EvidenceSignal":
        return cls(
            trace_id=rec["trace_id"],
            kind=SignalKind(rec["kind"]),
            resolved_value=rec.get("resolved_value"),
            cost_gap=rec.get("cost_gap"),
        )

    def to_json(self) -> str:
        return canonical_json(self.to_record())

    @classmethod
    def from_json(cls, text: str) -> "EvidenceSignal":
        return cls.from_record(json.loads(text))


@dataclass(frozen=True)
class EvidenceSet:
    """The per-video collection of resolved votes and cost gaps."""

    signals: tuple[EvidenceSignal, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "signals", tuple(self.signals))
        ids = [s.trace_id for s in self.signals]
        if len(ids) != len(set(ids)):
            raise ValueError("evidence set trace_ids must be distinct")

    def __len__(self) -> int:
        return len(self.signals)

    @property
    def trace_ids(self) -> tuple[str, ...]:
        return tuple(s.trace_id for s in self.signals)

    def to_record(self) -> dict[str, Any]:
        return {"signals": [s.to_record() for s in self.signals]}

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "EvidenceSet":
        return cls(signals=tuple(EvidenceSignal.from_record(s) for s in rec["signals"]))


@dataclass(frozen=True)
class Verdict:
    """Final label, confidence and supporting evidence for one video."""

    label: Label
    confidence: float
    supporting_trace_ids: tuple[str, ...] = ()
    rationale: str = ""
    decided_by: DecidedBy = DecidedBy.REFERENCE_RULE

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "decided_by", DecidedBy(self.decided_by))
        object.__setattr__(
            self, "supporting_trace_ids", tuple(self.supporting_trace_ids)
        )
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_record(self) -> dict[str, Any]:
        return {
            "label": self.label.value,
            "confidence": self.confidence,
            "supporting_trace_ids": list(self.supporting_trace_ids),
            "rationale": self.rationale,
            "decided_by": self.decided_by.value,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Verdict":
        return cls(
            label=Label(rec["label"]),
            confidence=float(rec["confidence"]),
            supporting_trace_ids=tuple(rec.get("supporting_trace_ids", ())),
            rationale=rec.get("rationale", ""),
            decided_by=DecidedBy(rec.get("decided_by", DecidedBy.REFERENCE_RULE)),
        )


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding: sorted keys, no spaces, UTF-8 passthrough."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def signal_sign(cost_gap: int, dead_band: int = 0) -> int:
    """Sign of a cost gap under a symmetric dead band.

    Returns +1 if the gap exceeds the dead band (favoring the generative
    hypothesis), -1 below the negative dead band, else 0.
    """
    if dead_band < 0:
        raise ValueError("dead_band must be non-negative")
    if cost_gap > dead_band:
        return 1
    if cost_gap < -dead_band:
        return -1
    return 0


def validate_trace(trace: Trace, frame_count: int) -> None:
    """Check Trace invariants against a clip's frame count.

    Raises TraceValidationError naming the offending field or index.
    """
    if frame_count < 1:
        raise ValueError("frame_count must be at least 1")
    if not trace.description.strip():
        raise TraceValidationError(
            f"trace {trace.trace_id!r} has an empty description"
        )
    for index in trace.frame_indices:
        if not 0 <= index < frame_count:
            raise TraceValidationError(
                f"trace {trace.trace_id!r} frame index {index} outside "
                f"[0, {frame_count})"
            )
