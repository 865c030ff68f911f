"""Stage 4: consolidate the evidence set into a final verdict.

The deterministic reference rule is the ground truth of this stage: sum
the resolved votes with the signs of the unresolved cost gaps and side
with the majority, ties and empty sets defaulting to real (presumption of
authenticity, counteracting the pipeline's built-in forgery prior). The
provider-backed arbitration call adds rationale and supporting evidence
under a schema-locked template; in strict mode it can never move the
label, and any disagreement or schema fallback is flagged rather than
silently absorbed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Sequence

from . import prompts
from .backend import ChatProvider, ChatRequest, Message, Stage
from .debate import DebateRecord
from .domain import (
    DecidedBy,
    EvidenceSet,
    FrameRef,
    Label,
    SignalKind,
    Verdict,
    canonical_json,
    signal_sign,
)
from .parsing import ParseError, extract_json_object, repair_message

logger = logging.getLogger(__name__)

ARBITER_TEMPLATE_ID = "arbiter.v1"

FLAG_LABEL_DISAGREEMENT = "label_disagreement"
FLAG_SCHEMA_FALLBACK = "schema_fallback"


class ArbiterMode(str, Enum):
    STRICT = "strict"
    LLM = "llm"


@dataclass(frozen=True)
class ArbitrationResult:
    """Final verdict plus any flags raised while producing it."""

    verdict: Verdict
    flags: tuple[str, ...] = ()

    def to_record(self) -> dict[str, Any]:
        return {"verdict": self.verdict.to_record(), "flags": list(self.flags)}


def _signal_signs(evidence: EvidenceSet, dead_band: int) -> list[tuple[str, int]]:
    signs = []
    for signal in evidence.signals:
        if signal.kind is SignalKind.RESOLVED:
            signs.append((signal.trace_id, signal.resolved_value))
        else:
            signs.append((signal.trace_id, signal_sign(signal.cost_gap, dead_band)))
    return signs


def reference_aggregate(evidence: EvidenceSet, dead_band: int = 0) -> Verdict:
    """Deterministic constrained aggregation over the collected signals.

    score = sum of resolved votes + signs of unresolved gaps; fake iff
    score > 0. Confidence is the fraction of signals whose sign agrees
    with the label (zero-sign signals agree with neither), floored at 0.5
    when the score is zero; an empty set is (real, 0.5).
    """
    signs = _signal_signs(evidence, dead_band)
    score = sum(sign for _, sign in signs)
    label = Label.FAKE if score > 0 else Label.REAL
    label_sign = 1 if label is Label.FAKE else -1
    supporting = sorted(tid for tid, sign in signs if sign == label_sign)
    if not signs:
        confidence = 0.5
        rationale = "no traces required explanation; presumption of authenticity"
    else:
        confidence = sum(1 for _, sign in signs if sign == label_sign) / len(signs)
        if score == 0:
            confidence = max(confidence, 0.5)
        resolved_count = sum(
            1 for s in evidence.signals if s.kind is SignalKind.RESOLVED
        )
        rationale = (
            f"score {score:+d} over {len(signs)} signals "
            f"({resolved_count} resolved, {len(signs) - resolved_count} unresolved); "
            f"{len(supporting)} support {label.value}"
        )
    return Verdict(
        label=label,
        confidence=confidence,
        supporting_trace_ids=tuple(supporting),
        rationale=rationale,
        decided_by=DecidedBy.REFERENCE_RULE,
    )


def arbiter_messages(
    evidence: EvidenceSet,
    records: Sequence[DebateRecord],
    dead_band: int,
) -> list[Message]:
    signal_rows = [s.to_record() for s in evidence.signals]
    debate_rows = [
        {
            "trace_id": r.trace_id,
            "outcome": r.outcome.to_record(),
            "hypothesis_gen": r.hypothesis_gen.statement,
            "hypothesis_nat": r.hypothesis_nat.statement,
            "rounds_used": r.rounds_used,
        }
        for r in records
    ]
    user = (
        f"Trace-level signals:\n{canonical_json(signal_rows)}\n\n"
        f"Dead band for cost gaps: {dead_band}\n\n"
        f"Debate summaries (for interpretability only):\n"
        f"{canonical_json(debate_rows)}\n\n"
        "Consolidate the signals into the final verdict."
    )
    return [("system", prompts.load(ARBITER_TEMPLATE_ID)), ("user", user)]


def _parse_verdict_payload(text: str, valid_trace_ids: set[str]) -> dict[str, Any]:
    obj = extract_json_object(text)
    label = obj.get("label")
    if label not in (Label.REAL.value, Label.FAKE.value):
        raise ParseError(f"label {label!r} not in {{real, fake}}")
    confidence = obj.get("confidence")
    if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
        raise ParseError("field 'confidence' missing or not a number")
    if not 0.0 <= float(confidence) <= 1.0:
        raise ParseError(f"confidence {confidence} outside [0, 1]")
    supporting = obj.get("supporting_trace_ids", [])
    if not isinstance(supporting, list) or not all(isinstance(s, str) for s in supporting):
        raise ParseError("field 'supporting_trace_ids' must be a list of strings")
    unknown = [s for s in supporting if s not in valid_trace_ids]
    if unknown:
        raise ParseError(f"supporting_trace_ids reference unknown traces {unknown}")
    rationale = obj.get("rationale", "")
    if not isinstance(rationale, str):
        raise ParseError("field 'rationale' must be a string")
    return {
        "label": label,
        "confidence": float(confidence),
        "supporting_trace_ids": tuple(supporting),
        "rationale": rationale,
    }


def llm_arbitrate(
    evidence: EvidenceSet,
    records: Sequence[DebateRecord],
    key_frame: FrameRef | None,
    provider: ChatProvider,
    mode: ArbiterMode | str = ArbiterMode.STRICT,
    *,
    dead_band: int = 0,
    session_id: str = "arbiter",
    parse_retries: int = 1,
    max_output_tokens: int = 1024,
) -> ArbitrationResult:
    """Schema-constrained provider arbitration cross-checked by the rule.

    In strict mode the label and confidence always come from the reference
    rule; the provider contributes rationale and supporting evidence, and a
    contradicting label raises a disagreement flag. In llm mode a validated
    provider verdict stands as-is. Schema failure after one retry falls
    back to the reference verdict with a fallback flag.
    """
    mode = ArbiterMode(mode)
    reference = reference_aggregate(evidence, dead_band)
    valid_ids = set(evidence.trace_ids)
    messages = arbiter_messages(evidence, records, dead_band)
    attachments = (key_frame,) if key_frame is not None else ()

    payload: dict[str, Any] | None = None
    attempt = list(messages)
    for _ in range(parse_retries + 1):
        request = ChatRequest(
            session_id=session_id,
            stage=Stage.ARBITER,
            messages=tuple(attempt),
            temperature=0.0,
            max_output_tokens=max_output_tokens,
            attachments=attachments,
        )
        text = provider.complete(request).text
        try:
            payload = _parse_verdict_payload(text, valid_ids)
            break
        except ParseError as exc:
            logger.warning("arbiter schema failure: %s", exc)
            attempt = attempt + [repair_message(exc)]

    if payload is None:
        return ArbitrationResult(verdict=reference, flags=(FLAG_SCHEMA_FALLBACK,))

    flags: tuple[str, ...] = ()
    if mode is ArbiterMode.STRICT:
        if payload["label"] != reference.label.value:
            logger.warning(
                "arbiter label %r contradicts reference %r; reference kept",
                payload["label"],
                reference.label.value,
            )
            flags = (FLAG_LABEL_DISAGREEMENT,)
        verdict = Verdict(
            label=reference.label,
            confidence=reference.confidence,
            supporting_trace_ids=payload["supporting_trace_ids"],
            rationale=payload["rationale"],
            decided_by=DecidedBy.LLM_ARBITER,
        )
    else:
        verdict = Verdict(
            label=Label(payload["label"]),
            confidence=payload["confidence"],
            supporting_trace_ids=payload["supporting_trace_ids"],
            rationale=payload["rationale"],
            decided_by=DecidedBy.LLM_ARBITER,
        )
    return ArbitrationResult(verdict=verdict, flags=flags)
