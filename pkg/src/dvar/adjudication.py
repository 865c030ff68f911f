"""Stage 3: explanatory-cost adjudication of unresolved debates.

Resolved debates already carry a categorical vote. Each unresolved debate
is compressed twice under identical constraints (same template, same
retrieved priors, deterministic decoding), once per stance; the cost gap is
the difference of the two description lengths, natural minus generative,
so positive gaps favor the generative hypothesis. Only the relative
ordering of gaps is meaningful downstream: under a shared template and
length function, systematic verbosity biases cancel.

The default length function counts maximal runs of non-whitespace
characters; a provider-token mode uses reported completion tokens instead.
True entropy coding is out of scope by design.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import prompts
from .backend import ChatProvider, ChatRequest, ChatResponse, Stage
from .debate import DebateRecord, OutcomeKind, transcript_text
from .domain import DvarError, EvidenceSet, EvidenceSignal, SignalKind, Stance
from .knowledge import RetrievalResult

logger = logging.getLogger(__name__)

COMPRESS_TEMPLATE_ID = "compress.v1"

_STANCE_NAMES = {Stance.NAT: "natural-mechanism", Stance.GEN: "generative"}


class MissingCompressionError(DvarError):
    """An unresolved trace reached aggregation without its explanations."""

    def __init__(self, trace_id: str) -> None:
        super().__init__(f"no compressed explanations for unresolved trace {trace_id}")
        self.trace_id = trace_id


def partition(
    records: Sequence[DebateRecord],
) -> tuple[list[tuple[DebateRecord, int]], list[DebateRecord]]:
    """Split records into (resolved with votes, unresolved)."""
    resolved: list[tuple[DebateRecord, int]] = []
    unresolved: list[DebateRecord] = []
    for record in records:
        if record.outcome.kind is OutcomeKind.RESOLVED:
            assert record.outcome.value is not None
            resolved.append((record, record.outcome.value))
        else:
            unresolved.append(record)
    return resolved, unresolved


def description_length(text: str) -> int:
    """Token length: count of maximal non-whitespace runs (Unicode split)."""
    return len(text.split())


def cost_gap(len_nat: int, len_gen: int) -> int:
    """Natural-minus-generative length difference; positive favors fake."""
    if len_nat < 0 or len_gen < 0:
        raise ValueError("description lengths must be non-negative")
    return len_nat - len_gen


def compress_messages(
    record: DebateRecord, kb_result: RetrievalResult, stance: Stance
) -> list[tuple[str, str]]:
    system = prompts.render(COMPRESS_TEMPLATE_ID, stance_name=_STANCE_NAMES[stance])
    user = (
        f"Debate trajectory:\n{transcript_text(record)}\n\n"
        f"Retrieved priors:\n{kb_result.guidance_text()}\n\n"
        f"Stance to compress: {stance.value}"
    )
    return [("system", system), ("user", user)]


def compress_with_usage(
    record: DebateRecord,
    kb_result: RetrievalResult,
    stance: Stance | str,
    provider: ChatProvider,
    *,
    session_id: str | None = None,
    max_output_tokens: int = 512,
) -> tuple[str, ChatResponse]:
    """Canonicalize one stance's explanation; returns (text, raw response).

    Deterministic decoding is a hard contract: the request always carries
    temperature 0, and the provider re-checks it.
    """
    if record.outcome.kind is not OutcomeKind.UNRESOLVED:
        raise ValueError(
            f"trace {record.trace_id} is resolved; compression applies only "
            "to unresolved debates"
        )
    stance = Stance(stance)
    request = ChatRequest(
        session_id=session_id or f"compress:{record.trace_id}",
        stage=Stage.COMPRESS,
        messages=tuple(compress_messages(record, kb_result, stance)),
        temperature=0.0,
        max_output_tokens=max_output_tokens,
    )
    response = provider.complete(request)
    return response.text, response


def compress(
    record: DebateRecord,
    kb_result: RetrievalResult,
    stance: Stance | str,
    provider: ChatProvider,
    *,
    session_id: str | None = None,
    max_output_tokens: int = 512,
) -> str:
    """Compressed explanation text for one stance (verbatim)."""
    text, _ = compress_with_usage(
        record,
        kb_result,
        stance,
        provider,
        session_id=session_id,
        max_output_tokens=max_output_tokens,
    )
    return text


def build_evidence_set(
    resolved: Iterable[tuple[str, int]],
    unresolved: Iterable[str],
    explanations: Mapping[str, tuple[str, str]],
    length_fn: Callable[[str], int] = description_length,
) -> EvidenceSet:
    """Assemble one signal per debated trace.

    ``resolved`` pairs trace ids with votes; every id in ``unresolved`` must
    have an (explanation_nat, explanation_gen) pair in ``explanations``.
    """
    signals = [
        EvidenceSignal(trace_id=trace_id, kind=SignalKind.RESOLVED, resolved_value=vote)
        for trace_id, vote in resolved
    ]
    for trace_id in unresolved:
        if trace_id not in explanations:
            raise MissingCompressionError(trace_id)
        text_nat, text_gen = explanations[trace_id]
        gap = cost_gap(length_fn(text_nat), length_fn(text_gen))
        signals.append(
            EvidenceSignal(trace_id=trace_id, kind=SignalKind.UNRESOLVED, cost_gap=gap)
        )
    return EvidenceSet(signals=tuple(signals))


@dataclass(frozen=True)
class CompressionDetail:
    """Per-trace compression audit row for the run report."""

    trace_id: str
    explanation_nat: str
    explanation_gen: str
    length_nat: int
    length_gen: int
    template_id: str = COMPRESS_TEMPLATE_ID

    def to_record(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "explanation_nat": self.explanation_nat,
            "explanation_gen": self.explanation_gen,
            "length_nat": self.length_nat,
            "length_gen": self.length_gen,
            "template_id": self.template_id,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "CompressionDetail":
        return cls(
            trace_id=rec["trace_id"],
            explanation_nat=rec["explanation_nat"],
            explanation_gen=rec["explanation_gen"],
            length_nat=int(rec["length_nat"]),
            length_gen=int(rec["length_gen"]),
            template_id=rec.get("template_id", COMPRESS_TEMPLATE_ID),
        )


def adjudicate(
    records: Sequence[DebateRecord],
    kb_results: Mapping[str, RetrievalResult],
    provider: ChatProvider,
    *,
    session_id: str | None = None,
    enable_cost: bool = True,
    length_mode: str = "whitespace",
    max_output_tokens: int = 512,
) -> tuple[EvidenceSet, list[CompressionDetail]]:
    """Run the full stage: partition, compress, and aggregate signals.

    With ``enable_cost=False`` every unresolved trace contributes a zero
    cost gap (sign 0) and no compression calls are made. ``length_mode``
    is "whitespace" (default) or "provider" (reported completion tokens).
    Both stances of one trace always share the same retrieved priors.
    """
    if length_mode not in ("whitespace", "provider"):
        raise ValueError(f"unknown length_mode {length_mode!r}")
    resolved, unresolved = partition(records)
    signals = [
        EvidenceSignal(
            trace_id=record.trace_id, kind=SignalKind.RESOLVED, resolved_value=vote
        )
        for record, vote in resolved
    ]
    details: list[CompressionDetail] = []
    for record in unresolved:
        if not enable_cost:
            signals.append(
                EvidenceSignal(
                    trace_id=record.trace_id, kind=SignalKind.UNRESOLVED, cost_gap=0
                )
            )
            continue
        kb_result = kb_results.get(record.trace_id, RetrievalResult.empty())
        lengths: dict[Stance, int] = {}
        texts: dict[Stance, str] = {}
        for stance in (Stance.NAT, Stance.GEN):
            text, response = compress_with_usage(
                record,
                kb_result,
                stance,
                provider,
                session_id=session_id,
                max_output_tokens=max_output_tokens,
            )
            texts[stance] = text
            lengths[stance] = (
                response.output_tokens
                if length_mode == "provider"
                else description_length(text)
            )
        gap = cost_gap(lengths[Stance.NAT], lengths[Stance.GEN])
        signals.append(
            EvidenceSignal(
                trace_id=record.trace_id, kind=SignalKind.UNRESOLVED, cost_gap=gap
            )
        )
        details.append(
            CompressionDetail(
                trace_id=record.trace_id,
                explanation_nat=texts[Stance.NAT],
                explanation_gen=texts[Stance.GEN],
                length_nat=lengths[Stance.NAT],
                length_gen=lengths[Stance.GEN],
            )
        )
    return EvidenceSet(signals=tuple(signals)), details
