"""Stage 4: the reference aggregation rule and provider arbitration."""

from __future__ import annotations

import itertools
import json
import random

import pytest

from dvar.arbiter import (
    FLAG_LABEL_DISAGREEMENT,
    FLAG_SCHEMA_FALLBACK,
    ArbiterMode,
    llm_arbitrate,
    reference_aggregate,
)
from dvar.backend import CallbackProvider
from dvar.debate import DebateOutcome, DebateRecord
from dvar.domain import (
    DecidedBy,
    EvidenceSet,
    EvidenceSignal,
    Hypothesis,
    Label,
    SignalKind,
    Stance,
)
from oracles import reference_verdict_oracle

SIGNAL_KINDS = [("r", -1), ("r", +1), ("u", -2), ("u", 0), ("u", +2)]


def make_evidence(spec):
    """spec: list of ("r", vote) / ("u", gap); trace ids auto-assigned."""
    signals = []
    for i, (kind, value) in enumerate(spec):
        trace_id = f"t{i + 1}"
        if kind == "r":
            signals.append(
                EvidenceSignal(trace_id=trace_id, kind=SignalKind.RESOLVED, resolved_value=value)
            )
        else:
            signals.append(
                EvidenceSignal(trace_id=trace_id, kind=SignalKind.UNRESOLVED, cost_gap=value)
            )
    return EvidenceSet(signals=tuple(signals))


def oracle_spec(spec):
    return [
        (kind, f"t{i + 1}", value) for i, (kind, value) in enumerate(spec)
    ]


class TestReferenceAggregate:
    def test_empty_defaults_real(self):
        verdict = reference_aggregate(EvidenceSet())
        assert verdict.label is Label.REAL
        assert verdict.confidence == 0.5
        assert verdict.supporting_trace_ids == ()
        assert verdict.decided_by is DecidedBy.REFERENCE_RULE

    def test_unanimous_fake(self):
        verdict = reference_aggregate(make_evidence([("r", 1), ("r", 1), ("u", 12)]))
        assert verdict.label is Label.FAKE
        assert verdict.confidence == 1.0
        assert verdict.supporting_trace_ids == ("t1", "t2", "t3")

    def test_tie_resolves_real(self):
        verdict = reference_aggregate(make_evidence([("r", -1), ("u", 3)]))
        assert verdict.label is Label.REAL
        assert verdict.confidence == 0.5
        assert verdict.supporting_trace_ids == ("t1",)

    def test_dead_band_mutes_small_gaps(self):
        evidence = make_evidence([("u", 3), ("u", -2)])
        verdict = reference_aggregate(evidence, dead_band=5)
        assert verdict.label is Label.REAL  # both gaps inside the band
        assert verdict.supporting_trace_ids == ()

    def test_exhaustive_vs_oracle_up_to_four_signals(self):
        for size in range(0, 5):
            for combo in itertools.product(SIGNAL_KINDS, repeat=size):
                verdict = reference_aggregate(make_evidence(list(combo)))
                label, confidence, supporting = reference_verdict_oracle(
                    oracle_spec(list(combo))
                )
                assert verdict.label.value == label, combo
                assert verdict.confidence == pytest.approx(confidence), combo
                assert list(verdict.supporting_trace_ids) == supporting, combo

    def test_permutation_invariance(self):
        rng = random.Random(5)
        for _ in range(300):
            spec = [rng.choice(SIGNAL_KINDS) for _ in range(rng.randint(0, 6))]
            base = make_evidence(spec)
            verdict = reference_aggregate(base)
            indices = list(range(len(spec)))
            rng.shuffle(indices)
            shuffled = EvidenceSet(signals=tuple(base.signals[i] for i in indices))
            assert reference_aggregate(shuffled) == verdict

    def test_monotonicity(self):
        rng = random.Random(6)
        for _ in range(300):
            spec = [rng.choice(SIGNAL_KINDS) for _ in range(rng.randint(0, 5))]
            base = reference_aggregate(make_evidence(spec))
            plus = reference_aggregate(make_evidence(spec + [("r", 1)]))
            minus = reference_aggregate(make_evidence(spec + [("r", -1)]))
            if base.label is Label.FAKE:
                assert plus.label is Label.FAKE
            if base.label is Label.REAL:
                assert minus.label is Label.REAL


def record_for(trace_id):
    return DebateRecord(
        trace_id=trace_id,
        turns=(),
        outcome=DebateOutcome.unresolved(),
        hypothesis_gen=Hypothesis(stance=Stance.GEN, statement="g"),
        hypothesis_nat=Hypothesis(stance=Stance.NAT, statement="n"),
        rounds_used=2,
        kb_context_digest="d",
    )


def provider_payload(label, confidence=0.9, supporting=("t1",), rationale="clear signals"):
    return json.dumps(
        {
            "label": label,
            "confidence": confidence,
            "supporting_trace_ids": list(supporting),
            "rationale": rationale,
        }
    )


class TestLlmArbitrate:
    EVIDENCE = staticmethod(lambda: make_evidence([("r", 1), ("u", 12)]))

    def test_agreeing_response(self):
        provider = CallbackProvider(lambda req: provider_payload("fake"))
        result = llm_arbitrate(
            self.EVIDENCE(), [record_for("t1"), record_for("t2")], None, provider
        )
        assert result.verdict.label is Label.FAKE
        assert result.verdict.decided_by is DecidedBy.LLM_ARBITER
        assert result.verdict.rationale == "clear signals"
        assert result.flags == ()

    def test_strict_mode_keeps_reference_label(self):
        provider = CallbackProvider(lambda req: provider_payload("real"))
        result = llm_arbitrate(self.EVIDENCE(), [], None, provider, ArbiterMode.STRICT)
        assert result.verdict.label is Label.FAKE  # reference wins
        assert FLAG_LABEL_DISAGREEMENT in result.flags
        reference = reference_aggregate(self.EVIDENCE())
        assert result.verdict.confidence == reference.confidence

    def test_llm_mode_provider_label_stands(self):
        provider = CallbackProvider(lambda req: provider_payload("real", 0.66))
        result = llm_arbitrate(self.EVIDENCE(), [], None, provider, "llm")
        assert result.verdict.label is Label.REAL
        assert result.verdict.confidence == 0.66
        assert result.flags == ()

    def test_malformed_twice_falls_back(self):
        provider = CallbackProvider(lambda req: "not a verdict")
        result = llm_arbitrate(self.EVIDENCE(), [], None, provider)
        reference = reference_aggregate(self.EVIDENCE())
        assert result.verdict == reference
        assert result.flags == (FLAG_SCHEMA_FALLBACK,)

    def test_unknown_supporting_ids_rejected(self):
        provider = CallbackProvider(
            lambda req: provider_payload("fake", supporting=("zz",))
        )
        result = llm_arbitrate(self.EVIDENCE(), [], None, provider)
        assert result.flags == (FLAG_SCHEMA_FALLBACK,)

    def test_retry_can_recover(self):
        calls = {"n": 0}

        def respond(req):
            calls["n"] += 1
            return "garbage" if calls["n"] == 1 else provider_payload("fake")

        result = llm_arbitrate(self.EVIDENCE(), [], None, CallbackProvider(respond))
        assert calls["n"] == 2
        assert result.flags == ()

    def test_key_frame_attached_and_stage(self):
        from dvar.domain import FrameRef

        seen = {}

        def respond(req):
            seen["stage"] = req.stage.value
            seen["temp"] = req.temperature
            seen["attachments"] = req.attachments
            return provider_payload("fake")

        frame = FrameRef(path="f.png", timestamp=0.5)
        llm_arbitrate(self.EVIDENCE(), [], frame, CallbackProvider(respond))
        assert seen["stage"] == "arbiter"
        assert seen["temp"] == 0.0
        assert seen["attachments"] == (frame,)

    def test_confidence_out_of_range_is_schema_failure(self):
        provider = CallbackProvider(lambda req: provider_payload("fake", confidence=1.2))
        result = llm_arbitrate(self.EVIDENCE(), [], None, provider)
        assert result.flags == (FLAG_SCHEMA_FALLBACK,)
