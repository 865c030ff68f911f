"""Explanatory-cost adjudication and the reference aggregation rule.

Unresolved debates are settled by parsimony: both stances are compressed
under the same template with deterministic decoding, and the cost gap is
the natural explanation's token length minus the generative one's. A
positive gap means the natural story needed more words, favoring the
generative hypothesis. The final rule sums resolved votes with gap signs;
ties and empty evidence default to real.
"""

import json

from dvar.adjudication import adjudicate, cost_gap, description_length
from dvar.arbiter import reference_aggregate
from dvar.backend import CallbackProvider
from dvar.debate import DebateOutcome, DebateRecord
from dvar.domain import Hypothesis, Stance
from dvar.knowledge import RetrievalResult

NAT_TEXT = (
    "a gusting crosswind, a rolling-shutter readout, motion blur from a long "
    "exposure, and a low bitrate encode must all line up to produce the crawl"
)
GEN_TEXT = "the texture model resamples detail each frame, so static surfaces crawl"

print("== description length is whitespace token count ==")
print(f"natural explanation: {description_length(NAT_TEXT)} tokens")
print(f"generative explanation: {description_length(GEN_TEXT)} tokens")
gap = cost_gap(description_length(NAT_TEXT), description_length(GEN_TEXT))
print(f"cost gap (nat - gen) = {gap:+d}  -> positive favors the generative stance")


def canned_compressor(request):
    stance = request.messages[-1][1].rsplit("Stance to compress:", 1)[1].strip()
    return NAT_TEXT if stance == "nat" else GEN_TEXT


unresolved = DebateRecord(
    trace_id="t1",
    turns=(),
    outcome=DebateOutcome.unresolved(),
    hypothesis_gen=Hypothesis(stance=Stance.GEN, statement="texture resampling artifact"),
    hypothesis_nat=Hypothesis(stance=Stance.NAT, statement="stacked capture effects"),
    rounds_used=2,
    kb_context_digest="demo",
)
resolved = DebateRecord(
    trace_id="t2",
    turns=(),
    outcome=DebateOutcome.resolved(-1),
    hypothesis_gen=Hypothesis(stance=Stance.GEN, statement="decoder ghosting"),
    hypothesis_nat=Hypothesis(stance=Stance.NAT, statement="handheld shake"),
    rounds_used=1,
    kb_context_digest="demo",
)

print("\n== full adjudication over one resolved + one unresolved trace ==")
evidence, details = adjudicate(
    [resolved, unresolved],
    {"t1": RetrievalResult.empty()},
    CallbackProvider(canned_compressor),
)
for signal in evidence.signals:
    print(json.dumps(signal.to_record()))
print(f"compression audit rows: {[d.trace_id for d in details]}")

print("\n== the reference rule consolidates the signals ==")
verdict = reference_aggregate(evidence)
print(json.dumps(verdict.to_record(), indent=2))
print("(the -1 vote and the +{} gap cancel into a tie, which defaults to real)".format(gap))
