"""Training-free video authenticity detection through adversarial reasoning.

The engine runs four stages per video: evidence discovery over sampled
frames, an adversarial debate between a generative-hypothesis agent and a
natural-mechanism agent for each observed anomaly, explanatory-cost
adjudication of unresolved debates, and an arbitrated final verdict. A
frozen knowledge base of generative failure modes and misleading cues
grounds every stage.
"""

from . import (
    adjudication,
    arbiter,
    backend,
    debate,
    domain,
    evidence,
    harness,
    knowledge,
)
from .domain import (
    DecidedBy,
    DvarError,
    EvidenceSet,
    EvidenceSignal,
    FrameRef,
    Hypothesis,
    Label,
    SceneObservation,
    SignalKind,
    Stance,
    Trace,
    TraceCategory,
    TraceValidationError,
    Verdict,
    VideoClip,
    signal_sign,
    validate_trace,
)

__version__ = "0.1.0"

__all__ = [
    "adjudication",
    "arbiter",
    "backend",
    "debate",
    "domain",
    "evidence",
    "harness",
    "knowledge",
    "DecidedBy",
    "DvarError",
    "EvidenceSet",
    "EvidenceSignal",
    "FrameRef",
    "Hypothesis",
    "Label",
    "SceneObservation",
    "SignalKind",
    "Stance",
    "Trace",
    "TraceCategory",
    "TraceValidationError",
    "Verdict",
    "VideoClip",
    "signal_sign",
    "validate_trace",
    "__version__",
]
