"""Knowledge-base lifecycle: ingest, retrieve, dedupe, freeze, diagnose.

Entries describe observable phenomena, not generator identities. Positive
guidance names known generative failure modes; negative guidance names
natural cues that previously misled the pipeline. Retrieval is an exact
cosine scan over deterministic hash embeddings.
"""

import json
import tempfile
from pathlib import Path

from dvar.backend import CallbackProvider
from dvar.knowledge import (
    DuplicateEntryError,
    KBIndex,
    load_kb,
    reactive_diagnose,
    save_kb,
)

STAMP = "2026-08-11T00:00:00Z"

kb = KBIndex()
print("== proactive ingestion (curated entries) ==")
rows = [
    ("temporal flicker", "High-frequency luminance oscillation in static regions across frames.", "positive"),
    ("non-rigid deformation", "Silhouettes bend or melt between frames without an acting force.", "positive"),
    ("camera motion blur", "Whole-frame streaking during fast pans is routine in real handheld video.", "negative"),
]
for phenomenon, description, gtype in rows:
    entry_id = kb.add_entry(
        phenomenon=phenomenon, description=description, guidance_type=gtype,
        verified=True, created_at=STAMP,
    )
    print(f"added {gtype:<8} {entry_id}  {phenomenon}")

print("\n== near-duplicates are rejected (cosine >= 0.95, same type) ==")
try:
    kb.add_entry(
        phenomenon="temporal flicker",
        description=rows[0][1] + "  ",
        guidance_type="positive",
    )
except DuplicateEntryError as exc:
    print(f"rejected: {exc}")

print("\n== retrieval: trace description + debate context ==")
result = kb.retrieve(
    "luminance pulsing over a static wall",
    "agents dispute whether the wall should shimmer",
    k_pos=2,
    k_neg=2,
)
for title, hits in (("positive", result.positive_hits), ("negative", result.negative_hits)):
    for entry, similarity in hits:
        print(f"{title:<8} sim={similarity:+.3f}  {entry.phenomenon}")

print("\n== freeze yields a content-digest version; mutation is blocked ==")
version = kb.freeze()
print(f"version: {version[:16]}...")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "kb.jsonl"
    save_kb(kb, path)
    again = load_kb(path)
    print(f"file round-trip keeps the version: {again.version == version}")

print("\n== reactive diagnosis distills misclassifications into candidates ==")
failure_record = {
    "entry_id": "clip-17",
    "verdict": {"label": "fake", "confidence": 0.8},
    "traces": [{"trace_id": "t1", "description": "whole-frame streaking during a whip pan"}],
}
diagnosis = json.dumps(
    {
        "candidates": [
            {
                "phenomenon": "over-attributing camera motion",
                "description": "Fast panning blur was read as synthesis smearing; handheld footage blurs the same way.",
                "guidance_type": "negative",
            }
        ]
    }
)
candidates = reactive_diagnose(
    (failure_record, "real"), CallbackProvider(lambda req: diagnosis), created_at=STAMP
)
for candidate in candidates:
    print(
        f"candidate {candidate.entry_id}: {candidate.phenomenon} "
        f"(provenance={candidate.provenance.value}, verified={candidate.verified})"
    )
print("candidates stay unverified until a human flips them via 'dvar kb verify'")
