"""A complete offline benchmark run: corpus, fixture, replay, report.

Builds a two-entry corpus on disk, answers every pipeline request from an
inline scenario, records the traffic into a scripted fixture, replays the
fixture through the benchmark harness, and renders the run report. The
whole flow is what `dvar bench` does, minus the CLI.
"""

import json
import tempfile
from pathlib import Path

from dvar.backend import CallbackProvider, RecordingProvider, ScriptedProvider, Stage
from dvar.harness import ManifestEntry, RunConfig, render_report, run_benchmark
from dvar.knowledge import KBIndex

PNG = bytes.fromhex(
    "89504e470d0a1a0a0000000d49484452000000010000000108060000001f15c489"
    "0000000d49444154789c63fcffff3f0005fe02fea73581840000000049454e44ae426082"
)

# clip-a is real: its one anomaly ends with the generative advocate conceding.
# clip-b is fake: both anomalies survive debate and the natural explanations
# come out longer (positive cost gaps).
SCENARIO = {
    "clip-a": {"label": "real", "traces": [("a window reflection doubles briefly", "gha-concedes", 0, 0)]},
    "clip-b": {
        "label": "fake",
        "traces": [
            ("wall texture crawls between frames", "unresolved", 24, 13),
            ("shadow direction drifts mid-shot", "unresolved", 19, 11),
        ],
    },
}


def respond(request):
    entry = SCENARIO[request.session_id]
    prompt = next(
        t for r, t in reversed(request.messages)
        if r == "user" and "failed validation" not in t
    )
    if request.stage is Stage.EVIDENCE:
        if "Report the anomalies." in prompt:
            return json.dumps(
                {
                    "traces": [
                        {"description": f"{request.session_id}: {d}", "category": "texture",
                         "frame_indices": [0]}
                        for d, *_ in entry["traces"]
                    ]
                }
            )
        return json.dumps(
            {"summary": f"{request.session_id}: interior scene with stable lighting",
             "environment": "indoor", "objects": ["wall"], "interactions": []}
        )
    if request.stage is Stage.DEBATE:
        agent = "GHA" if "generative-hypothesis advocate" in request.messages[0][1] else "NMA"
        first_user = next(t for r, t in request.messages if r == "user")
        index = int(first_user.split("Trace t", 1)[1].split(None, 1)[0].rstrip(":(")) - 1
        _, behavior, _, _ = entry["traces"][index]
        if "State your hypothesis." in prompt:
            return json.dumps({"statement": f"{agent} explains trace {index + 1} of {request.session_id}",
                               "assumptions": []})
        if "The opposing hypothesis reads:" in prompt:
            return json.dumps({"status": "maintain", "argument": f"{agent} position",
                               "challenge": f"{agent} challenge", "rebuttal": "", "assumptions": []})
        if agent == "GHA" and behavior == "gha-concedes":
            return json.dumps({"status": "concede", "argument": "", "challenge": "",
                               "rebuttal": "", "assumptions": []})
        return json.dumps({"status": "maintain", "argument": f"{agent} holds",
                           "challenge": "", "rebuttal": f"{agent} rebuts", "assumptions": []})
    if request.stage is Stage.COMPRESS:
        first_user = prompt
        index = int(first_user.split("Trace t", 1)[1].split(None, 1)[0].rstrip(":(")) - 1
        _, _, len_nat, len_gen = entry["traces"][index]
        stance = prompt.rsplit("Stance to compress:", 1)[1].strip()
        return " ".join(["w"] * (len_nat if stance == "nat" else len_gen))
    # arbiter: aggregate the signs of the signals included in the request
    signals = json.loads(prompt.split("Trace-level signals:\n", 1)[1].split("\n\n", 1)[0])
    score = sum(
        row["resolved_value"] if row["kind"] == "resolved"
        else (1 if row["cost_gap"] > 0 else -1 if row["cost_gap"] < 0 else 0)
        for row in signals
    )
    label = "fake" if score > 0 else "real"
    return json.dumps({"label": label, "confidence": 0.9, "supporting_trace_ids": [],
                       "rationale": f"signals favor {label}"})


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    entries = []
    for clip_id, spec in SCENARIO.items():
        source = root / clip_id
        source.mkdir()
        for k in range(3):
            (source / f"frame_{k:06d}.png").write_bytes(PNG)
        (source / "meta.json").write_text(json.dumps({"duration_seconds": 1.0, "fps": 3.0}))
        entries.append(ManifestEntry(id=clip_id, source=str(source), label=spec["label"]))

    kb = KBIndex()
    kb.add_entry(
        phenomenon="texture crawl",
        description="Static surfaces re-render with shifting micro-detail between frames.",
        guidance_type="positive",
        verified=True,
        created_at="2026-08-11T00:00:00Z",
    )
    kb.freeze()

    config = RunConfig(fps=3.0)

    print("== record the scenario into a scripted fixture ==")
    recorder = RecordingProvider(CallbackProvider(respond))
    run_benchmark(entries, config, recorder, kb, root / "recorded-run")
    fixture = root / "fixture.jsonl"
    recorder.save(fixture)
    print(f"fixture rows: {len(recorder.records)}")

    print("\n== replay the fixture through the harness ==")
    out = run_benchmark(entries, config, ScriptedProvider(fixture), kb, root / "replayed-run")
    for entry in entries:
        record = json.loads((out / "records" / f"{entry.id}.json").read_text())
        print(
            f"{entry.id}: truth={entry.label.value:<5} "
            f"verdict={record['verdict']['label']:<5} "
            f"confidence={record['verdict']['confidence']:.2f}"
        )

    print("\n== rendered report ==")
    print(render_report(out))
