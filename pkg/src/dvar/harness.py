"""End-to-end pipeline runner: manifests, detection, metrics, run reports.

A benchmark run maps every manifest entry through the four-stage pipeline,
honoring the ablation toggles, and writes a report directory: one
deterministic VerdictRecord per entry, an errors file for entries that
failed (failures never abort a batch), and a summary with ACC/F1 plus a
per-stage token table. Entries run concurrently up to a configured limit;
each entry owns its session, ledger and prefix cache, and cross-session
aggregation happens only when the report is written.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .adjudication import CompressionDetail, adjudicate
from .arbiter import ArbiterMode, ArbitrationResult, llm_arbitrate, reference_aggregate
from .backend import ChatProvider, LedgeredProvider, UsageLedger
from .debate import DebateConfig, DebateRecord, run_debate
from .domain import (
    DvarError,
    EvidenceSet,
    Label,
    SceneObservation,
    Trace,
    Verdict,
    canonical_json,
)
from .evidence import (
    SourceError,
    discover_traces,
    extract_clip,
    load_clip_from_dir,
    observe_scene,
)
from .knowledge import KBError, KBIndex, RetrievalResult

logger = logging.getLogger(__name__)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class ManifestEntry:
    """One benchmark item: a source plus its ground-truth label."""

    id: str
    source: str
    label: Label
    generator: str = "camera"

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", Label(self.label))

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "source": self.source,
            "label": self.label.value,
            "generator": self.generator,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "ManifestEntry":
        return cls(
            id=rec["id"],
            source=rec["source"],
            label=Label(rec["label"]),
            generator=rec.get("generator", "camera"),
        )


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            entry = ManifestEntry.from_record(json.loads(line))
            if entry.id in seen:
                raise ValueError(f"duplicate manifest id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    return entries


def save_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for entry in entries:
            handle.write(canonical_json(entry.to_record()) + "\n")


_SECRET_FIELDS = ("api_key",)


@dataclass(frozen=True)
class RunConfig:
    """Every pipeline knob, with the benchmark defaults baked in."""

    fps: float = 5.0
    max_rounds: int = 2
    dead_band: int = 0
    arbiter_mode: str = "strict"
    enable_debate: bool = True
    enable_cost: bool = True
    enable_kb: bool = True
    k_pos: int = 3
    k_neg: int = 3
    include_unverified: bool = False
    max_traces: int = 8
    max_attachments: int = 64
    parse_retries: int = 1
    temperature_evidence: float = 0.0
    temperature_debate: float = 0.0
    max_output_tokens: int = 1024
    length_mode: str = "whitespace"
    parallelism: int = 1
    seed: int = 0
    kb_path: str = ""
    provider_kind: str = "scripted"
    provider_fixture: str = ""
    provider_url: str = ""
    provider_model: str = ""
    provider_timeout: float = 120.0
    provider_max_retries: int = 2
    provider_backoff_seconds: float = 0.5
    api_key: str = ""
    extractor_command: str = ""

    def __post_init__(self) -> None:
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.dead_band < 0:
            raise ValueError("dead_band must be non-negative")
        ArbiterMode(self.arbiter_mode)
        if self.length_mode not in ("whitespace", "provider"):
            raise ValueError(f"unknown length_mode {self.length_mode!r}")
        if self.provider_kind not in ("scripted", "live"):
            raise ValueError(f"unknown provider_kind {self.provider_kind!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        if self.k_pos < 0 or self.k_neg < 0:
            raise ValueError("k_pos and k_neg must be non-negative")
        if self.max_traces < 1:
            raise ValueError("max_traces must be at least 1")
        if self.max_attachments < 1:
            raise ValueError("max_attachments must be at least 1")
        if self.parse_retries < 0:
            raise ValueError("parse_retries must be non-negative")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def to_record(self, include_secrets: bool = False) -> dict[str, Any]:
        rec = {f.name: getattr(self, f.name) for f in fields(self)}
        if not include_secrets:
            for name in _SECRET_FIELDS:
                rec.pop(name)
        return rec

    def digest(self) -> str:
        """Config digest over the non-secret fields."""
        return hashlib.sha256(
            canonical_json(self.to_record()).encode("utf-8")
        ).hexdigest()

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(rec) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**rec)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Load a TOML config; relative KB/fixture paths resolve beside it."""
        path = Path(path)
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
        config = cls.from_record(data)
        base = path.parent
        resolved = {}
        for name in ("kb_path", "provider_fixture"):
            value = getattr(config, name)
            if value and not Path(value).is_absolute():
                resolved[name] = str((base / value).resolve())
        return replace(config, **resolved) if resolved else config

    def debate_config(self) -> DebateConfig:
        return DebateConfig(
            max_rounds=self.max_rounds,
            parse_retries=self.parse_retries,
            temperature=self.temperature_debate,
            max_output_tokens=self.max_output_tokens,
        )


@dataclass(frozen=True)
class VerdictRecord:
    """Everything one detection produced, serialized deterministically."""

    entry_id: str
    verdict: Verdict
    arbiter_flags: tuple[str, ...]
    scene: SceneObservation | None
    traces: tuple[Trace, ...]
    debates: tuple[DebateRecord, ...]
    evidence: EvidenceSet
    compressions: tuple[CompressionDetail, ...]
    usage: dict[str, Any] = field(default_factory=dict)
    wall_time_ms: float = 0.0
    config_digest: str = ""
    kb_version: str = ""

    def to_record(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "verdict": self.verdict.to_record(),
            "arbiter_flags": list(self.arbiter_flags),
            "scene": self.scene.to_record() if self.scene is not None else None,
            "traces": [t.to_record() for t in self.traces],
            "debates": [d.to_record() for d in self.debates],
            "evidence": self.evidence.to_record(),
            "compressions": [c.to_record() for c in self.compressions],
            "usage": self.usage,
            "wall_time_ms": self.wall_time_ms,
            "config_digest": self.config_digest,
            "kb_version": self.kb_version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "VerdictRecord":
        return cls(
            entry_id=rec["entry_id"],
            verdict=Verdict.from_record(rec["verdict"]),
            arbiter_flags=tuple(rec.get("arbiter_flags", ())),
            scene=(
                SceneObservation.from_record(rec["scene"])
                if rec.get("scene") is not None
                else None
            ),
            traces=tuple(Trace.from_record(t) for t in rec["traces"]),
            debates=tuple(DebateRecord.from_record(d) for d in rec["debates"]),
            evidence=EvidenceSet.from_record(rec["evidence"]),
            compressions=tuple(
                CompressionDetail.from_record(c) for c in rec.get("compressions", ())
            ),
            usage=rec.get("usage", {}),
            wall_time_ms=float(rec.get("wall_time_ms", 0.0)),
            config_digest=rec.get("config_digest", ""),
            kb_version=rec.get("kb_version", ""),
        )


def load_source(entry: ManifestEntry, config: RunConfig):
    source = Path(entry.source)
    if source.is_dir():
        return load_clip_from_dir(source, video_id=entry.id)
    if source.is_file():
        if not config.extractor_command:
            raise SourceError(
                f"source {source} is a video file but no extractor_command is configured"
            )
        workdir = tempfile.mkdtemp(prefix=f"dvar-frames-{entry.id}-")
        return extract_clip(
            source, config.fps, config.extractor_command, workdir, video_id=entry.id
        )
    raise SourceError(f"source {source} does not exist")


def detect_one(
    entry: ManifestEntry,
    config: RunConfig,
    provider: ChatProvider,
    kb: KBIndex,
    *,
    timer: Callable[[], float] = time.perf_counter,
) -> VerdictRecord:
    """Run evidence, debate, adjudication and arbitration for one entry.

    A discovery outcome of zero traces short-circuits to the empty-evidence
    verdict (real, 0.5) without further provider calls.
    """
    if not kb.frozen:
        raise KBError("knowledge base must be frozen before a detection run")
    start = timer()
    ledger = UsageLedger()
    session = LedgeredProvider(provider, ledger)
    clip = load_source(entry, config)
    kb_for_stage = kb if config.enable_kb else None

    scene = observe_scene(
        clip,
        session,
        session_id=entry.id,
        temperature=config.temperature_evidence,
        max_output_tokens=config.max_output_tokens,
        parse_retries=config.parse_retries,
    )
    traces = discover_traces(
        clip,
        scene,
        kb_for_stage,
        session,
        session_id=entry.id,
        k_pos=config.k_pos,
        k_neg=config.k_neg,
        include_unverified=config.include_unverified,
        max_traces=config.max_traces,
        max_attachments=config.max_attachments,
        temperature=config.temperature_evidence,
        max_output_tokens=config.max_output_tokens,
        parse_retries=config.parse_retries,
    )

    debates: list[DebateRecord] = []
    compressions: list[CompressionDetail] = []
    if traces:
        kb_results: dict[str, RetrievalResult] = {}
        debate_config = config.debate_config()
        for trace in traces:
            if config.enable_kb:
                kb_result = kb.retrieve(
                    trace.description,
                    scene.summary,
                    config.k_pos,
                    config.k_neg,
                    include_unverified=config.include_unverified,
                )
            else:
                kb_result = RetrievalResult.empty()
            kb_results[trace.trace_id] = kb_result
            debates.append(
                run_debate(
                    trace,
                    kb_result,
                    debate_config,
                    session,
                    session_id=entry.id,
                    rounds_enabled=config.enable_debate,
                )
            )
        evidence, compressions = adjudicate(
            debates,
            kb_results,
            session,
            session_id=entry.id,
            enable_cost=config.enable_cost,
            length_mode=config.length_mode,
        )
        arbitration = llm_arbitrate(
            evidence,
            debates,
            clip.key_frame,
            session,
            config.arbiter_mode,
            dead_band=config.dead_band,
            session_id=entry.id,
            parse_retries=config.parse_retries,
        )
    else:
        evidence = EvidenceSet()
        arbitration = ArbitrationResult(
            verdict=reference_aggregate(evidence, config.dead_band)
        )

    wall_time_ms = (timer() - start) * 1000.0
    return VerdictRecord(
        entry_id=entry.id,
        verdict=arbitration.verdict,
        arbiter_flags=arbitration.flags,
        scene=scene,
        traces=tuple(traces),
        debates=tuple(debates),
        evidence=evidence,
        compressions=tuple(compressions),
        usage=ledger.to_record(),
        wall_time_ms=wall_time_ms,
        config_digest=config.digest(),
        kb_version=kb.version,
    )


def compute_metrics(
    predictions: Sequence[Label | str], labels: Sequence[Label | str]
) -> tuple[float, float]:
    """(accuracy, F1) with fake as the positive class.

    Degenerate F1 cases: a run with no fake predictions and no fake labels
    (TP = FP = FN = 0) scores 1.0; otherwise zero-denominator precision or
    recall terms count as 0 and F1 = 0 when both vanish.
    """
    if len(predictions) != len(labels):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions, {len(labels)} labels"
        )
    if not labels:
        raise ValueError("empty input")
    preds = [Label(p) for p in predictions]
    truth = [Label(y) for y in labels]
    tp = sum(1 for p, y in zip(preds, truth) if p is Label.FAKE and y is Label.FAKE)
    fp = sum(1 for p, y in zip(preds, truth) if p is Label.FAKE and y is Label.REAL)
    fn = sum(1 for p, y in zip(preds, truth) if p is Label.REAL and y is Label.FAKE)
    correct = sum(1 for p, y in zip(preds, truth) if p is y)
    accuracy = correct / len(truth)
    if tp == 0 and fp == 0 and fn == 0:
        return accuracy, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return accuracy, 0.0
    return accuracy, 2 * precision * recall / (precision + recall)


def stratified_subset(
    entries: Sequence[ManifestEntry], fraction: float, seed: int
) -> list[ManifestEntry]:
    """Per-(generator, label) cell sampling preserving class distribution.

    Each cell keeps max(1, round(fraction * cell_size)) entries, chosen by a
    seeded shuffle; identical inputs reproduce identical subsets.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if not entries:
        raise ValueError("empty manifest")
    cells: dict[tuple[str, str], list[ManifestEntry]] = {}
    for entry in entries:
        cells.setdefault((entry.generator, entry.label.value), []).append(entry)
    rng = random.Random(seed)
    subset: list[ManifestEntry] = []
    for key in sorted(cells):
        cell = sorted(cells[key], key=lambda e: e.id)
        rng.shuffle(cell)
        keep = max(1, round(fraction * len(cell)))
        subset.extend(cell[:keep])
    return subset


def run_benchmark(
    entries: Sequence[ManifestEntry],
    config: RunConfig,
    provider: ChatProvider,
    kb: KBIndex,
    out_dir: str | Path,
    *,
    timer: Callable[[], float] = time.perf_counter,
) -> Path:
    """Detect every entry and write the run report directory.

    Layout: ``summary.json`` (metrics, token table, config digest, KB
    version), ``records/<id>.json`` per entry, ``errors.jsonl`` for entries
    that failed (excluded from metrics, counted in the summary).
    """
    if not entries:
        raise ValueError("empty manifest")
    out = Path(out_dir)
    records_dir = out / "records"
    records_dir.mkdir(parents=True, exist_ok=True)

    results: dict[str, VerdictRecord] = {}
    errors: dict[str, str] = {}

    def work(entry: ManifestEntry) -> VerdictRecord:
        return detect_one(entry, config, provider, kb, timer=timer)

    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        futures = {pool.submit(work, entry): entry for entry in entries}
        for future in as_completed(futures):
            entry = futures[future]
            try:
                results[entry.id] = future.result()
            except Exception as exc:
                logger.error("entry %s failed: %s", entry.id, exc)
                errors[entry.id] = f"{type(exc).__name__}: {exc}"

    # Single consumer writes the report in deterministic order.
    merged = UsageLedger()
    for entry_id in sorted(results):
        record = results[entry_id]
        (records_dir / f"{entry_id}.json").write_text(record.to_json(), encoding="utf-8")
        merged.merge(UsageLedger.from_record(record.usage))
    with open(out / "errors.jsonl", "w", encoding="utf-8") as handle:
        for entry_id in sorted(errors):
            handle.write(canonical_json({"id": entry_id, "error": errors[entry_id]}) + "\n")

    evaluated = [e for e in entries if e.id in results]
    metrics: dict[str, Any] = {
        "total_entries": len(entries),
        "evaluated": len(evaluated),
        "excluded": len(errors),
    }
    if evaluated:
        accuracy, f1 = compute_metrics(
            [results[e.id].verdict.label for e in evaluated],
            [e.label for e in evaluated],
        )
        metrics["accuracy"] = accuracy
        metrics["f1"] = f1
    summary = {
        "metrics": metrics,
        "label_counts": {
            "real": sum(1 for e in entries if e.label is Label.REAL),
            "fake": sum(1 for e in entries if e.label is Label.FAKE),
        },
        "token_table": merged.to_record(),
        "config_digest": config.digest(),
        "kb_version": kb.version,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return out


_STAGE_ORDER = ("evidence", "debate", "compress", "arbiter", "diagnose")


def render_report(run_dir: str | Path) -> str:
    """Re-render a run directory's summary as a plain-text table."""
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.is_file():
        raise DvarError(f"{run_dir} does not contain summary.json")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    metrics = summary["metrics"]
    lines = [f"run report: {run_dir}"]
    lines.append(
        "entries: {evaluated} evaluated / {total_entries} total "
        "({excluded} excluded)".format(**metrics)
    )
    if "accuracy" in metrics:
        lines.append(f"accuracy: {metrics['accuracy']:.4f}  f1: {metrics['f1']:.4f}")
    table = summary["token_table"]
    lines.append("")
    lines.append(f"{'stage':<10} {'calls':>7} {'input':>10} {'cached':>10} {'output':>10}")
    stages = table.get("stages", {})
    ordered = [s for s in _STAGE_ORDER if s in stages] + sorted(
        s for s in stages if s not in _STAGE_ORDER
    )
    for stage in ordered:
        row = stages[stage]
        lines.append(
            f"{stage:<10} {row['calls']:>7} {row['input_tokens']:>10} "
            f"{row['cached_input_tokens']:>10} {row['output_tokens']:>10}"
        )
    totals = table["totals"]
    lines.append(
        f"{'total':<10} {'':>7} {totals['input_tokens']:>10} "
        f"{totals['cached_input_tokens']:>10} {totals['output_tokens']:>10}"
    )
    lines.append(f"grand total tokens: {totals['grand_total']}")
    lines.append("")
    lines.append(f"config digest: {summary['config_digest']}")
    lines.append(f"kb version: {summary['kb_version']}")
    return "\n".join(lines)
