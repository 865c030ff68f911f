"""Command-line entry point.

Subcommands: ``detect`` (single-source verdict), ``bench`` (full manifest
run), ``kb`` (knowledge-base lifecycle) and ``report`` (re-render a run
directory). Machine output goes to stdout; all human-readable logging goes
to stderr so verdict lines and reports stay pipeable. Exit codes: 0
success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .backend import ChatProvider, LiveProvider, ScriptedProvider
from .domain import DvarError, canonical_json
from .harness import (
    ManifestEntry,
    RunConfig,
    detect_one,
    load_manifest,
    render_report,
    run_benchmark,
    stratified_subset,
)
from .knowledge import GuidanceType, KBIndex, Provenance, load_kb, save_kb

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvar",
        description="Training-free video authenticity detection through "
        "adversarial reasoning.",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging on stderr"
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    detect = sub.add_parser(
        "detect", help="run the pipeline on one video source and print the verdict"
    )
    detect.add_argument("source", help="frame directory or video file")
    detect.add_argument("--config", help="TOML run configuration file")
    detect.add_argument("--out", help="directory for the full verdict record")

    bench = sub.add_parser("bench", help="run a manifest and write a report directory")
    bench.add_argument("manifest", help="JSONL manifest of benchmark entries")
    bench.add_argument("--config", help="TOML run configuration file")
    bench.add_argument("--out", default="report", help="report directory (default: report)")
    bench.add_argument(
        "--subset-fraction",
        type=float,
        help="stratified per-(generator,label) subset fraction in (0, 1]",
    )
    bench.add_argument("--seed", type=int, help="subset seed (overrides config seed)")

    kb = sub.add_parser("kb", help="knowledge-base lifecycle actions")
    kb.add_argument(
        "action",
        choices=["build", "add", "dedupe", "verify", "freeze", "stats"],
        help="lifecycle action",
    )
    kb.add_argument("kb_file", help="knowledge-base JSONL file")
    kb.add_argument("--from", dest="from_file", help="candidate entries JSONL (build)")
    kb.add_argument("--phenomenon", help="entry phenomenon (add)")
    kb.add_argument("--description", help="entry description (add)")
    kb.add_argument(
        "--type",
        dest="guidance_type",
        choices=[g.value for g in GuidanceType],
        help="guidance type (add)",
    )
    kb.add_argument(
        "--provenance",
        choices=[p.value for p in Provenance],
        default=Provenance.PROACTIVE.value,
        help="entry provenance (add; default proactive)",
    )
    kb.add_argument(
        "--verified", action="store_true", help="mark the entry verified (add)"
    )
    kb.add_argument("--entry", help="entry id (verify)")

    report = sub.add_parser("report", help="re-render summary tables for a run directory")
    report.add_argument("run_dir", help="directory written by bench")

    return parser


def _load_config(path: str | None) -> RunConfig:
    if not path:
        return RunConfig()
    config_path = Path(path)
    if not config_path.is_file():
        raise UsageError(f"config file {config_path} does not exist")
    try:
        return RunConfig.from_file(config_path)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {config_path}: {exc}") from exc


def _build_provider(config: RunConfig) -> ChatProvider:
    if config.provider_kind == "scripted":
        if not config.provider_fixture:
            raise UsageError("scripted provider requires provider_fixture in the config")
        fixture = Path(config.provider_fixture)
        if not fixture.is_file():
            raise UsageError(f"fixture file {fixture} does not exist")
        return ScriptedProvider(fixture)
    if not config.provider_url or not config.provider_model:
        raise UsageError("live provider requires provider_url and provider_model")
    return LiveProvider(
        url=config.provider_url,
        model=config.provider_model,
        timeout=config.provider_timeout,
        max_retries=config.provider_max_retries,
        backoff_seconds=config.provider_backoff_seconds,
        fallback_api_key=config.api_key or None,
    )


def _load_kb_for_run(config: RunConfig) -> KBIndex:
    if config.kb_path:
        kb_path = Path(config.kb_path)
        if not kb_path.is_file():
            raise UsageError(f"KB file {kb_path} does not exist")
        kb = load_kb(kb_path)
    else:
        kb = KBIndex()
    if not kb.frozen:
        kb.freeze()
        logger.info("KB was not frozen; froze it for this run (version %s)", kb.version)
    return kb


def _cmd_detect(args: argparse.Namespace) -> int:
    source = Path(args.source)
    if not source.exists():
        raise UsageError(f"source {source} does not exist")
    config = _load_config(args.config)
    provider = _build_provider(config)
    kb = _load_kb_for_run(config)
    entry = ManifestEntry(id=source.stem or "video", source=str(source), label="real")
    record = detect_one(entry, config, provider, kb, timer=time.perf_counter)
    verdict = record.verdict
    line = canonical_json(
        {
            "label": verdict.label.value,
            "confidence": verdict.confidence,
            "supporting_trace_ids": list(verdict.supporting_trace_ids),
            "rationale": verdict.rationale,
        }
    )
    print(line)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{entry.id}.json").write_text(record.to_json(), encoding="utf-8")
        logger.info("verdict record written to %s", out_dir / f"{entry.id}.json")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        raise UsageError(f"manifest {manifest_path} does not exist")
    config = _load_config(args.config)
    try:
        entries = load_manifest(manifest_path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid manifest {manifest_path}: {exc}") from exc
    if args.subset_fraction is not None:
        seed = args.seed if args.seed is not None else config.seed
        try:
            entries = stratified_subset(entries, args.subset_fraction, seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        logger.info("stratified subset: %d entries (seed %d)", len(entries), seed)
    provider = _build_provider(config)
    kb = _load_kb_for_run(config)
    out = run_benchmark(entries, config, provider, kb, args.out)
    print(render_report(out))
    return EXIT_OK


def _candidate_rows(path: Path):
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield json.loads(line)


def _cmd_kb(args: argparse.Namespace) -> int:
    kb_file = Path(args.kb_file)
    action = args.action

    if action == "build":
        if not args.from_file:
            raise UsageError("kb build requires --from <candidates.jsonl>")
        source = Path(args.from_file)
        if not source.is_file():
            raise UsageError(f"candidate file {source} does not exist")
        kb = KBIndex()
        added = rejected = 0
        for row in _candidate_rows(source):
            try:
                kb.add_entry(
                    phenomenon=row["phenomenon"],
                    description=row["description"],
                    guidance_type=row["guidance_type"],
                    provenance=row.get("provenance", Provenance.PROACTIVE.value),
                    verified=bool(row.get("verified", True)),
                    created_at=row.get("created_at"),
                )
                added += 1
            except DvarError as exc:
                rejected += 1
                logger.warning("candidate rejected: %s", exc)
        save_kb(kb, kb_file)
        print(canonical_json({"added": added, "rejected": rejected, "version": kb.version}))
        return EXIT_OK

    if not kb_file.is_file():
        raise UsageError(f"KB file {kb_file} does not exist")
    kb = load_kb(kb_file)

    if action == "add":
        missing = [
            flag
            for flag, value in (
                ("--phenomenon", args.phenomenon),
                ("--description", args.description),
                ("--type", args.guidance_type),
            )
            if not value
        ]
        if missing:
            raise UsageError(f"kb add requires {', '.join(missing)}")
        entry_id = kb.add_entry(
            phenomenon=args.phenomenon,
            description=args.description,
            guidance_type=args.guidance_type,
            provenance=args.provenance,
            verified=args.verified,
        )
        save_kb(kb, kb_file)
        print(canonical_json({"entry_id": entry_id, "version": kb.version}))
    elif action == "dedupe":
        # rebuild in entry order; add_entry re-runs the duplicate check
        rebuilt = KBIndex(dimension=kb.dimension, embedder_id=kb.embedder_id)
        dropped = 0
        for entry in kb.entries:
            try:
                rebuilt.add_entry(
                    phenomenon=entry.phenomenon,
                    description=entry.description,
                    guidance_type=entry.guidance_type,
                    provenance=entry.provenance,
                    verified=entry.verified,
                    created_at=entry.created_at,
                )
            except DvarError:
                dropped += 1
        if kb.frozen:
            rebuilt.freeze()
        save_kb(rebuilt, kb_file)
        print(canonical_json({"kept": len(rebuilt), "dropped": dropped}))
    elif action == "verify":
        if not args.entry:
            raise UsageError("kb verify requires --entry <id>")
        kb.verify_entry(args.entry)
        save_kb(kb, kb_file)
        print(canonical_json({"entry_id": args.entry, "verified": True}))
    elif action == "freeze":
        version = kb.freeze()
        save_kb(kb, kb_file)
        print(canonical_json({"frozen": True, "version": version}))
    else:  # stats
        entries = kb.entries
        stats = {
            "entries": len(entries),
            "positive": sum(1 for e in entries if e.guidance_type.value == "positive"),
            "negative": sum(1 for e in entries if e.guidance_type.value == "negative"),
            "proactive": sum(1 for e in entries if e.provenance.value == "proactive"),
            "reactive": sum(1 for e in entries if e.provenance.value == "reactive"),
            "verified": sum(1 for e in entries if e.verified),
            "frozen": kb.frozen,
            "version": kb.version,
        }
        print(canonical_json(stats))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory {run_dir} does not exist")
    print(render_report(run_dir))
    return EXIT_OK


_COMMANDS = {
    "detect": _cmd_detect,
    "bench": _cmd_bench,
    "kb": _cmd_kb,
    "report": _cmd_report,
}


def dispatch(argv: list[str]) -> int:
    """Parse and run one invocation, mapping failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage/help to the right stream
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DvarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # unexpected runtime failure, still exit 1
        logger.exception("unhandled failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
