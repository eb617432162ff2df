"""Command-line surface: generate, auto-tune, select, transfer, verify, report.

Every run prints its resolved configuration, seeds default to a fixed
constant rather than entropy, and artifacts land under --out. Exit codes:
0 success, 1 validation error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .autoscheduler import SearchBudget, search, tune_model
from .executor import (
    DETERMINISTIC,
    LoweringError,
    MeasureProtocol,
    SearchTimeLedger,
    WALLCLOCK,
    lower,
    verify as verify_plan,
)
from .loopnest import build_fused_kernel, class_to_ops
from .presets import mini_source_model, mini_target_model
from .records import (
    RecordStore,
    load_descriptor,
    load_fixture_library,
    paper_fixtures_dir,
    record_to_dict,
    render_report,
    render_report_data,
    save_descriptor,
)
from .schedule import ScheduleError, apply
from .transfer import (
    DescriptorError,
    select_tuning_model,
    transfer_tune_model,
)

DEFAULT_SEED = 1234


class CliError(ValueError):
    """Validation problem with actionable one-line message."""


def tool_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"schedlift-{__version__}"


def _add_protocol_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--warmup", type=int, default=2, help="warmup runs per measurement")
    p.add_argument("--runs", type=int, default=10, help="timed runs per measurement")
    p.add_argument("--threads", type=int, default=None, help="worker threads for parallel axes")
    p.add_argument(
        "--max-run-ms", type=float, default=None, help="abort a measurement after this budget"
    )
    p.add_argument(
        "--deterministic-cost",
        action="store_true",
        help="replace wall clock with the analytical cost proxy (bit-reproducible)",
    )


def _protocol(args) -> MeasureProtocol:
    return MeasureProtocol(
        warmup_runs=args.warmup,
        timed_runs=args.runs,
        thread_count=args.threads,
        cost_mode=DETERMINISTIC if args.deterministic_cost else WALLCLOCK,
        max_run_ms=args.max_run_ms,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="schedlift",
        description="Auto-schedule small tensor kernels and reuse the schedules "
        "on other kernels of the same class.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write the bundled demo model descriptors")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("autotune", help="auto-schedule every unique kernel of a model")
    p.add_argument("--model", required=True, help="model descriptor JSON")
    p.add_argument("--records", required=True, help="record store JSONL (appended)")
    p.add_argument("--out", required=True, help="output directory for trace and summary")
    p.add_argument("--budget", type=int, default=64, help="candidates per kernel")
    p.add_argument("--population", type=int, default=16)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_protocol_flags(p)

    p = sub.add_parser("select", help="rank tuning sources for a target model")
    p.add_argument("--target", required=True, help="model name in the library, or a path")
    p.add_argument("--library", default=None, help="descriptor directory (default: bundled)")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", default=None, help="optional output directory")

    p = sub.add_parser("transfer", help="transfer-tune a model from tuned records")
    p.add_argument("--target", required=True, help="target model descriptor JSON")
    p.add_argument("--records", required=True, help="record store JSONL")
    p.add_argument("--source", default=None, help="comma-separated source model names")
    p.add_argument("--pool", action="store_true", help="use every record regardless of source")
    p.add_argument("--out", required=True, help="output directory for the report")
    _add_protocol_flags(p)

    p = sub.add_parser("verify", help="check recorded schedules against the oracle")
    p.add_argument("--records", required=True)
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)

    p = sub.add_parser("report", help="re-render a transfer report artifact")
    p.add_argument("--in", dest="input", required=True, help="report JSON path")
    p.add_argument("--format", choices=("md", "csv", "json"), default="md")
    p.add_argument("--out", default=None, help="output directory (default: stdout)")
    return parser


def _echo_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    cfg["command"] = args.command
    cfg["version"] = tool_version()
    print("config: " + json.dumps(cfg, sort_keys=True, default=str))
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args, cfg) -> int:
    out = _outdir(args.out)
    for model in (mini_source_model(), mini_target_model()):
        path = out / f"{model.name}.json"
        save_descriptor(model, path)
        print(f"wrote {path}")
    return 0


def cmd_autotune(args, cfg) -> int:
    model = load_descriptor(args.model)
    out = _outdir(args.out)
    protocol = _protocol(args)
    store = RecordStore(args.records)
    ledger = SearchTimeLedger()

    trace_path = out / f"trace-{model.name}.jsonl"
    summary = {"model": model.name, "records": [], "config": cfg}
    with trace_path.open("w", encoding="utf-8") as trace_fh:
        seen: set[str] = set()
        for index, (spec, _use) in enumerate(model.kernels):
            from .loopnest import kernel_fingerprint

            fp = kernel_fingerprint(spec)
            if fp in seen:
                continue
            seen.add(fp)
            budget = SearchBudget(
                max_candidates=args.budget,
                seed=args.seed + 1000 * index,
                population=min(args.population, args.budget),
            )
            outcome = search(
                spec, budget, protocol, source_model=model.name, ledger=ledger
            )
            for entry in outcome.trace:
                trace_fh.write(
                    json.dumps(
                        {
                            "kernel": spec.name,
                            "schedule": json.loads(entry.schedule_text),
                            "valid": entry.valid,
                            "median_ns": entry.median_ns,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
            store.append(outcome.record)
            summary["records"].append(
                {
                    "kernel": spec.name,
                    "class": outcome.record.kernel_class,
                    "median_ns": outcome.record.cost.median_ns,
                    "baseline_ns": outcome.baseline.median_ns,
                    "fallback": outcome.fallback,
                }
            )
            print(
                f"tuned {spec.name}: {outcome.record.cost.median_ns} ns "
                f"(baseline {outcome.baseline.median_ns} ns, fallback={outcome.fallback})"
            )
    summary["search_time_ns"] = ledger.total_ns()
    (out / f"autotune-{model.name}.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"appended {len(summary['records'])} records to {args.records}")
    return 0


def _load_library(path) -> dict:
    directory = Path(path) if path else paper_fixtures_dir()
    return load_fixture_library(directory)


def cmd_select(args, cfg) -> int:
    library = _load_library(args.library)
    target_path = Path(args.target)
    if target_path.suffix == ".json" and target_path.exists():
        target = load_descriptor(target_path)
    else:
        matches = [m for name, m in library.items() if name.lower() == args.target.lower()]
        if not matches:
            raise CliError(
                f"target {args.target!r} not found in library ({', '.join(sorted(library))})"
            )
        target = matches[0]
    ranked = select_tuning_model(target, list(library.values()), top_k=args.top_k)
    result = {
        "target": target.name,
        "ranking": [
            {
                "rank": i + 1,
                "model": s.candidate,
                "score": s.score,
                "per_class_terms": dict(sorted(s.per_class_terms.items())),
            }
            for i, s in enumerate(ranked)
        ],
        "config": cfg,
    }
    for row in result["ranking"]:
        print(f"{row['rank']}. {row['model']} (score {row['score']:.4f})")
    if args.out:
        out = _outdir(args.out)
        (out / f"select-{target.name}.json").write_text(
            json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def cmd_transfer(args, cfg) -> int:
    if args.pool and args.source:
        raise CliError("--pool and --source are mutually exclusive")
    target = load_descriptor(args.target)
    store = RecordStore(args.records)
    sources = None if args.pool else (
        [s.strip() for s in args.source.split(",")] if args.source else store.sources()
    )
    protocol = _protocol(args)
    report = transfer_tune_model(target, store, sources, protocol)
    out = _outdir(args.out)
    meta = {"version": cfg["version"], "config": json.dumps(cfg, sort_keys=True, default=str)}
    for fmt in ("json", "csv", "md"):
        path = out / f"transfer-{target.name}.{fmt}"
        path.write_text(render_report(report, fmt, meta), encoding="utf-8")
    print(
        f"speedup {report.speedup:.4f}x over untuned; search time "
        f"{report.search_time_ns} ns; report under {out}"
    )
    fallbacks = sum(1 for r in report.per_kernel if r.fallback)
    print(f"{len(report.per_kernel)} kernels, {fallbacks} fell back to the default schedule")
    return 0


def cmd_verify(args, cfg) -> int:
    store = RecordStore(args.records)
    records = store.all_records()
    if not records:
        raise CliError(f"record store {args.records} is empty")
    failures = 0
    for record in records:
        shapes = {
            r: s for r, s in record.kernel_shapes.items() if r not in ("output", "padded")
        }
        spec = build_fused_kernel(
            class_to_ops(record.kernel_class), shapes, record.kernel_attrs,
            name=record.kernel_name,
        )
        plan = lower(apply(record.schedule, spec))
        report = verify_plan(plan, trials=args.trials, seed=args.seed)
        status = "ok" if report.passed else f"FAIL ({report.detail})"
        print(f"{record.kernel_name} [{record.source_model}]: {status}")
        failures += 0 if report.passed else 1
    if failures:
        print(f"{failures}/{len(records)} records failed verification")
        return 1
    print(f"all {len(records)} records verified")
    return 0


def cmd_report(args, cfg) -> int:
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"report file {path} does not exist")
    data = json.loads(path.read_text(encoding="utf-8"))
    rendered = render_report_data(data, args.format)
    if args.out:
        out = _outdir(args.out)
        dest = out / (path.stem + "." + args.format)
        dest.write_text(rendered, encoding="utf-8")
        print(f"wrote {dest}")
    else:
        print(rendered, end="")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "autotune": cmd_autotune,
    "select": cmd_select,
    "transfer": cmd_transfer,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _echo_config(args)
    try:
        return _COMMANDS[args.command](args, cfg)
    except (CliError, DescriptorError, ScheduleError, LoweringError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
