"""Command line: ``sharpzo run|report|verify``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .experiment import SpecError, atomic_write, execute, load_spec, log_name, resolve_out
from .report import (ObjectiveMismatchError, compare_report, format_table, load_logs,
                     plot_curves, summarize, summary_csv)
from .verify import run_all


def _write_summary(summary: dict, out: Path) -> None:
    atomic_write(out / "summary.csv", summary_csv(summary))
    atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    try:
        spec = load_spec(args.spec)
    except FileNotFoundError:
        print(f"error: spec file not found: {args.spec}", file=sys.stderr)
        return 2
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = resolve_out(args.out, spec)
    try:
        execute(spec, out, jobs=args.jobs)
    except Exception as exc:  # no summary after a failed run
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1
    paths = [str(out / "logs" / log_name(m, s)) for m in spec.methods for s in spec.seeds]
    entries = load_logs(paths)
    summary = summarize(entries, spec.thresholds)
    _write_summary(summary, out)
    if spec.plot:
        title = ", ".join(f"{k}={v}" for k, v in spec.objective.items())
        plot_curves(entries, out / "loss_vs_queries.svg", title)
    print(format_table(summary))
    print(f"wrote {len(paths)} logs to {out / 'logs'}")
    return 0


def cmd_report(args) -> int:
    try:
        summary = compare_report(args.logs, args.threshold or [])
    except ObjectiveMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        _write_summary(summary, Path(args.out))
    if args.json:
        print(json.dumps(summary, indent=1, sort_keys=True))
    else:
        print(format_table(summary))
    return 0


def cmd_verify(args) -> int:
    return 0 if run_all() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharpzo", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every method x seed of an experiment spec")
    p.add_argument("spec", help="INI experiment spec")
    p.add_argument("--out", help="output directory (else $SHARPZO_OUT, the spec, ./results)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarize CSV logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--threshold", type=float, action="append",
                   help="loss threshold for queries-to-threshold (repeatable)")
    p.add_argument("--out", help="also write summary.csv/summary.json here")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="estimator exactness and mask sparsity self-check")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
