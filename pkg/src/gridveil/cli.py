"""Command-line entry: run / train / report / calibrate.

Exit codes: 0 success, 2 schema error, 3 plant divergence, 4 infeasible
objective, 5 stealth violation. The output root defaults to ./runs or the
GRIDVEIL_OUT environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import (
    GridveilError,
    InfeasibleObjectiveError,
    SchemaError,
    StealthViolationError,
)
from .runner import calibrate, extract_figures, run_scenario, train_model
from .scenario import parse_scenario

EXIT_SCHEMA = 2
EXIT_DIVERGENCE = 3
EXIT_INFEASIBLE = 4
EXIT_STEALTH = 5


def _out_root(args):
    root = args.out or os.environ.get("GRIDVEIL_OUT") or "runs"
    return Path(root)


def _cmd_run(args):
    scn = parse_scenario(args.scenario)
    out_dir = _out_root(args) / scn.name
    report = run_scenario(scn, out_dir, bundle_path=args.bundle)
    print(f"run '{scn.name}' -> {out_dir}")
    for key, value in sorted(report.verdicts.items()):
        print(f"  {key}: {value}")
    return report.exit_code


def _cmd_train(args):
    scn = parse_scenario(args.scenario)
    out_dir = _out_root(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = args.bundle or str(out_dir / f"{scn.name}.bundle.json")
    path, fid = train_model(scn, args.trace, bundle,
                            eval_trace_path=args.eval_trace,
                            raw_corpus=args.raw_corpus)
    print(f"bundle -> {path}")
    print(f"  train_mse: {fid.train_mse:.6g}")
    print(f"  val_mse:   {fid.val_mse:.6g}")
    print(f"  test_mse:  {fid.test_mse:.6g}")
    for horizon, mse in sorted(fid.per_horizon.items()):
        print(f"  horizon {horizon:g}s mse: {mse:.6g}")
    return 0


def _cmd_report(args):
    written, report = extract_figures(args.run_dir)
    print(f"report for {args.run_dir}")
    for fig, fname in sorted(written.items()):
        print(f"  figure {fig}: {fname}")
    print("verdicts:")
    for key, value in sorted(report["verdicts"].items()):
        print(f"  {key}: {value}")
    return 0


def _cmd_calibrate(args):
    scn = parse_scenario(args.scenario)
    cal = calibrate(scn)
    payload = {"alpha_max": cal.alpha_max, "tau": cal.tau,
               "unbounded": cal.unbounded, "warning": cal.warning}
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gridveil",
        description="Microgrid rootkit-attack simulator and detector testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario")
    p_run.add_argument("scenario", help="scenario TOML file")
    p_run.add_argument("--out", help="output root (default ./runs or GRIDVEIL_OUT)")
    p_run.add_argument("--bundle", help="trained model bundle for masked attacks")
    p_run.set_defaults(func=_cmd_run)

    p_train = sub.add_parser("train", help="train the replica from a trace")
    p_train.add_argument("scenario", help="scenario TOML file")
    p_train.add_argument("--trace", required=True, help="telemetry CSV to learn from")
    p_train.add_argument("--eval-trace", help="held-out telemetry CSV for fidelity")
    p_train.add_argument("--bundle", help="output bundle path")
    p_train.add_argument("--raw-corpus", action="store_true",
                         help="skip KF densification (baseline corpus)")
    p_train.add_argument("--out", help="output root (default ./runs or GRIDVEIL_OUT)")
    p_train.set_defaults(func=_cmd_train)

    p_report = sub.add_parser("report", help="summarize a finished run directory")
    p_report.add_argument("run_dir")
    p_report.set_defaults(func=_cmd_report)

    p_cal = sub.add_parser("calibrate", help="print the evasion bound alpha_max")
    p_cal.add_argument("scenario", help="scenario TOML file")
    p_cal.set_defaults(func=_cmd_calibrate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except StealthViolationError as exc:
        print(f"stealth violation: {exc}", file=sys.stderr)
        return EXIT_STEALTH
    except InfeasibleObjectiveError as exc:
        print(f"infeasible objective: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except GridveilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
