"""Command-line driver for sweeps, reports, trend checks and grid export.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 trend-check
failure. The environment variable CSI_SEED overrides the sweep master
seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .channel import ScenarioConfig, gen_slot, make_taps, save_grid
from .numkit import ConfigurationError
from .sweep import (
    MissingCellError,
    SweepSpec,
    collect_rows,
    parse_report_csv,
    run_sweep,
    trend_check,
    write_report,
)

__all__ = ["main", "build_parser"]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csibench",
        description="train and evaluate single-layer sequence models on "
                    "next-slot CSI prediction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sweep = sub.add_parser("sweep", help="run a full experiment matrix")
    p_sweep.add_argument("--spec", required=True, help="sweep spec JSON file")

    p_report = sub.add_parser("report", help="re-emit the aggregate report of a sweep")
    p_report.add_argument("--dir", required=True, help="sweep output directory")
    p_report.add_argument("--format", choices=("csv", "json"), default="csv")

    p_check = sub.add_parser("check", help="evaluate qualitative trends of a report")
    p_check.add_argument("--dir", required=True, help="sweep output directory")

    p_grid = sub.add_parser("gridgen", help="generate and export one CSI grid")
    p_grid.add_argument("--scenario", required=True, help="scenario config JSON file")
    p_grid.add_argument("--out", required=True, help="output container path")
    p_grid.add_argument("--slot", type=int, default=0, help="slot index (default 0)")
    return parser


def _load_spec(path):
    spec = SweepSpec.from_json(path)
    env_seed = os.environ.get("CSI_SEED")
    if env_seed is not None:
        spec.master_seed = int(env_seed)
    return spec


def _cmd_sweep(args):
    rows = run_sweep(_load_spec(args.spec))
    print(f"sweep complete: {len(rows)} report rows in {os.path.join(os.getcwd())}")
    return 0


def _cmd_report(args):
    spec = SweepSpec.from_json(os.path.join(args.dir, "sweep_spec.json"))
    spec.out_dir = args.dir
    rows, failures = collect_rows(spec)
    csv_path, json_path = write_report(rows, args.dir, failures=failures)
    print(csv_path if args.format == "csv" else json_path)
    return 0


def _cmd_check(args):
    csv_path = os.path.join(args.dir, "report.csv")
    rows = parse_report_csv(csv_path)
    result = trend_check(rows)
    print(result.table())
    return 0 if result.passed else 3


def _cmd_gridgen(args):
    with open(args.scenario, "r", encoding="utf-8") as fh:
        cfg = ScenarioConfig.from_dict(json.load(fh))
    taps = make_taps(cfg)
    grid = gen_slot(taps, cfg, args.slot)
    save_grid(grid, args.out, cfg)
    print(args.out)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "sweep": _cmd_sweep,
        "report": _cmd_report,
        "check": _cmd_check,
        "gridgen": _cmd_gridgen,
    }
    try:
        return handlers[args.command](args)
    except (ConfigurationError, MissingCellError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
