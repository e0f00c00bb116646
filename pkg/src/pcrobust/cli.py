"""Command-line entry point.

Commands:
    pcrobust run <config>                  -- run every configured arm x seed
    pcrobust bench <config> --checkpoint P -- attack benchmark for a checkpoint
    pcrobust plots <run-dir>               -- (re)emit plot-data CSVs

Exit codes: 0 success, 1 runtime failure, 2 config validation failure.
The output root can be overridden with $PCROBUST_OUTPUT_ROOT.
"""
from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigurationError, PCRobustError
from .harness import benchmark_attacks, emit_plots, run_experiment, write_benchmark


def build_parser():
    parser = argparse.ArgumentParser(prog="pcrobust")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output-root", default=None)
    p_run.add_argument("--seed", type=int, default=None, help="override the seed list")
    p_run.add_argument("--serial", action="store_true",
                       help="force deterministic serial execution (the default)")

    p_bench = sub.add_parser("bench", help="benchmark configured attacks on a checkpoint")
    p_bench.add_argument("config")
    p_bench.add_argument("--checkpoint", required=True)
    p_bench.add_argument("--out", default=None, help="CSV output path")
    p_bench.add_argument("--sample-size", type=int, default=100)

    p_plots = sub.add_parser("plots", help="emit plot-data CSVs from a run directory")
    p_plots.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            out_dir = run_experiment(
                args.config, output_root=args.output_root, seed_override=args.seed
            )
            print(out_dir)
        elif args.command == "bench":
            table = benchmark_attacks(
                args.config, args.checkpoint, sample_size=args.sample_size
            )
            out = args.out or "benchmark.csv"
            write_benchmark(table, out)
            for model_name, row in table.items():
                for attack, acc in sorted(row.items()):
                    print(f"{model_name}\t{attack}\t{acc:.4f}")
        elif args.command == "plots":
            if not os.path.isdir(args.run_dir):
                raise PCRobustError(f"run directory not found: {args.run_dir}")
            for name in emit_plots(args.run_dir):
                print(name)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PCRobustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
