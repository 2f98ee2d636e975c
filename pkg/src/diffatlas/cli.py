"""Command-line entry point.

    diffatlas gen-data --config cfg.json
    diffatlas train    --config cfg.json
    diffatlas infer    --config cfg.json [--checkpoint path] [--split test|train]
    diffatlas eval     --config cfg.json [--preds dir] [--split test|train]
    diffatlas report   RUN_DIR [RUN_DIR ...] --out report.csv

Exit codes: 0 success, 1 validation error, 2 runtime failure.
DIFFATLAS_THREADS caps sample-level parallelism (default 1).
"""

import argparse
import sys

from . import harness
from .checkpoint import CheckpointError
from .config import ConfigError, load_config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffatlas",
                                     description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        return p

    with_config(sub.add_parser("gen-data", help="generate phantom dataset + manifest"))
    with_config(sub.add_parser("train", help="train (or materialize) one run per seed"))

    p_infer = with_config(sub.add_parser("infer", help="predict label maps for a split"))
    p_infer.add_argument("--checkpoint", default=None, help="checkpoint override path")
    p_infer.add_argument("--split", default="test", choices=("test", "train"))

    p_eval = with_config(sub.add_parser("eval", help="score predictions against ground truth"))
    p_eval.add_argument("--preds", default=None, help="predictions directory override")
    p_eval.add_argument("--split", default="test", choices=("test", "train"))

    p_rep = sub.add_parser("report", help="collate eval CSVs across runs")
    p_rep.add_argument("run_dirs", nargs="+", help="run directories (or parents of them)")
    p_rep.add_argument("--out", required=True, help="output CSV path")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        if args.command == "report":
            out = harness.cmd_report(args.run_dirs, args.out)
            print(f"report written to {out}")
            return 0
        cfg = load_config(args.config)
        if args.command == "gen-data":
            path = harness.cmd_gen_data(cfg)
            print(f"dataset manifest written to {path}")
        elif args.command == "train":
            for out in harness.cmd_train(cfg):
                print(f"trained {out}")
        elif args.command == "infer":
            for out in harness.cmd_infer(cfg, args.checkpoint, args.split):
                print(f"predictions written to {out}")
        elif args.command == "eval":
            for out in harness.cmd_eval(cfg, args.preds, args.split):
                print(f"eval written to {out}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
