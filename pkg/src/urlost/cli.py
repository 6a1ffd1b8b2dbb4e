"""Command-line entry point.

Verbs mirror the pipeline stages:

    urlost synth    --config cfg.yaml [--out DIR] [--seed N]
    urlost affinity --config cfg.yaml ...
    urlost cluster  --config cfg.yaml ...
    urlost train    --config cfg.yaml [--resume] [--precision f32|f64]
    urlost eval     --config cfg.yaml ...
    urlost report   --runs DIR [DIR ...] --out DIR

Stages read and write artifacts inside the run directory (``output`` in the
config, overridable with --out) and refuse stale inputs via recorded hashes.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline, report
from .config import load_config, override_seeds
from .errors import UrlostError

log = logging.getLogger("urlost")

STAGES = {
    "synth": pipeline.stage_synth,
    "affinity": pipeline.stage_affinity,
    "cluster": pipeline.stage_cluster,
    "train": pipeline.stage_train,
    "eval": pipeline.stage_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urlost", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="pipeline config YAML")
        p.add_argument("--out", default=None, help="run directory (overrides config output)")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        p.add_argument("--precision", choices=("f32", "f64"), default=None,
                       help="override training precision")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from the run directory's checkpoint")
    p = sub.add_parser("report", help="merge run results into a summary table and figures")
    p.add_argument("--runs", nargs="+", required=True, help="completed run directories")
    p.add_argument("--out", required=True, help="directory for summary.csv and figures/")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            table = report.build_report(args.runs, args.out)
            print(table.to_string(index=False))
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            override_seeds(cfg, args.seed)
        if args.precision is not None:
            cfg.train.precision = args.precision
        out = Path(args.out) if args.out else Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            prov = pipeline.stage_train(cfg, out, resume=args.resume)
        else:
            prov = STAGES[args.command](cfg, out)
        log.info("%s: wrote %s", args.command, ", ".join(sorted(prov["outputs"])))
        return 0
    except UrlostError as exc:
        log.error("%s stage failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
