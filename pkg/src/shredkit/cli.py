"""Command-line driver: ``shredkit <subcommand> [--config FILE] [--set sec.key=value]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config

WORKSPACE_ENV = "SHREDKIT_WORKSPACE"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file, or a built-in name: default, ci")
    p.add_argument("--workspace", help=f"workspace root (default ${WORKSPACE_ENV} or ./workspace)")
    p.add_argument("--seed", type=int, help="master seed, overrides [run] seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shredkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "simulate the parametric dataset",
        "compress": "build per-field SVD bases",
        "train": "train L members for every configured strategy",
        "reconstruct": "predict latent trajectories with every member",
        "evaluate": "ensemble statistics, errors and report CSVs",
        "sweep": "xi against the number of members",
        "all": "generate, compress, train, reconstruct and evaluate",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    root = Path(args.workspace or os.environ.get(WORKSPACE_ENV, "workspace"))
    ws = pipeline.Workspace(root, cfg)
    jobs = max(1, args.jobs)
    try:
        if args.command == "generate":
            pipeline.stage_generate(ws, jobs)
        elif args.command == "compress":
            pipeline.stage_compress(ws)
        elif args.command == "train":
            pipeline.stage_train(ws, root, jobs)
        elif args.command == "reconstruct":
            pipeline.stage_reconstruct(ws, root, jobs)
        elif args.command == "evaluate":
            for path in pipeline.stage_evaluate(ws):
                print(path)
        elif args.command == "sweep":
            print(pipeline.stage_sweep(ws, root, jobs))
        elif args.command == "all":
            for path in pipeline.run_all(ws, root, jobs):
                print(path)
    except pipeline.MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
