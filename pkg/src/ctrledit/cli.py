"""Command-line entry point: ``ctrledit <stage> --config run.cfg [--seed N] [--out DIR]``.

Exit codes: 0 on success, 2 when inputs or configuration fail validation,
1 when a stage fails while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

import torch

from . import pipeline
from .errors import ConfigError, DomainError, StageOrderError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2

COMMANDS = ("extract", "edit-control", "customize", "invert", "edit", "metrics")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrledit", description="Controllable toy video editing pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key=value pipeline config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the work directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "edit-control":
            p.add_argument("--spec", default=None, help="edit spec file (defaults to the config's edit_spec)")
    return parser


def run(args: argparse.Namespace) -> object:
    cfg = pipeline.load_config(args.config).with_overrides(seed=args.seed, work_dir=args.out)
    if args.command == "extract":
        return pipeline.cmd_extract(cfg)
    if args.command == "edit-control":
        return pipeline.cmd_edit_control(cfg, args.spec)
    if args.command == "customize":
        return pipeline.cmd_customize(cfg)
    if args.command == "invert":
        return pipeline.cmd_invert(cfg)
    if args.command == "edit":
        return pipeline.cmd_edit(cfg)
    return pipeline.cmd_metrics(cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        result = run(args)
    except (ConfigError, DomainError, StageOrderError, FileNotFoundError, KeyError) as exc:
        print(f"ctrledit {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any failure while running maps to exit code 1
        print(f"ctrledit {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if isinstance(result, dict):
        print(json.dumps(result, indent=1, sort_keys=True))
    elif isinstance(result, list):
        print(f"wrote {len(result)} files")
    else:
        print(f"wrote {result}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
