"""Command-line entry point: ``costeps <verb> --config cfg.json --out DIR``.

Exit status is 0 on success. On failure a single JSON object
``{"error": <kind>, "message": ..., "key": ...}`` is written to stderr and
the exit status is 2 for configuration problems and 1 otherwise.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODES, ConfigError, ExperimentConfig, load_config, parse_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="costeps", description="Train, sample and probe a toy video DiT.")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run the {mode} experiment")
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults apply to missing keys)")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="override the evaluation seed")
        p.add_argument("--checkpoint", type=Path, help="model checkpoint to load")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        # the verb wins over any mode stored in the file
        cfg = parse_config({**load_config(args.config).to_dict(), "mode": args.mode})
    else:
        cfg = ExperimentConfig(mode=args.mode)
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.checkpoint is not None:
        cfg.checkpoint = str(args.checkpoint)
    return cfg


def _fail(kind: str, message: str, code: int, key: str | None = None) -> int:
    err = {"error": kind, "message": message}
    if key is not None:
        err["key"] = key
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        return _fail("config", exc.reason, 2, exc.key)
    except OSError as exc:
        return _fail("config", str(exc), 2, "--config")
    from .experiments import run_experiment

    try:
        report = run_experiment(cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error record
        return _fail(type(exc).__name__, str(exc), 1)
    agg = report["aggregate"]
    print(json.dumps({"mode": cfg.mode, "out": cfg.out_dir, "aggregate": agg}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
