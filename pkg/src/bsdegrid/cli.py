from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from bsdegrid.errors import BsdeGridError, ConfigError, classify_error
from bsdegrid.harness.commands import COMMANDS, RunContext
from bsdegrid.harness.experiment import ExperimentConfig, load_experiment
from bsdegrid.logging_config import configure_logging
from bsdegrid.settings import get_config, project_root

logger = logging.getLogger(__name__)


def _default_threads() -> int:
    value = os.getenv("BSDEGRID_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning("Ignoring non-integer BSDEGRID_THREADS=%r", value)
    return get_config().harness.threads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsdegrid",
        description="Euler and Malliavin-weights BSDE schemes on graded time grids.",
    )
    parser.add_argument("subcommand", choices=sorted(COMMANDS), help="What to run.")
    parser.add_argument("--config", default=None, help="Experiment config (YAML).")
    parser.add_argument("--out", default=None, help="Output directory (default: config output.dir).")
    parser.add_argument("--seed", type=int, default=None, help="Override the experiment seed.")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Parallel N-runs (default: BSDEGRID_THREADS or config.harness.threads).",
    )
    parser.add_argument("--log-level", default=None, help="Package log level (default: configs/logging.yaml).")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        if args.subcommand != "report":
            raise ConfigError(f"{args.subcommand} needs --config")
        return ExperimentConfig(seed=args.seed or 0)
    experiment = load_experiment(args.config)
    if args.seed is not None:
        if not (0 <= args.seed < 2**64):
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        experiment = experiment.model_copy(update={"seed": int(args.seed)})
    return experiment


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(level=args.log_level)

    try:
        experiment = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    config = get_config()
    out_dir = Path(args.out) if args.out else experiment.output.dir
    if not out_dir.is_absolute() and args.out is None:
        out_dir = project_root() / out_dir
    threads = args.threads if args.threads is not None else _default_threads()
    ctx = RunContext(experiment=experiment, out_dir=out_dir, threads=max(1, threads), config=config)

    try:
        result = COMMANDS[args.subcommand](ctx)
    except BsdeGridError as exc:
        info = classify_error(exc)
        print(f"{args.subcommand} failed [{info.code}]: {info.message}", file=sys.stderr)
        return 1

    print(json.dumps({"exit_code": result.exit_code, "outputs": [str(p) for p in result.outputs]}, indent=2))
    return result.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
