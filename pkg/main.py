#!/usr/bin/env python3
"""Command-line entry point of the trajectory forecaster."""

from __future__ import annotations

import argparse
import logging
import os
import sys

# Add the current directory to sys.path to ensure the forecast package is found
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# pylint: disable=wrong-import-position
from forecast.commands import (
    AVAILABLE_METRICS,
    DEFAULT_METRICS,
    cmd_analyze_latent,
    cmd_bench_online,
    cmd_evaluate,
    cmd_generate,
    cmd_plot,
    cmd_predict,
    cmd_train,
)
from forecast.config import Config, RunConfig, load_run_config
from forecast.errors import ForecastError, InputError
from forecast.model import PREDICTION_MODES


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output path")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="forecast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", parents=[common], help="generate a synthetic dataset")
    generate.add_argument("--kind", choices=Config.SCENARIO_KINDS, help="scenario kind (overrides the config)")
    generate.add_argument("--count", type=int, help="number of episodes (overrides the config)")

    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--dataset", required=True)
    train.add_argument("--log", help="JSON-lines training log")
    train.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")

    predict = sub.add_parser("predict", parents=[common], help="write predictions for a dataset split")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--dataset", required=True)
    predict.add_argument("--mode", choices=PREDICTION_MODES, default="sampled")
    predict.add_argument("--n-samples", type=int, default=Config.BON_SAMPLES)
    predict.add_argument("--robot-future", help="file of `x y vx vy [heading]` rows, one per future step")
    predict.add_argument("--plot", help="SVG of the first prediction")
    predict.add_argument("--split", choices=("train", "val", "test"), default="test")
    predict.add_argument("--limit", type=int)

    evaluate = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--metrics", default=",".join(DEFAULT_METRICS), help=f"any of {','.join(AVAILABLE_METRICS)}")
    evaluate.add_argument("--n-samples", type=int, default=Config.BON_SAMPLES)
    evaluate.add_argument("--workers", type=int, default=Config.WORKERS)

    latent = sub.add_parser("analyze-latent", parents=[common], help="prior mass per latent mode")
    latent.add_argument("--checkpoint", required=True)
    latent.add_argument("--dataset", required=True)
    latent.add_argument("--prune", help="write a checkpoint restricted to the modes covering 99%% of the mass")

    bench = sub.add_parser("bench-online", parents=[common], help="incremental vs. full re-encoding latency")
    bench.add_argument("--checkpoint", required=True)
    bench.add_argument("--dataset", required=True)
    bench.add_argument("--scenes", type=int, default=100)

    plot = sub.add_parser("plot", parents=[common], help="render a dataset scene or a prediction as SVG")
    plot.add_argument("input", help="dataset or predictions file")
    plot.add_argument("--scene", help="scene id (default: the first one)")
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    run = load_run_config(args.config, getattr(args, "kind", None))
    if args.seed is not None:
        run.seed = args.seed
    if getattr(args, "count", None) is not None:
        run.scenario.count = args.count
    return run.validate()


def _require_out(args: argparse.Namespace) -> str:
    if not args.out:
        raise InputError(f"{args.command} needs --out")
    return args.out


def dispatch(args: argparse.Namespace) -> None:
    """Run the selected subcommand."""
    seed = args.seed if args.seed is not None else Config.DEFAULT_SEED
    if args.command == "generate":
        cmd_generate(_run_config(args), _require_out(args))
    elif args.command == "train":
        cmd_train(_run_config(args), args.dataset, _require_out(args), args.log, args.resume)
    elif args.command == "predict":
        cmd_predict(
            args.checkpoint,
            args.dataset,
            _require_out(args),
            mode=args.mode,
            n=args.n_samples,
            seed=seed,
            robot_future_path=args.robot_future,
            plot_path=args.plot,
            split=args.split,
            limit=args.limit,
        )
    elif args.command == "evaluate":
        metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
        cmd_evaluate(args.checkpoint, args.dataset, metrics, args.n_samples, seed, args.workers, args.out)
    elif args.command == "analyze-latent":
        cmd_analyze_latent(args.checkpoint, args.dataset, args.out, args.prune)
    elif args.command == "bench-online":
        cmd_bench_online(args.checkpoint, args.dataset, args.scenes, args.out)
    elif args.command == "plot":
        cmd_plot(args.input, _require_out(args), args.scene)


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose or Config.DEBUG_MODE else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        dispatch(args)
    except ForecastError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
