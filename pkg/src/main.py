"""Command-line entry point for Distill That Prompt."""

import argparse
import shlex
import sys
from pathlib import Path

from dotenv import load_dotenv
from loguru import logger

from .components.experiment import (
    PLOT,
    RESULTS,
    ExperimentRunner,
    load_run_config,
    run_experiment,
)
from .evaluators.plots import emit_comparison_plot
from .utils.config import DEFAULT_SWEEP, Settings, parse_config, with_selection_size
from .utils.errors import KDPLError
from .utils.logger import setup_logging


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="distill-that-prompt",
        description="Prompt learning for a small vision-language student, "
        "supervised by a frozen teacher's predictions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", type=Path, help="YAML experiment config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override a config key (dotted keys address sections); repeatable",
        )

    train = sub.add_parser("train", help="Train and evaluate one prompt per seed")
    add_config_args(train)
    train.add_argument("--progress", action="store_true", help="Show per-epoch progress bars")

    evaluate = sub.add_parser("eval", help="Re-evaluate saved prompts of a finished run")
    evaluate.add_argument("run_dir", type=Path, help="Run directory holding manifest.json")

    sweep = sub.add_parser("sweep", help="One run per selection size K, plotted together")
    add_config_args(sweep)
    sweep.add_argument(
        "--k",
        dest="sizes",
        type=int,
        nargs="+",
        default=list(DEFAULT_SWEEP),
        help=f"Selection sizes (default: {' '.join(map(str, DEFAULT_SWEEP))})",
    )
    sweep.add_argument("--progress", action="store_true")

    plot = sub.add_parser("plot", help="Grouped per-dataset bar chart from results files")
    plot.add_argument("results", type=Path, nargs="+", help="results.csv files")
    plot.add_argument("--output", type=Path, default=Path(PLOT))
    plot.add_argument("--split", default="test")
    plot.add_argument("--labels", nargs="+", help="One series name per results file")
    plot.add_argument("--title", default="Per-dataset accuracy")

    cache = sub.add_parser("cache", help="Teacher prediction cache")
    cache_sub = cache.add_subparsers(dest="cache_command", required=True)
    warm = cache_sub.add_parser("warm", help="Precompute teacher predictions for every seed")
    add_config_args(warm)

    return parser.parse_args(argv)


def _train(args: argparse.Namespace, settings: Settings, command: str) -> int:
    config = parse_config(args.config, args.overrides, settings)
    outcome = run_experiment(config, settings, command, progress=args.progress)
    logger.info(f"Results written to {outcome.output_dir / RESULTS}")
    return 0 if outcome.complete else 1


def _eval(args: argparse.Namespace, settings: Settings, command: str) -> int:
    config = load_run_config(args.run_dir)
    outcome = ExperimentRunner(config, settings, command).evaluate_saved()
    return 0 if outcome.complete else 1


def _sweep(args: argparse.Namespace, settings: Settings, command: str) -> int:
    base = parse_config(args.config, args.overrides, settings)
    if not base.objective.uses_vocabulary:
        logger.warning(f"Objective {base.objective} ignores K; every sweep point will match")
    results: list[Path] = []
    incomplete = []
    for k in args.sizes:
        outcome = run_experiment(
            with_selection_size(base, k), settings, command, progress=args.progress
        )
        results.append(outcome.output_dir / RESULTS)
        if not outcome.complete:
            incomplete.append(k)
    emit_comparison_plot(
        results,
        Path(base.output_dir) / PLOT,
        title=f"{base.method_label}: selection size sweep",
        labels=[f"K={k}" for k in args.sizes],
    )
    if incomplete:
        logger.error(f"Sweep points with failed seeds: {incomplete}")
    return 0 if not incomplete else 1


def _plot(args: argparse.Namespace, settings: Settings, command: str) -> int:
    emit_comparison_plot(args.results, args.output, args.split, args.title, args.labels)
    return 0


def _cache(args: argparse.Namespace, settings: Settings, command: str) -> int:
    config = parse_config(args.config, args.overrides, settings)
    written = ExperimentRunner(config, settings, command).warm_cache()
    logger.info(f"Cache warm finished with {written} new entries")
    return 0


COMMANDS = {
    "train": _train,
    "eval": _eval,
    "sweep": _sweep,
    "plot": _plot,
    "cache": _cache,
}


def main(argv: list[str] | None = None) -> int:
    """Run a CLI verb; returns 0 only when every requested seed completed."""
    load_dotenv()
    settings = Settings.from_env()
    setup_logging(settings.log_level, str(settings.log_dir))

    args = parse_args(argv)
    command = shlex.join(["distill-that-prompt", *(argv if argv is not None else sys.argv[1:])])
    try:
        return COMMANDS[args.command](args, settings, command)
    except (KDPLError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
