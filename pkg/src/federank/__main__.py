"""Command-line entry point.

Run with: python -m federank <command> [options]
Or via the installed script: federank <command> [options]

Commands:
    run     train and evaluate one algorithm
    sweep   FedeRank over the pi grid and T regimes
    search  pick the learning rate by validation P@N
    audit   sign attack on transmitted updates per pi
    stats   dataset characteristics
"""

import argparse
import sys
from collections.abc import Sequence

from rich.console import Console

from federank import __version__
from federank.config import ExperimentConfig, load_config
from federank.errors import ConfigError, FedeRankError, SweepError
from federank.experiments import (
    hyperparameter_search,
    run_audit,
    run_single,
    run_stats,
    run_sweep,
)
from federank.reporting import (
    configure_logging,
    make_console,
    show_audit,
    show_metrics,
    show_run_directory,
    show_search,
    show_stats,
    show_sweep,
)

_COMMANDS = ("run", "sweep", "search", "audit", "stats")

# command-line flag -> config key
_FLAG_KEYS: dict[str, str] = {
    "dataset": "dataset",
    "format": "dataset_format",
    "algorithm": "algorithm",
    "pi": "pi",
    "t_mode": "t_mode",
    "epochs": "epochs",
    "seed": "seed",
    "alpha": "alpha",
    "out": "out",
}

EXIT_ERROR = 2
EXIT_INTERRUPTED = 130


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="federank",
        description="Federated pair-wise recommendation experiments.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for command in _COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--dataset", help="rating file")
        p.add_argument("--format", help="dataset profile, e.g. movielens_1m")
        p.add_argument("--algorithm", help="federank, bpr_mf, random, ...")
        p.add_argument("--pi", help="positive transmission ratio in [0, 1]")
        p.add_argument("--t-mode", help="triples per client: integer or per_user_avg")
        p.add_argument("--epochs")
        p.add_argument("--seed")
        p.add_argument("--alpha", help="learning rate")
        p.add_argument("--out", help="output root directory")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any configuration key (repeatable)",
        )
        p.add_argument("--verbose", action="store_true", help="debug logging")
        p.add_argument("--quiet", action="store_true", help="no progress bars")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, str]:
    """Config overrides from flags; ``--set`` pairs win over named flags.

    Raises:
        ConfigError: For a ``--set`` value without ``=``.
    """
    overrides = {
        key: str(value)
        for flag, key in _FLAG_KEYS.items()
        if (value := getattr(args, flag, None)) is not None
    }
    if getattr(args, "quiet", False):
        overrides["progress"] = "false"
    for pair in args.set:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError("--set", f"expected KEY=VALUE, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def dispatch(command: str, config: ExperimentConfig, console: Console) -> None:
    """Run a subcommand and print its result tables."""
    match command:
        case "run":
            outcome = run_single(config)
            show_metrics(console, config.algorithm, outcome.report)
            show_run_directory(console, str(outcome.directory), outcome.files)
        case "sweep":
            try:
                rows = run_sweep(config)
            except SweepError as exc:
                console.print(f"[bold red]{exc}[/bold red]")
                for cell, message in exc.failures:
                    console.print(f"  [red]{cell}[/red]: {message}")
                raise
            show_sweep(console, rows)
        case "search":
            result = hyperparameter_search(config)
            show_search(console, result.grid, result.best_alpha)
        case "audit":
            show_audit(console, run_audit(config))
        case "stats":
            stats, expected = run_stats(config)
            label = config.dataset_format or config.dataset
            show_stats(console, label, stats, expected)


def main(argv: Sequence[str] | None = None) -> None:
    """Parse arguments, resolve the config and run the subcommand.

    Exits with status 2 on any federank error and 130 on Ctrl-C.
    """
    args = build_parser().parse_args(argv)
    console = make_console()
    configure_logging(console, verbose=args.verbose)

    try:
        config = load_config(args.config, overrides_from_args(args))
        dispatch(args.command, config, console)
    except FileNotFoundError as exc:
        console.print(f"[bold red]error:[/bold red] file not found: {exc.filename}")
        sys.exit(EXIT_ERROR)
    except FedeRankError as exc:
        console.print(f"[bold red]error:[/bold red] {exc}")
        sys.exit(EXIT_ERROR)
    except KeyboardInterrupt:
        console.print("\n  [bold red]interrupted[/bold red]")
        sys.exit(EXIT_INTERRUPTED)


if __name__ == "__main__":
    main()
