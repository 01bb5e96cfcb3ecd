"""Console output for experiment runs.

Every function takes the Rich console to print to, so tests can hand in
a console backed by a ``StringIO``. Library modules only log; this module
is where results become tables.
"""

import logging
import math
from collections.abc import Mapping, Sequence
from typing import Any

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from federank.data import DatasetStats
from federank.evaluation import MetricReport
from federank.privacy import AuditRow

# handlers installed by configure_logging carry this name so a second call
# replaces instead of stacking
_HANDLER_NAME = "federank-rich"

_STAT_LABELS: tuple[tuple[str, str], ...] = (
    ("n_users", "|U|"),
    ("n_items", "|I|"),
    ("n_positive", "X+"),
    ("ratings_per_user", "X+ / |U|"),
    ("ratings_per_item", "X+ / |I|"),
    ("density_percent", "density %"),
)


def make_console(quiet: bool = False) -> Console:
    """Console for the CLI; ``quiet`` silences everything but errors."""
    return Console(quiet=quiet, highlight=False)


def configure_logging(console: Console, verbose: bool = False) -> logging.Logger:
    """Route the ``federank`` logger through a Rich handler on ``console``.

    Args:
        console: Console the handler writes to.
        verbose: DEBUG instead of INFO.

    Returns:
        The configured package logger.
    """
    logger = logging.getLogger("federank")
    for handler in list(logger.handlers):
        if handler.get_name() == _HANDLER_NAME:
            logger.removeHandler(handler)
    handler = RichHandler(
        console=console,
        show_path=False,
        rich_tracebacks=False,
        markup=False,
        log_time_format="[%X]",
    )
    handler.set_name(_HANDLER_NAME)
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False
    return logger


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.5f}"
    return str(value)


def _table(title: str, columns: Sequence[str]) -> Table:
    table = Table(
        title=f"[bold cyan]{title}[/bold cyan]",
        show_header=True,
        header_style="bold cyan",
        border_style="cyan",
        padding=(0, 1),
    )
    for name in columns:
        table.add_column(name, justify="right" if name != columns[0] else "left")
    return table


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


def show_stats(
    console: Console,
    name: str,
    stats: DatasetStats,
    expected: Mapping[str, int] | None = None,
) -> None:
    """Dataset characteristics, with published counts next to them if known.

    Args:
        console: Rich console instance.
        name: Dataset label for the title.
        stats: Computed characteristics.
        expected: ``n_users``/``n_items``/``n_positive`` to compare against.
    """
    columns = ["statistic", "value"] + (["expected", ""] if expected else [])
    table = _table(f"dataset {name}", columns)
    row = stats.as_row()
    for key, label in _STAT_LABELS:
        cells = [label, _fmt(row[key])]
        if expected:
            want = expected.get(key)
            if want is None:
                cells += ["", ""]
            else:
                ok = want == row[key]
                verdict = "[green]ok[/green]" if ok else "[red]differs[/red]"
                cells += [str(want), verdict]
        table.add_row(*cells)
    console.print(table)


def show_metrics(console: Console, algorithm: str, report: MetricReport) -> None:
    """One-row table with P@N, R@N, F1@N, IC@N and G@N."""
    row = report.as_row()
    table = _table(algorithm, ["algorithm", *row])
    table.add_row(algorithm, *(_fmt(v) for v in row.values()))
    console.print(table)


def show_sweep(console: Console, rows: Sequence[Mapping[str, Any]]) -> None:
    """The pi sweep, one line per (T, pi) cell."""
    if not rows:
        console.print("[yellow]no sweep cells completed[/yellow]")
        return
    columns = list(rows[0])
    table = _table("pi sweep", columns)
    for row in rows:
        table.add_row(*(_fmt(row[c]) for c in columns))
    console.print(table)


def show_search(
    console: Console, grid: Sequence[tuple[float, float]], best_alpha: float
) -> None:
    """Validation P@N per learning rate, best one highlighted."""
    table = _table("learning-rate search", ["alpha", "validation P@N"])
    for alpha, score in grid:
        style = "bold green" if alpha == best_alpha else None
        table.add_row(_fmt(alpha), _fmt(score), style=style)
    console.print(table)
    console.print(
        Panel(
            f"best alpha = [bold]{best_alpha}[/bold]",
            border_style="green",
            expand=False,
        )
    )


def show_audit(console: Console, rows: Sequence[AuditRow]) -> None:
    """Sign-attack precision and recall per pi."""
    table = _table(
        "sign attack",
        ["pi", "rounds", "attack precision", "attack recall", "sign flips"],
    )
    for row in rows:
        table.add_row(
            f"{row.pi:.2f}",
            str(row.rounds),
            _fmt(row.attack_precision),
            _fmt(row.attack_recall),
            _fmt(row.sign_flip_rate),
        )
    console.print(table)


def show_run_directory(console: Console, path: str, files: Sequence[str]) -> None:
    """Where a run wrote its output."""
    listing = "\n".join(f"  {name}" for name in files)
    console.print(
        Panel(
            f"[bold]{path}[/bold]\n{listing}",
            title="[bold green]run complete[/bold green]",
            border_style="green",
            expand=False,
        )
    )
