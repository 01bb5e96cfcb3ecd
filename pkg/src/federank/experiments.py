"""Experiment orchestration.

Wires a resolved :class:`ExperimentConfig` through loading, training,
evaluation and the privacy audit, and writes every artifact of a run as
comma-separated files with a header row.

Run directory of ``run``::

    <out>/run-<algorithm>-<dataset>-seed<seed>/
        config.txt           resolved configuration (re-runnable)
        metrics.csv          algorithm, dataset, pi, T, P@N, R@N, F1@N, IC@N, G@N
        history.csv          validation P@N per epoch (factor models)
        model.npz            Q, b, P and the best epoch (factor models)
        telemetry_rounds.csv rows sent per client round (federank)
        item_updates.csv     rows received per item (federank)
        split/               train/validation/test manifest (save_split)

``sweep``, ``search``, ``audit`` and ``stats`` write to sibling
directories named after the subcommand.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from federank.baselines import BPRMF, KNN, MostPopular, RandomRecommender, Recommender
from federank.config import ExperimentConfig, SweepSpec
from federank.data import (
    DatasetStats,
    InteractionDataset,
    compute_stats,
    expected_counts,
    prepare_dataset,
    save_split,
)
from federank.errors import ConfigError, FedeRankError, SweepError
from federank.evaluation import (
    MetricReport,
    Scorer,
    evaluate,
    frequency_curves,
    validation_precision,
)
from federank.federation import TelemetryLog, train
from federank.model import ServerModel
from federank.privacy import AuditRow, audit_curve

logger = logging.getLogger(__name__)

# algorithms whose learning rate the search can tune
_TUNABLE = ("federank", "bpr_mf")


@dataclass(eq=False)
class FittedModel:
    """A trained scorer plus whatever the run writes about its training.

    Attributes:
        scorer: Ranks the catalog for a user.
        server: Item factors and biases (factor models only).
        user_factors: User embeddings (factor models only).
        history: ``(epoch, validation P@N)`` pairs.
        best_epoch: Epoch whose parameters were kept.
        telemetry: Transmission counts (federank only).
        triples_per_client: Resolved T (federank only).
    """

    scorer: Scorer
    server: ServerModel | None = None
    user_factors: np.ndarray | None = None
    history: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int = 0
    telemetry: TelemetryLog | None = None
    triples_per_client: int | None = None


@dataclass(eq=False)
class RunOutcome:
    """What ``run_single`` produced."""

    directory: Path
    report: MetricReport
    model: FittedModel
    files: list[str]


@dataclass(frozen=True)
class SearchResult:
    """Validation P@N per learning rate and the chosen one."""

    grid: tuple[tuple[float, float], ...]
    best_alpha: float
    directory: Path


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _dataset_label(config: ExperimentConfig) -> str:
    return config.dataset_format or Path(config.dataset).stem or "dataset"


def run_directory(config: ExperimentConfig, kind: str) -> Path:
    """``<out>/<kind>-<algorithm>-<dataset>-seed<seed>``, created if missing."""
    name = f"{kind}-{config.algorithm}-{_dataset_label(config)}-seed{config.seed}"
    path = Path(config.out) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(
    rows: Sequence[dict[str, Any]], path: Path, columns: Sequence[str]
) -> None:
    pd.DataFrame(list(rows), columns=list(columns)).to_csv(path, index=False)


def _append_csv(row: dict[str, Any], path: Path) -> None:
    pd.DataFrame([row]).to_csv(path, mode="a", header=not path.exists(), index=False)


def _write_config(config: ExperimentConfig, directory: Path) -> None:
    (directory / "config.txt").write_text(config.to_text(), encoding="utf-8")


def load_dataset(config: ExperimentConfig) -> InteractionDataset:
    """Load, filter and split the configured dataset."""
    return prepare_dataset(
        config.dataset,
        config.columns,
        config.separator,
        config.min_ratings,
        config.train_fraction,
        config.validation_fraction,
        config.user_fraction,
        config.seed,
    )


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def build_recommender(config: ExperimentConfig) -> Recommender:
    """Unfitted centralized recommender for ``config.algorithm``.

    Raises:
        ConfigError: For ``federank``, which is trained by the simulator.
    """
    match config.algorithm:
        case "random":
            return RandomRecommender(seed=config.seed)
        case "most_popular":
            return MostPopular()
        case "user_knn":
            return KNN("user", k=config.knn_neighbors)
        case "item_knn":
            return KNN("item", k=config.knn_neighbors)
        case "bpr_mf":
            return BPRMF(
                factors=config.factors,
                alpha=config.alpha,
                reg=config.regularization,
                epochs=config.epochs,
                seed=config.seed,
                init_std=config.init_std,
                top_n=config.top_n,
                progress=config.progress,
            )
    raise ConfigError("algorithm", f"{config.algorithm!r} is not a centralized model")


def fit_model(
    config: ExperimentConfig,
    dataset: InteractionDataset,
    t_mode: str | None = None,
    pi: float | None = None,
) -> FittedModel:
    """Train the configured algorithm.

    Args:
        config: Resolved configuration.
        dataset: Split data.
        t_mode: T regime overriding ``config.t_mode`` (federank only).
        pi: Transmission ratio overriding ``config.pi`` (federank only).
    """
    if config.algorithm == "federank":
        schedule = config.schedule(dataset, t_mode, pi)
        telemetry = TelemetryLog(dataset.n_items, record_rounds=config.record_rounds)
        logger.info(
            "federank: T=%d  m=%d  pi=%.2f  %d rounds per epoch",
            schedule.triples_per_client,
            schedule.clients_per_round,
            schedule.pi,
            schedule.resolve_rounds(dataset.x_plus),
        )
        result = train(dataset, schedule, telemetry)
        return FittedModel(
            scorer=result.recommender(),
            server=result.server,
            user_factors=result.user_factors,
            history=result.history,
            best_epoch=result.best_epoch,
            telemetry=result.telemetry,
            triples_per_client=schedule.triples_per_client,
        )

    recommender = build_recommender(config).fit(dataset)
    if isinstance(recommender, BPRMF):
        return FittedModel(
            scorer=recommender,
            server=recommender.server,
            user_factors=recommender.user_factors,
            history=recommender.history,
            best_epoch=recommender.best_epoch,
        )
    return FittedModel(scorer=recommender)


def _save_model(model: FittedModel, directory: Path) -> list[str]:
    """Checkpoint, history and telemetry files of a fitted model."""
    written = []
    if model.server is not None and model.user_factors is not None:
        np.savez(
            directory / "model.npz",
            Q=model.server.Q,
            b=model.server.b,
            P=model.user_factors,
            best_epoch=np.asarray(model.best_epoch),
        )
        _write_csv(
            [{"epoch": e, "validation_precision": s} for e, s in model.history],
            directory / "history.csv",
            ["epoch", "validation_precision"],
        )
        written += ["model.npz", "history.csv"]
    if model.telemetry is not None:
        if model.telemetry.record_rounds:
            _write_csv(
                [
                    {
                        "round": r,
                        "user": u,
                        "positive_rows": pos,
                        "negative_rows": neg,
                    }
                    for r, u, pos, neg in model.telemetry.rounds
                ],
                directory / "telemetry_rounds.csv",
                ["round", "user", "positive_rows", "negative_rows"],
            )
            written.append("telemetry_rounds.csv")
        _write_csv(
            [{"item": i, "updates": c} for i, c in model.telemetry.item_rows()],
            directory / "item_updates.csv",
            ["item", "updates"],
        )
        written.append("item_updates.csv")
    return written


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def run_single(
    config: ExperimentConfig, dataset: InteractionDataset | None = None
) -> RunOutcome:
    """Train one algorithm, evaluate it on the test split, write the run.

    Args:
        config: Configuration; validated here.
        dataset: Already-prepared data; loaded from ``config`` when None.

    Raises:
        ConfigError: For an invalid configuration.
    """
    config.validate(require_dataset=dataset is None)
    if dataset is None:
        dataset = load_dataset(config)
    directory = run_directory(config, "run")
    _write_config(config, directory)
    files = ["config.txt"]
    if config.save_split:
        save_split(dataset, directory / "split")
        files.append("split/")

    model = fit_model(config, dataset)
    report = evaluate(model.scorer, dataset, config.top_n, "test")
    federated = config.algorithm == "federank"
    row = {
        "algorithm": config.algorithm,
        "dataset": _dataset_label(config),
        "pi": config.pi if federated else math.nan,
        "T": model.triples_per_client if federated else math.nan,
        **report.as_row(),
    }
    _write_csv([row], directory / "metrics.csv", list(row))
    files.append("metrics.csv")
    files += _save_model(model, directory)
    logger.info("%s: %s", config.algorithm, report.as_row())
    return RunOutcome(directory=directory, report=report, model=model, files=files)


def _append_curve(curve: Sequence[tuple[int, float]], path: Path, **keys: Any) -> None:
    """Append ``(rank, share)`` pairs, prefixed by constant ``keys`` columns."""
    pd.DataFrame(
        {
            **keys,
            "rank": [rank for rank, _ in curve],
            "value": [share for _, share in curve],
        }
    ).to_csv(path, mode="a", header=not path.exists(), index=False)


def run_sweep(
    config: ExperimentConfig,
    sweep: SweepSpec | None = None,
    dataset: InteractionDataset | None = None,
) -> list[dict[str, Any]]:
    """Train FedeRank for every (T regime, pi) cell and collect the metrics.

    Rows are appended to ``pi_sweep.csv`` as cells finish, together with the
    per-item update frequencies (``updates_freq.csv``) and recommendation
    frequencies (``rec_freq.csv``) of each cell. ``popularity_freq.csv``
    holds the train positive-feedback curve of the dataset, normalized the
    same way, as the reference for the recommendation curves.

    A cell that raises is logged and recorded; the remaining cells still run.

    Returns:
        One row per completed cell, in grid order.

    Raises:
        SweepError: After the grid, if any cell failed.
    """
    config = config.replace(algorithm="federank", record_rounds=False).validate(
        require_dataset=dataset is None
    )
    sweep = sweep or SweepSpec.from_config(config)
    if dataset is None:
        dataset = load_dataset(config)
    directory = run_directory(config, "sweep")
    _write_config(config, directory)
    for name in (
        "pi_sweep.csv",
        "updates_freq.csv",
        "rec_freq.csv",
        "popularity_freq.csv",
    ):
        (directory / name).unlink(missing_ok=True)
    _append_curve(
        frequency_curves(dataset.item_popularity(), config.freq_top_k),
        directory / "popularity_freq.csv",
    )

    rows: list[dict[str, Any]] = []
    failures: list[tuple[str, str]] = []
    for t_mode, pi in sweep.cells():
        cell = f"T={t_mode} pi={pi:.2f}"
        try:
            model = fit_model(config, dataset, t_mode=t_mode, pi=pi)
            report = evaluate(model.scorer, dataset, config.top_n, "test")
            telemetry = model.telemetry or TelemetryLog(dataset.n_items)
            updates = frequency_curves(
                telemetry.item_update_counts, config.freq_top_k
            )
            recs = frequency_curves(report.per_item_rec_counts, config.freq_top_k)
        except FedeRankError as exc:
            logger.warning("sweep cell %s failed: %s", cell, exc)
            failures.append((cell, str(exc)))
            continue
        except Exception as exc:
            logger.exception("sweep cell %s crashed", cell)
            failures.append((cell, f"{type(exc).__name__}: {exc}"))
            continue

        row = {"pi": pi, "t_mode": t_mode, "T": model.triples_per_client}
        row.update(report.as_row())
        _append_csv(row, directory / "pi_sweep.csv")
        for name, curve in (("updates_freq.csv", updates), ("rec_freq.csv", recs)):
            _append_curve(curve, directory / name, pi=pi, t_mode=t_mode)
        rows.append(row)
        logger.info("sweep cell %s: %s", cell, report.as_row())

    if failures:
        raise SweepError(failures)
    return rows


def hyperparameter_search(
    config: ExperimentConfig,
    alpha_grid: Sequence[float] | None = None,
    dataset: InteractionDataset | None = None,
) -> SearchResult:
    """Pick the learning rate with the best validation P@N.

    Ties go to the smaller learning rate. Regularization weights left unset
    follow each candidate rate.

    Raises:
        ConfigError: For an empty grid or an algorithm without a learning rate.
    """
    grid = sorted(config.alpha_grid if alpha_grid is None else alpha_grid)
    if not grid:
        raise ConfigError("alpha_grid", "must not be empty")
    if config.algorithm not in _TUNABLE:
        raise ConfigError("algorithm", f"must be one of {', '.join(_TUNABLE)}")
    config.validate(require_dataset=dataset is None)
    if dataset is None:
        dataset = load_dataset(config)
    directory = run_directory(config, "search")
    _write_config(config, directory)

    scores: list[tuple[float, float]] = []
    best_alpha, best_score = grid[0], -math.inf
    for alpha in grid:
        model = fit_model(config.replace(alpha=float(alpha)), dataset)
        score = validation_precision(model.scorer, dataset, config.top_n)
        scores.append((float(alpha), score))
        logger.info("alpha=%g  validation P@%d = %.5f", alpha, config.top_n, score)
        if score > best_score:
            best_alpha, best_score = float(alpha), score

    _write_csv(
        [{"alpha": a, "validation_precision": s} for a, s in scores],
        directory / "search.csv",
        ["alpha", "validation_precision"],
    )
    return SearchResult(grid=tuple(scores), best_alpha=best_alpha, directory=directory)


def run_audit(
    config: ExperimentConfig, dataset: InteractionDataset | None = None
) -> list[AuditRow]:
    """Sign attack over ``pi_grid``; writes ``audit.csv``."""
    config = config.replace(algorithm="federank").validate(
        require_dataset=dataset is None
    )
    if dataset is None:
        dataset = load_dataset(config)
    directory = run_directory(config, "audit")
    _write_config(config, directory)
    rows = audit_curve(
        dataset, config.schedule(dataset), config.pi_grid, config.audit_rounds
    )
    _write_csv(
        [row.as_row() for row in rows],
        directory / "audit.csv",
        ["pi", "rounds", "attack_precision", "attack_recall", "sign_flip_rate"],
    )
    return rows


def run_stats(
    config: ExperimentConfig, dataset: InteractionDataset | None = None
) -> tuple[DatasetStats, dict[str, int] | None]:
    """Dataset characteristics, and the profile's published counts if any."""
    config.validate(require_dataset=dataset is None)
    if dataset is None:
        dataset = load_dataset(config)
    stats = compute_stats(dataset)
    expected = expected_counts(config.dataset_format) if config.dataset_format else None
    directory = run_directory(config, "stats")
    _write_csv([stats.as_row()], directory / "stats.csv", list(stats.as_row()))
    if expected:
        row = stats.as_row()
        for key, want in expected.items():
            if row.get(key) != want:
                logger.warning("%s: got %s, expected %s", key, row.get(key), want)
    return stats, expected
