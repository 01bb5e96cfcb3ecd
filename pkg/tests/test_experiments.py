"""Tests for the experiments module.

Tests cover:
- run_single output files and metrics columns for several algorithms
- federank with one client, one triple and pi = 1 matching bpr_mf
- run_sweep rows, frequency files, the popularity reference and failure collection
- hyperparameter_search ordering and tie-breaking
- run_audit and run_stats artifacts
"""

import logging
from pathlib import Path
from unittest.mock import MagicMock

import numpy as np
import pandas as pd
import pytest
from pytest_mock import MockerFixture

from federank import experiments
from federank.baselines import KNN, MostPopular
from federank.config import ExperimentConfig, SweepSpec
from federank.data import InteractionDataset
from federank.errors import ConfigError, DivergenceError, SweepError
from federank.experiments import (
    FittedModel,
    build_recommender,
    hyperparameter_search,
    load_dataset,
    run_audit,
    run_directory,
    run_single,
    run_stats,
    run_sweep,
)


@pytest.fixture
def config(ratings_file: Path, tmp_path: Path) -> ExperimentConfig:
    """Quick config on the synthetic rating file."""
    return ExperimentConfig(
        dataset=str(ratings_file),
        out=str(tmp_path / "runs"),
        epochs=2,
        factors=4,
        progress=False,
    )


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


class TestHelpers:
    """Tests for directory naming and model construction."""

    def test_run_directory_name(self, config: ExperimentConfig) -> None:
        path = run_directory(config.replace(seed=3), "run")
        assert path.name == "run-federank-ratings-seed3"
        assert path.is_dir()

    def test_profile_names_directory(self, config: ExperimentConfig) -> None:
        path = run_directory(config.replace(dataset_format="librarything"), "stats")
        assert path.name == "stats-federank-librarything-seed42"

    def test_builds_centralized_models(self, config: ExperimentConfig) -> None:
        assert isinstance(
            build_recommender(config.replace(algorithm="most_popular")), MostPopular
        )
        knn = build_recommender(config.replace(algorithm="item_knn", knn_neighbors=7))
        assert isinstance(knn, KNN)
        assert (knn.mode, knn.k) == ("item", 7)

    def test_federank_is_not_centralized(self, config: ExperimentConfig) -> None:
        with pytest.raises(ConfigError) as err:
            build_recommender(config)
        assert err.value.field == "algorithm"


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


class TestRunSingle:
    """Tests for one train-and-evaluate run."""

    def test_most_popular(self, config: ExperimentConfig) -> None:
        outcome = run_single(config.replace(algorithm="most_popular"))
        assert outcome.files == ["config.txt", "metrics.csv"]
        metrics = pd.read_csv(outcome.directory / "metrics.csv")
        assert list(metrics.columns) == [
            "algorithm",
            "dataset",
            "pi",
            "T",
            "P@10",
            "R@10",
            "F1@10",
            "IC@10",
            "G@10",
        ]
        assert metrics.loc[0, "algorithm"] == "most_popular"
        assert np.isnan(metrics.loc[0, "pi"])

    def test_federank_files(self, config: ExperimentConfig) -> None:
        outcome = run_single(config.replace(pi=0.5))
        for name in (
            "config.txt",
            "metrics.csv",
            "model.npz",
            "history.csv",
            "telemetry_rounds.csv",
            "item_updates.csv",
        ):
            assert (outcome.directory / name).exists(), name
        metrics = pd.read_csv(outcome.directory / "metrics.csv")
        assert metrics.loc[0, "pi"] == 0.5
        assert metrics.loc[0, "T"] == 1
        history = pd.read_csv(outcome.directory / "history.csv")
        assert list(history["epoch"]) == [1, 2]

    def test_checkpoint_contents(self, config: ExperimentConfig) -> None:
        outcome = run_single(config.replace(algorithm="bpr_mf"))
        with np.load(outcome.directory / "model.npz") as saved:
            assert saved["Q"].shape[1] == 4
            assert saved["P"].shape == (30, 4)
            assert int(saved["best_epoch"]) == outcome.model.best_epoch

    def test_config_written_back(self, config: ExperimentConfig) -> None:
        outcome = run_single(config.replace(algorithm="random"))
        text = (outcome.directory / "config.txt").read_text(encoding="utf-8")
        assert "algorithm = random" in text

    def test_save_split(self, config: ExperimentConfig) -> None:
        outcome = run_single(config.replace(algorithm="random", save_split=True))
        assert (outcome.directory / "split").is_dir()
        assert "split/" in outcome.files

    def test_federated_matches_centralized(self, config: ExperimentConfig) -> None:
        federated = run_single(config.replace(seed=11))
        central = run_single(config.replace(seed=11, algorithm="bpr_mf"))
        assert federated.report.precision_at_n == pytest.approx(
            central.report.precision_at_n
        )
        np.testing.assert_allclose(
            federated.model.server.Q, central.model.server.Q, rtol=1e-9
        )

    def test_missing_dataset(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError) as err:
            run_single(ExperimentConfig(out=str(tmp_path)))
        assert err.value.field == "dataset"

    def test_prepared_dataset(
        self, synthetic_dataset: InteractionDataset, tmp_path: Path
    ) -> None:
        config = ExperimentConfig(out=str(tmp_path), algorithm="user_knn")
        outcome = run_single(config, dataset=synthetic_dataset)
        assert outcome.directory.name == "run-user_knn-dataset-seed42"
        assert 0.0 <= outcome.report.precision_at_n <= 1.0


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


class TestRunSweep:
    """Tests for the pi x T grid."""

    def test_rows_and_files(self, config: ExperimentConfig) -> None:
        sweep = SweepSpec(pis=(0.0, 1.0), t_regimes=("1", "2"))
        rows = run_sweep(config.replace(epochs=1), sweep)
        assert [(r["t_mode"], r["pi"]) for r in rows] == sweep.cells()
        assert [r["T"] for r in rows] == [1, 1, 2, 2]

        directory = run_directory(config, "sweep")
        table = pd.read_csv(directory / "pi_sweep.csv")
        assert len(table) == 4
        updates = pd.read_csv(directory / "updates_freq.csv")
        assert list(updates.columns) == ["pi", "t_mode", "rank", "value"]
        assert set(updates["pi"]) == {0.0, 1.0}
        recs = pd.read_csv(directory / "rec_freq.csv")
        for _, group in recs.groupby(["pi", "t_mode"]):
            assert group["value"].sum() == pytest.approx(1.0)
        assert "F1@10" in table.columns

    def test_popularity_reference_curve(self, config: ExperimentConfig) -> None:
        sweep = SweepSpec(pis=(1.0,), t_regimes=("1",))
        run_sweep(config.replace(epochs=1), sweep)
        curve = pd.read_csv(run_directory(config, "sweep") / "popularity_freq.csv")
        assert list(curve.columns) == ["rank", "value"]
        counts = load_dataset(config).item_popularity()
        expected = np.sort(counts)[::-1] / counts.sum()
        np.testing.assert_allclose(curve["value"], expected[: len(curve)])
        assert list(curve["rank"]) == list(range(1, len(curve) + 1))

    def test_rerun_replaces_files(self, config: ExperimentConfig) -> None:
        sweep = SweepSpec(pis=(1.0,), t_regimes=("1",))
        run_sweep(config.replace(epochs=1), sweep)
        run_sweep(config.replace(epochs=1), sweep)
        table = pd.read_csv(run_directory(config, "sweep") / "pi_sweep.csv")
        assert len(table) == 1

    def test_forces_federank(self, config: ExperimentConfig) -> None:
        sweep = SweepSpec(pis=(1.0,), t_regimes=("1",))
        rows = run_sweep(config.replace(algorithm="bpr_mf", epochs=1), sweep)
        assert len(rows) == 1
        assert run_directory(config, "sweep").exists()

    def test_failed_cells_collected(
        self, config: ExperimentConfig, mocker: MockerFixture
    ) -> None:
        real_fit = experiments.fit_model

        def flaky(cfg, dataset, t_mode=None, pi=None):
            if pi == 0.0:
                raise DivergenceError("non-finite item factors")
            return real_fit(cfg, dataset, t_mode=t_mode, pi=pi)

        mocker.patch("federank.experiments.fit_model", side_effect=flaky)
        sweep = SweepSpec(pis=(0.0, 1.0), t_regimes=("1",))
        with pytest.raises(SweepError) as err:
            run_sweep(config.replace(epochs=1), sweep)
        assert [cell for cell, _ in err.value.failures] == ["T=1 pi=0.00"]
        table = pd.read_csv(run_directory(config, "sweep") / "pi_sweep.csv")
        assert list(table["pi"]) == [1.0]

    def test_unexpected_errors_recorded(
        self, config: ExperimentConfig, mocker: MockerFixture
    ) -> None:
        real_fit = experiments.fit_model

        def broken(cfg, dataset, t_mode=None, pi=None):
            if pi == 0.0:
                raise ValueError("shapes do not align")
            return real_fit(cfg, dataset, t_mode=t_mode, pi=pi)

        mocker.patch("federank.experiments.fit_model", side_effect=broken)
        sweep = SweepSpec(pis=(0.0, 1.0), t_regimes=("1",))
        with pytest.raises(SweepError) as err:
            run_sweep(config.replace(epochs=1), sweep)
        ((cell, message),) = err.value.failures
        assert cell == "T=1 pi=0.00"
        assert message == "ValueError: shapes do not align"
        table = pd.read_csv(run_directory(config, "sweep") / "pi_sweep.csv")
        assert list(table["pi"]) == [1.0]


# ---------------------------------------------------------------------------
# Learning-rate search
# ---------------------------------------------------------------------------


class TestHyperparameterSearch:
    """Tests for picking alpha by validation P@N."""

    @pytest.fixture
    def fake_fit(self, mocker: MockerFixture) -> MagicMock:
        return mocker.patch(
            "federank.experiments.fit_model",
            return_value=FittedModel(scorer=MagicMock()),
        )

    def test_ties_go_to_smaller_alpha(
        self, config: ExperimentConfig, fake_fit: MagicMock, mocker: MockerFixture
    ) -> None:
        mocker.patch("federank.experiments.validation_precision", return_value=0.25)
        result = hyperparameter_search(config, alpha_grid=[0.1, 0.01, 0.05])
        assert [a for a, _ in result.grid] == [0.01, 0.05, 0.1]
        assert result.best_alpha == 0.01

    def test_strictly_better_wins(
        self, config: ExperimentConfig, fake_fit: MagicMock, mocker: MockerFixture
    ) -> None:
        mocker.patch(
            "federank.experiments.validation_precision",
            side_effect=[0.2, 0.4, 0.4],
        )
        result = hyperparameter_search(config, alpha_grid=[0.01, 0.05, 0.1])
        assert result.best_alpha == 0.05
        fitted_alphas = [call.args[0].alpha for call in fake_fit.call_args_list]
        assert fitted_alphas == [0.01, 0.05, 0.1]

    def test_search_file(
        self, config: ExperimentConfig, fake_fit: MagicMock, mocker: MockerFixture
    ) -> None:
        mocker.patch("federank.experiments.validation_precision", return_value=0.1)
        result = hyperparameter_search(config, alpha_grid=[0.05])
        table = pd.read_csv(result.directory / "search.csv")
        assert list(table.columns) == ["alpha", "validation_precision"]
        assert result.best_alpha == 0.05

    def test_real_search(self, config: ExperimentConfig) -> None:
        result = hyperparameter_search(
            config.replace(algorithm="bpr_mf", epochs=1), alpha_grid=[0.01, 0.1]
        )
        assert result.best_alpha in (0.01, 0.1)
        assert len(result.grid) == 2

    def test_empty_grid(self, config: ExperimentConfig) -> None:
        with pytest.raises(ConfigError) as err:
            hyperparameter_search(config, alpha_grid=[])
        assert err.value.field == "alpha_grid"

    def test_untunable_algorithm(self, config: ExperimentConfig) -> None:
        with pytest.raises(ConfigError) as err:
            hyperparameter_search(config.replace(algorithm="most_popular"))
        assert err.value.field == "algorithm"


# ---------------------------------------------------------------------------
# Audit and stats
# ---------------------------------------------------------------------------


class TestAuditAndStats:
    """Tests for the audit and stats subcommands."""

    def test_audit_csv(self, config: ExperimentConfig) -> None:
        rows = run_audit(config.replace(pi_grid=(0.0, 1.0), audit_rounds=50))
        assert [row.pi for row in rows] == [0.0, 1.0]
        table = pd.read_csv(run_directory(config, "audit") / "audit.csv")
        assert list(table["rounds"]) == [50, 50]

    def test_stats(self, config: ExperimentConfig) -> None:
        stats, expected = run_stats(config)
        assert stats.n_users == 30
        assert expected is None
        assert (run_directory(config, "stats") / "stats.csv").exists()

    def test_stats_mismatch_warns(
        self,
        synthetic_dataset: InteractionDataset,
        tmp_path: Path,
        caplog: pytest.LogCaptureFixture,
    ) -> None:
        config = ExperimentConfig(out=str(tmp_path), dataset_format="movielens_1m")
        with caplog.at_level(logging.WARNING, logger="federank"):
            _, expected = run_stats(config, dataset=synthetic_dataset)
        assert expected == {"n_users": 6040, "n_items": 3706, "n_positive": 1000209}
        assert "n_users" in caplog.text
