"""Checks against the public datasets.

Each profile's rating file is looked up as ``<profile>.*`` in the
directory named by ``FEDERANK_DATA_DIR``; the tests are skipped when the
variable or the file is missing.

Tests cover:
- users, items and positives after the 20-rating filter
- MovieLens 1M coverage and accuracy with no positive feedback shared
"""

import os
from pathlib import Path

import pytest

from federank.baselines import RandomRecommender
from federank.config import PER_USER_AVG, ExperimentConfig
from federank.data import (
    DATASET_PROFILES,
    InteractionDataset,
    compute_stats,
    expected_counts,
    prepare_dataset,
)
from federank.evaluation import evaluate
from federank.experiments import fit_model

DATA_DIR = os.environ.get("FEDERANK_DATA_DIR")

pytestmark = pytest.mark.skipif(not DATA_DIR, reason="FEDERANK_DATA_DIR not set")


def _find(profile: str) -> Path:
    matches = sorted(Path(DATA_DIR or ".").glob(f"{profile}.*"))
    if not matches:
        pytest.skip(f"no {profile} file in {DATA_DIR}")
    return matches[0]


def _load(profile: str) -> InteractionDataset:
    fmt = DATASET_PROFILES[profile]
    return prepare_dataset(_find(profile), fmt["columns"], fmt["separator"])


class TestPublishedCounts:
    """Tests for users, items and positives after the 20-rating filter."""

    @pytest.mark.parametrize("profile", sorted(DATASET_PROFILES))
    def test_counts(self, profile: str) -> None:
        stats = compute_stats(_load(profile))
        assert {
            "n_users": stats.n_users,
            "n_items": stats.n_items,
            "n_positive": stats.n_positive,
        } == expected_counts(profile)


class TestNoSharing:
    """Tests for pi = 0, where only negative-item rows leave the clients."""

    def test_close_to_random(self, tmp_path: Path) -> None:
        dataset = _load("movielens_1m")
        config = ExperimentConfig(
            t_mode=PER_USER_AVG,
            pi=0.0,
            out=str(tmp_path),
            record_rounds=False,
            progress=False,
        )
        no_sharing = evaluate(fit_model(config, dataset).scorer, dataset)
        random = evaluate(RandomRecommender(seed=config.seed).fit(dataset), dataset)
        assert no_sharing.item_coverage >= random.item_coverage / 2
        assert random.precision_at_n / 10 <= no_sharing.precision_at_n
        assert no_sharing.precision_at_n <= 10 * random.precision_at_n
