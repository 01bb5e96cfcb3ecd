"""Shared pytest fixtures for federank tests."""

import io
import logging
from pathlib import Path

import numpy as np
import pytest
from rich.console import Console

from federank.data import (
    InteractionDataset,
    RawRating,
    UserInteractions,
    temporal_split,
)
from federank.model import ClientState, Regularization, ServerModel


def make_ratings(
    n_users: int = 50,
    n_items: int = 40,
    per_user: int = 25,
    seed: int = 0,
) -> list[RawRating]:
    """Synthetic ratings: distinct items per user, strictly increasing times.

    Item popularity is skewed so popularity-based models have signal.
    """
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, n_items + 1)
    weights /= weights.sum()
    records = []
    for u in range(n_users):
        items = rng.choice(n_items, size=per_user, replace=False, p=weights)
        for t, item in enumerate(items):
            records.append(RawRating(f"u{u}", f"i{item}", 4.0, 1000 * u + t))
    return records


def make_dataset(**kwargs: int) -> InteractionDataset:
    return temporal_split(make_ratings(**kwargs))


def make_toy_dataset(
    train_items: list[list[int]], n_items: int = 4
) -> InteractionDataset:
    """Users with the given train items and empty held-out splits."""
    empty = UserInteractions(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    train = tuple(
        UserInteractions(np.array(items, dtype=np.int64), np.arange(len(items)))
        for items in train_items
    )
    return InteractionDataset(
        user_ids=tuple(f"u{u}" for u in range(len(train_items))),
        item_ids=tuple(f"i{i}" for i in range(n_items)),
        train=train,
        validation=(empty,) * len(train_items),
        test=(empty,) * len(train_items),
    )


@pytest.fixture
def synthetic_dataset() -> InteractionDataset:
    """50 users x 40 items, 25 interactions each (16 train, 4 validation, 5 test)."""
    return make_dataset()


@pytest.fixture
def small_dataset() -> InteractionDataset:
    """12 users x 30 items, small enough for exhaustive checks."""
    return make_dataset(n_users=12, n_items=30, per_user=10, seed=3)


@pytest.fixture
def ratings_file(tmp_path: Path) -> Path:
    """Tab-separated rating file of the synthetic dataset."""
    path = tmp_path / "ratings.tsv"
    lines = [
        f"{r.user}\t{r.item}\t{r.rating}\t{r.timestamp}"
        for r in make_ratings(n_users=30, n_items=40, per_user=25)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def server_model() -> ServerModel:
    """Random 6-item, 4-factor server model."""
    rng = np.random.default_rng(7)
    return ServerModel(Q=rng.normal(0, 0.5, (6, 4)), b=rng.normal(0, 0.5, 6))


@pytest.fixture
def client() -> ClientState:
    """Client 0 that consumed items 0, 2 and 3."""
    rng = np.random.default_rng(8)
    return ClientState(user_id=0, p=rng.normal(0, 0.5, 4), consumed=np.array([0, 2, 3]))


@pytest.fixture
def reg() -> Regularization:
    return Regularization.from_learning_rate(0.05)


@pytest.fixture
def buffer_console() -> Console:
    """Real console that writes to a string buffer."""
    return Console(file=io.StringIO(), width=120, force_terminal=False)


@pytest.fixture(autouse=True)
def _reset_package_logger():
    """Undo configure_logging so caplog sees records in every test."""
    logger = logging.getLogger("federank")
    yield
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.setLevel(logging.NOTSET)
    logger.propagate = True
