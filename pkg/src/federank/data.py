"""Interaction data: ingestion, implicit-feedback filtering and temporal splits.

Ratings arrive as delimited text with a configurable column order. Every
rating counts as a consumption signal (x_ui = 1), cold users are dropped,
and each remaining user's history is cut in time into train, validation
and test.

Packaged defaults and dataset profiles are loaded from the ``assets/``
subpackage with ``importlib.resources`` so they work from installed
packages and editable installs alike.
"""

import json
import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import pandas as pd
from scipy import sparse

from federank.errors import DatasetError, DatasetParseError, EmptyDatasetError

logger = logging.getLogger(__name__)

# canonical record layout; also the default column order of input files
RATING_COLUMNS: tuple[str, ...] = ("user", "item", "rating", "timestamp")

SPLITS: tuple[str, ...] = ("train", "validation", "test")

# ---------------------------------------------------------------------------
# Packaged assets
# ---------------------------------------------------------------------------


def _load_json(filename: str) -> Any:
    """Load a JSON document from the assets directory.

    Args:
        filename: JSON file name inside the assets package.

    Returns:
        The parsed JSON value.

    Raises:
        FileNotFoundError: If the asset file doesn't exist.
        json.JSONDecodeError: If the file contains invalid JSON.
    """
    source = resources.files("federank.assets").joinpath(filename)
    return json.loads(source.read_text(encoding="utf-8"))


# default experiment settings, overridden by config files and CLI flags
DEFAULTS: dict[str, Any] = _load_json("defaults.json")

# separator, column order and expected post-filter counts per public dataset
DATASET_PROFILES: dict[str, dict[str, Any]] = _load_json("datasets.json")


# ---------------------------------------------------------------------------
# Records and datasets
# ---------------------------------------------------------------------------


class RawRating(NamedTuple):
    """One input rating row."""

    user: str
    item: str
    rating: float
    timestamp: int


class UserInteractions(NamedTuple):
    """One user's interactions in one split, sorted by (timestamp, item)."""

    items: np.ndarray
    timestamps: np.ndarray


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Binary user x item feedback split in time per user.

    Attributes:
        user_ids: External user id of every dense user index.
        item_ids: External item id of every dense item index.
        train: Per-user training interactions.
        validation: Per-user validation interactions.
        test: Per-user test interactions.
    """

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    train: tuple[UserInteractions, ...]
    validation: tuple[UserInteractions, ...]
    test: tuple[UserInteractions, ...]

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @cached_property
    def x_plus(self) -> int:
        """Total number of train positives."""
        return int(sum(len(row.items) for row in self.train))

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {user: idx for idx, user in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {item: idx for idx, item in enumerate(self.item_ids)}

    @cached_property
    def _consumed(self) -> tuple[np.ndarray, ...]:
        return tuple(np.unique(row.items) for row in self.train)

    def consumed(self, user: int) -> np.ndarray:
        """Sorted train items of a user (the private x_u of its client)."""
        return self._consumed[user]

    def split(self, name: str) -> tuple[UserInteractions, ...]:
        """Return the per-user interactions of ``train``, ``validation`` or ``test``.

        Raises:
            KeyError: For an unknown split name.
        """
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def items_in(self, user: int, splits: Sequence[str]) -> np.ndarray:
        """Concatenated items of a user across the named splits."""
        parts = [self.split(name)[user].items for name in splits]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def profile_sizes(self) -> np.ndarray:
        """Number of train positives per user."""
        return np.array([len(row.items) for row in self.train], dtype=np.int64)

    def item_popularity(self) -> np.ndarray:
        """Number of train positives per item."""
        items = [row.items for row in self.train]
        flat = np.concatenate(items) if items else np.empty(0, dtype=np.int64)
        return np.bincount(flat, minlength=self.n_items)

    def interaction_matrix(
        self, splits: Sequence[str] = ("train",)
    ) -> sparse.csr_matrix:
        """Binary users x items CSR matrix over the named splits."""
        rows, cols = [], []
        for name in splits:
            for user, row in enumerate(self.split(name)):
                rows.append(np.full(len(row.items), user, dtype=np.int64))
                cols.append(row.items)
        if rows:
            r, c = np.concatenate(rows), np.concatenate(cols)
        else:
            r = c = np.empty(0, dtype=np.int64)
        matrix = sparse.csr_matrix(
            (np.ones(len(r)), (r, c)), shape=(self.n_users, self.n_items)
        )
        # duplicates across splits cannot happen, but keep the matrix binary
        matrix.data[:] = 1.0
        return matrix


@dataclass(frozen=True)
class DatasetStats:
    """Dataset characteristics over all splits of the filtered data."""

    n_users: int
    n_items: int
    n_positive: int
    ratings_per_user: float
    ratings_per_item: float
    density_percent: float

    def as_row(self) -> dict[str, float | int]:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_positive": self.n_positive,
            "ratings_per_user": self.ratings_per_user,
            "ratings_per_item": self.ratings_per_item,
            "density_percent": self.density_percent,
        }


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def ratings_frame(records: Iterable[RawRating]) -> pd.DataFrame:
    """Build the canonical rating frame from in-memory records."""
    frame = pd.DataFrame(list(records), columns=list(RATING_COLUMNS))
    return _normalize_dtypes(frame)


def as_records(frame: pd.DataFrame) -> list[RawRating]:
    """Turn a rating frame back into ``RawRating`` records."""
    return [RawRating._make(row) for row in frame.itertuples(index=False)]


def _normalize_dtypes(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.astype(
        {"user": str, "item": str, "rating": float, "timestamp": np.int64}
    )


def _as_frame(ratings: pd.DataFrame | Iterable[RawRating]) -> pd.DataFrame:
    if isinstance(ratings, pd.DataFrame):
        return ratings
    return ratings_frame(ratings)


def _check_field_counts(path: Path, n_fields: int, separator: str) -> None:
    """Reject non-blank lines whose field count differs from ``n_fields``."""
    lines = pd.Series(path.read_text(errors="replace").splitlines(), dtype=str)
    counts = lines.str.count(re.escape(separator)) + 1
    wrong = (counts != n_fields) & (lines.str.strip() != "")
    if wrong.any():
        first = int(wrong.idxmax())
        raise DatasetParseError(
            f"{path}: {int(wrong.sum())} line(s) without {n_fields} fields; "
            f"first at line {first + 1}: {lines[first]!r}"
        )


def load_tsv(
    path: str | Path,
    column_order: Sequence[str] = RATING_COLUMNS,
    separator: str = "\t",
) -> pd.DataFrame:
    """Parse a delimited rating file, one record per line.

    Columns named outside ``RATING_COLUMNS`` are read and discarded. A
    missing ``rating`` column defaults every rating to 1.

    Args:
        path: Text file to read.
        column_order: Field name of every column, in file order.
        separator: Field delimiter (multi-character delimiters allowed).

    Returns:
        A frame with columns ``user, item, rating, timestamp`` in file order.

    Raises:
        FileNotFoundError: If the file doesn't exist.
        DatasetError: If ``column_order`` lacks user, item or timestamp.
        DatasetParseError: On wrong field counts or non-numeric rating or
            timestamp values; the message names the number of bad lines
            and the first one.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"rating file not found: {path}")

    missing = {"user", "item", "timestamp"} - set(column_order)
    if missing:
        raise DatasetError(f"column order lacks {sorted(missing)}")
    if len(set(column_order)) != len(column_order):
        raise DatasetError(f"duplicate column names in {list(column_order)}")

    if path.stat().st_size == 0:
        logger.warning("%s is empty", path)
        return ratings_frame([])

    _check_field_counts(path, len(column_order), separator)

    try:
        raw = pd.read_csv(
            path,
            sep=separator,
            header=None,
            names=list(column_order),
            index_col=False,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            engine="python" if len(separator) > 1 else "c",
        )
    except pd.errors.ParserError as exc:
        raise DatasetParseError(f"{path}: {exc}") from exc

    # line numbers are 1-based row positions; blank lines are skipped after
    raw.index = pd.RangeIndex(1, len(raw) + 1)
    raw = raw.fillna("")
    raw = raw[(raw != "").any(axis=1)]
    if raw.empty:
        logger.warning("%s has no records", path)
        return ratings_frame([])

    timestamps = pd.to_numeric(raw["timestamp"], errors="coerce")
    if "rating" in raw:
        ratings = pd.to_numeric(raw["rating"], errors="coerce")
    else:
        ratings = pd.Series(1.0, index=raw.index)

    bad = (
        timestamps.isna()
        | (timestamps < 0)
        | (timestamps != np.floor(timestamps))
        | ratings.isna()
        | (raw["user"] == "")
        | (raw["item"] == "")
    )
    if bad.any():
        first = int(bad.idxmax())
        fields = separator.join(raw.loc[first].tolist())
        raise DatasetParseError(
            f"{path}: {int(bad.sum())} malformed line(s); "
            f"first at line {first}: {fields!r}"
        )

    frame = pd.DataFrame(
        {
            "user": raw["user"].to_numpy(),
            "item": raw["item"].to_numpy(),
            "rating": ratings.to_numpy(dtype=float),
            "timestamp": timestamps.to_numpy().astype(np.int64),
        }
    )
    logger.debug("parsed %d ratings from %s", len(frame), path)
    return frame


# ---------------------------------------------------------------------------
# Filtering and splitting
# ---------------------------------------------------------------------------


def binarize_and_filter(
    ratings: pd.DataFrame | Iterable[RawRating],
    min_ratings_per_user: int = 20,
) -> pd.DataFrame:
    """Collapse ratings to implicit feedback and drop cold users.

    Duplicate (user, item) pairs keep their earliest timestamp, every
    record becomes a positive (rating 1), then users with fewer than
    ``min_ratings_per_user`` records are removed. File order is kept.

    Raises:
        ValueError: If ``min_ratings_per_user`` < 1.
        EmptyDatasetError: If no user survives the filter.
    """
    if min_ratings_per_user < 1:
        raise ValueError(
            f"min_ratings_per_user must be >= 1, got {min_ratings_per_user}"
        )

    frame = _as_frame(ratings)
    frame = (
        frame.sort_values("timestamp", kind="stable")
        .drop_duplicates(["user", "item"], keep="first")
        .sort_index()
        .assign(rating=1.0)
    )
    counts = frame.groupby("user", sort=False)["item"].transform("size")
    kept = frame[counts >= min_ratings_per_user].reset_index(drop=True)
    if kept.empty:
        raise EmptyDatasetError(
            f"no user has at least {min_ratings_per_user} ratings"
        )

    dropped = frame["user"].nunique() - kept["user"].nunique()
    if dropped:
        logger.info(
            "dropped %d user(s) with fewer than %d ratings",
            dropped,
            min_ratings_per_user,
        )
    return kept


def sample_users(frame: pd.DataFrame, fraction: float, seed: int) -> pd.DataFrame:
    """Keep a seeded random fraction of the users (for smoke runs)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return frame
    users = frame["user"].drop_duplicates().to_numpy()
    n_keep = max(1, round(len(users) * fraction))
    keep = np.random.default_rng(seed).choice(users, size=n_keep, replace=False)
    return frame[frame["user"].isin(keep)].reset_index(drop=True)


def _holdout_size(n: np.ndarray, fraction: float) -> np.ndarray:
    # round first so that e.g. 0.2 * 15 does not ceil to 4
    return np.ceil(np.round(n * fraction, 9)).astype(np.int64)


def split_sizes(
    n: np.ndarray | int,
    train_fraction: float = 0.8,
    validation_fraction: float = 0.2,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train, validation and test sizes for users with ``n`` interactions."""
    n = np.asarray(n, dtype=np.int64)
    n_test = _holdout_size(n, round(1.0 - train_fraction, 12))
    rest = n - n_test
    n_validation = _holdout_size(rest, validation_fraction)
    return rest - n_validation, n_validation, n_test


def temporal_split(
    ratings: pd.DataFrame | Iterable[RawRating],
    train_fraction: float = 0.8,
    validation_fraction: float = 0.2,
) -> InteractionDataset:
    """Split every user's history in time.

    Per user, records are ordered by timestamp, ties by external item id
    compared as text, so the split does not depend on file order;
    the last ceil((1 - train_fraction) * n) go to test, the last
    ceil(validation_fraction * rest) of the remainder go to validation,
    everything earlier is train. Users left without train data are
    dropped before ids are assigned, so dense ids follow first appearance
    among the kept records.

    Raises:
        ValueError: If a fraction is outside (0, 1).
        EmptyDatasetError: If no user keeps any train data.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError(
            f"validation_fraction must be in (0, 1), got {validation_fraction}"
        )

    frame = _as_frame(ratings)
    if frame.empty:
        raise EmptyDatasetError("no ratings to split")

    sizes = frame.groupby("user", sort=False)["item"].size()
    n_train, _, _ = split_sizes(sizes.to_numpy(), train_fraction, validation_fraction)
    empty_train = sizes.index[n_train <= 0]
    if len(empty_train):
        logger.warning(
            "dropped %d user(s) left without train data by the split",
            len(empty_train),
        )
        frame = frame[~frame["user"].isin(empty_train)]
    if frame.empty:
        raise EmptyDatasetError("every user lost its train data in the split")

    user_codes, user_ids = pd.factorize(frame["user"], sort=False)
    item_codes, item_ids = pd.factorize(frame["item"], sort=False)
    tie_break, _ = pd.factorize(frame["item"].astype(str), sort=True)
    timestamps = frame["timestamp"].to_numpy(dtype=np.int64)

    order = np.lexsort((tie_break, timestamps, user_codes))
    users = user_codes[order]
    items = item_codes[order].astype(np.int64)
    times = timestamps[order]

    bounds = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [len(users)]))
    n_train, n_validation, _ = split_sizes(
        ends - starts, train_fraction, validation_fraction
    )

    train, validation, test = [], [], []
    for start, end, k_train, k_val in zip(
        starts, ends, n_train, n_validation, strict=True
    ):
        cut_val = start + k_train
        cut_test = cut_val + k_val
        train.append(UserInteractions(items[start:cut_val], times[start:cut_val]))
        validation.append(
            UserInteractions(items[cut_val:cut_test], times[cut_val:cut_test])
        )
        test.append(UserInteractions(items[cut_test:end], times[cut_test:end]))

    return InteractionDataset(
        user_ids=tuple(str(u) for u in user_ids),
        item_ids=tuple(str(i) for i in item_ids),
        train=tuple(train),
        validation=tuple(validation),
        test=tuple(test),
    )


def compute_stats(dataset: InteractionDataset) -> DatasetStats:
    """Characteristics over train + validation + test positives."""
    n_positive = sum(
        len(row.items) for name in SPLITS for row in dataset.split(name)
    )
    n_users, n_items = dataset.n_users, dataset.n_items
    return DatasetStats(
        n_users=n_users,
        n_items=n_items,
        n_positive=n_positive,
        ratings_per_user=n_positive / n_users,
        ratings_per_item=n_positive / n_items,
        density_percent=100.0 * n_positive / (n_users * n_items),
    )


def prepare_dataset(
    path: str | Path,
    column_order: Sequence[str] = RATING_COLUMNS,
    separator: str = "\t",
    min_ratings_per_user: int = 20,
    train_fraction: float = 0.8,
    validation_fraction: float = 0.2,
    user_fraction: float = 1.0,
    seed: int = 0,
) -> InteractionDataset:
    """Load, filter and split a rating file in one call."""
    frame = load_tsv(path, column_order, separator)
    frame = binarize_and_filter(frame, min_ratings_per_user)
    frame = sample_users(frame, user_fraction, seed)
    dataset = temporal_split(frame, train_fraction, validation_fraction)
    logger.info(
        "loaded %s: %d users, %d items, %d train positives",
        Path(path).name,
        dataset.n_users,
        dataset.n_items,
        dataset.x_plus,
    )
    return dataset


# ---------------------------------------------------------------------------
# Split manifest
# ---------------------------------------------------------------------------


def save_split(dataset: InteractionDataset, directory: str | Path) -> Path:
    """Persist the split as ``train/validation/test.tsv`` plus ``stats.csv``.

    Each split file holds ``user, item, timestamp`` rows with external ids;
    ``items.txt`` keeps the catalog order so :func:`load_split` restores
    the exact dense ids.

    Returns:
        The directory written to.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    users = np.asarray(dataset.user_ids, dtype=object)
    items = np.asarray(dataset.item_ids, dtype=object)
    for name in SPLITS:
        rows = dataset.split(name)
        user_col = np.repeat(np.arange(dataset.n_users), [len(r.items) for r in rows])
        item_col = np.concatenate([r.items for r in rows])
        time_col = np.concatenate([r.timestamps for r in rows])
        pd.DataFrame(
            {
                "user": users[user_col],
                "item": items[item_col.astype(np.int64)],
                "timestamp": time_col,
            }
        ).to_csv(directory / f"{name}.tsv", sep="\t", header=False, index=False)
    (directory / "items.txt").write_text(
        "\n".join(dataset.item_ids) + "\n", encoding="utf-8"
    )
    pd.DataFrame([compute_stats(dataset).as_row()]).to_csv(
        directory / "stats.csv", index=False
    )
    return directory


def load_split(directory: str | Path) -> InteractionDataset:
    """Read back a split written by :func:`save_split`."""
    directory = Path(directory)
    item_ids = tuple(
        (directory / "items.txt").read_text(encoding="utf-8").splitlines()
    )
    item_index = {item: idx for idx, item in enumerate(item_ids)}
    frames = {
        name: pd.read_csv(
            directory / f"{name}.tsv",
            sep="\t",
            header=None,
            names=["user", "item", "timestamp"],
            dtype={"user": str, "item": str, "timestamp": np.int64},
            keep_default_na=False,
        )
        for name in SPLITS
    }
    user_ids = tuple(pd.unique(frames["train"]["user"]))
    user_index = {user: idx for idx, user in enumerate(user_ids)}

    splits: dict[str, list[UserInteractions]] = {}
    for name, frame in frames.items():
        grouped = {
            user_index[user]: group
            for user, group in frame.groupby("user", sort=False)
        }
        rows = []
        for user in range(len(user_ids)):
            group = grouped.get(user)
            if group is None:
                empty = np.empty(0, dtype=np.int64)
                rows.append(UserInteractions(empty, empty.copy()))
                continue
            rows.append(
                UserInteractions(
                    group["item"].map(item_index).to_numpy(dtype=np.int64),
                    group["timestamp"].to_numpy(dtype=np.int64),
                )
            )
        splits[name] = rows

    return InteractionDataset(
        user_ids=user_ids,
        item_ids=item_ids,
        train=tuple(splits["train"]),
        validation=tuple(splits["validation"]),
        test=tuple(splits["test"]),
    )


def expected_counts(profile: str) -> dict[str, int] | None:
    """Published post-filter counts of a known dataset profile."""
    entry = DATASET_PROFILES.get(profile)
    return None if entry is None else dict(entry["expected"])
