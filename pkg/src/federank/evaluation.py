"""Top-N recommendation lists and the accuracy/diversity metrics.

Lists exclude what the user already gave to the model: train items at
validation time, train and validation items at test time. Scores are
ranked descending with ties broken by ascending item id, so a list is a
pure function of the scores.

Metrics:
- P@N and R@N, averaged over users with a non-empty ground truth
- IC@N, the number of distinct recommended items
- Gini diversity, one minus the Gini index of the per-item
  recommendation counts over the whole catalog (zeros included)
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from federank.data import InteractionDataset
from federank.errors import MetricError

logger = logging.getLogger(__name__)

# what each evaluation split hides from the candidate lists
_EXCLUDED_SPLITS: dict[str, tuple[str, ...]] = {
    "validation": ("train",),
    "test": ("train", "validation"),
}


@runtime_checkable
class Scorer(Protocol):
    """Anything that scores the whole catalog for one user."""

    name: str

    def score_user(self, user: int) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class TopNLists:
    """Per-user ordered recommendation lists.

    Attributes:
        lists: Item ids per dense user index, best first.
        n: Requested list length.
    """

    lists: tuple[np.ndarray, ...]
    n: int

    def __len__(self) -> int:
        return len(self.lists)

    def __getitem__(self, user: int) -> np.ndarray:
        return self.lists[user]


@dataclass(frozen=True, eq=False)
class MetricReport:
    """Accuracy and diversity of one set of lists."""

    precision_at_n: float
    recall_at_n: float
    item_coverage: int
    gini: float
    n: int
    per_item_rec_counts: np.ndarray

    @property
    def f1_at_n(self) -> float:
        """Harmonic mean of P@N and R@N; 0 when both are 0."""
        total = self.precision_at_n + self.recall_at_n
        if total == 0:
            return 0.0
        return 2 * self.precision_at_n * self.recall_at_n / total

    def as_row(self) -> dict[str, float | int]:
        n = self.n
        return {
            f"P@{n}": self.precision_at_n,
            f"R@{n}": self.recall_at_n,
            f"F1@{n}": self.f1_at_n,
            f"IC@{n}": self.item_coverage,
            f"G@{n}": self.gini,
        }


# ---------------------------------------------------------------------------
# List generation
# ---------------------------------------------------------------------------


def rank_items(scores: np.ndarray, excluded: np.ndarray, n: int) -> np.ndarray:
    """Top ``n`` items by score, skipping ``excluded``; ties by item id.

    Args:
        scores: One score per catalog item.
        excluded: Item ids that must not appear.
        n: Maximum list length.

    Returns:
        At most ``n`` item ids, best first.
    """
    scores = np.asarray(scores, dtype=float)
    allowed = np.ones(len(scores), dtype=bool)
    allowed[excluded] = False
    candidates = np.flatnonzero(allowed)
    cand_scores = scores[candidates]
    cand_scores = np.where(np.isnan(cand_scores), -np.inf, cand_scores)

    k = min(n, len(candidates))
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k < len(candidates):
        # keep everything tied with the k-th best so the id tie-break is exact
        threshold = np.partition(cand_scores, len(cand_scores) - k)[-k]
        keep = cand_scores >= threshold
        candidates, cand_scores = candidates[keep], cand_scores[keep]
    order = np.lexsort((candidates, -cand_scores))[:k]
    return candidates[order].astype(np.int64)


def top_n(
    scorer: Scorer,
    dataset: InteractionDataset,
    n: int = 10,
    exclude: Sequence[str] = ("train",),
) -> TopNLists:
    """Build every user's top-``n`` list, hiding the items of ``exclude`` splits."""
    lists = tuple(
        rank_items(scorer.score_user(user), dataset.items_in(user, exclude), n)
        for user in range(dataset.n_users)
    )
    return TopNLists(lists=lists, n=n)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def precision_recall(
    lists: TopNLists,
    relevant: Sequence[np.ndarray],
    n: int | None = None,
) -> tuple[float, float]:
    """Mean P@N (hits / N) and R@N (hits / |relevant|).

    Users without relevant items are left out of both means.

    Raises:
        MetricError: If no user has relevant items.
    """
    n = lists.n if n is None else n
    precision_sum = recall_sum = 0.0
    evaluable = 0
    for user, truth in enumerate(relevant):
        if len(truth) == 0:
            continue
        hits = int(np.isin(lists[user][:n], truth).sum())
        precision_sum += hits / n
        recall_sum += hits / len(truth)
        evaluable += 1
    if evaluable == 0:
        raise MetricError("no user has ground-truth items")
    return precision_sum / evaluable, recall_sum / evaluable


def item_coverage(lists: TopNLists) -> int:
    """Number of distinct items recommended to anyone."""
    if not len(lists):
        return 0
    return int(len(np.unique(np.concatenate(lists.lists))))


def recommendation_counts(lists: TopNLists, n_items: int) -> np.ndarray:
    """How many lists each catalog item appears in."""
    if not len(lists):
        return np.zeros(n_items, dtype=np.int64)
    return np.bincount(np.concatenate(lists.lists), minlength=n_items)


def gini_diversity(lists: TopNLists, catalog_size: int) -> float:
    """One minus the Gini index of recommendation counts over the catalog.

    With p_k the count shares sorted ascending over all ``catalog_size``
    items, G = sum_k (2k - |I| - 1) p_k / (|I| - 1); the result is 1 - G.

    Raises:
        MetricError: If the lists recommend nothing.
    """
    counts = recommendation_counts(lists, catalog_size).astype(float)
    total = counts.sum()
    if total == 0:
        raise MetricError("no recommendations to measure")
    if catalog_size == 1:
        return 1.0
    shares = np.sort(counts) / total
    ranks = np.arange(1, catalog_size + 1)
    inequality = float(((2 * ranks - catalog_size - 1) * shares).sum())
    return 1.0 - inequality / (catalog_size - 1)


def frequency_curves(
    counts: np.ndarray | Mapping[int, int],
    top_k: int = 1000,
) -> list[tuple[int, float]]:
    """Counts sorted descending, cut to ``top_k``, as shares of the total.

    Returns:
        ``(rank, share)`` pairs with 1-based ranks.

    Raises:
        MetricError: If every count is zero.
    """
    if isinstance(counts, Mapping):
        counts = np.fromiter(counts.values(), dtype=float, count=len(counts))
    values = np.sort(np.asarray(counts, dtype=float))[::-1]
    total = values.sum()
    if total == 0:
        raise MetricError("all counts are zero")
    head = values[:top_k] / total
    return [(rank, float(share)) for rank, share in enumerate(head, start=1)]


# ---------------------------------------------------------------------------
# One-call evaluation
# ---------------------------------------------------------------------------


def evaluate(
    scorer: Scorer,
    dataset: InteractionDataset,
    n: int = 10,
    split: str = "test",
) -> MetricReport:
    """Build lists for ``split`` and compute every metric.

    Raises:
        KeyError: If ``split`` is neither ``validation`` nor ``test``.
    """
    lists = top_n(scorer, dataset, n, exclude=_EXCLUDED_SPLITS[split])
    relevant = [row.items for row in dataset.split(split)]
    precision, recall = precision_recall(lists, relevant, n)
    return MetricReport(
        precision_at_n=precision,
        recall_at_n=recall,
        item_coverage=item_coverage(lists),
        gini=gini_diversity(lists, dataset.n_items),
        n=n,
        per_item_rec_counts=recommendation_counts(lists, dataset.n_items),
    )


def validation_precision(
    scorer: Scorer, dataset: InteractionDataset, n: int = 10
) -> float:
    """P@N on the validation split, the model-selection criterion."""
    lists = top_n(scorer, dataset, n, exclude=_EXCLUDED_SPLITS["validation"])
    relevant = [row.items for row in dataset.validation]
    precision, _ = precision_recall(lists, relevant, n)
    return precision
