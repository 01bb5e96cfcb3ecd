"""Centralized reference recommenders.

- ``RandomRecommender``: i.i.d. uniform scores, fixed by the seed
- ``MostPopular``: train popularity, the same for every user
- ``BPRMF``: centralized pair-wise factorization trained with plain SGD
- ``KNN``: user- or item-based neighborhood model over cosine similarity

Every recommender exposes ``fit(dataset)`` and ``score_user(user)`` so the
evaluation module can rank its output like any other scorer.
"""

import logging
from abc import ABC, abstractmethod
from typing import Self

import numpy as np
from scipy import sparse
from sklearn.metrics.pairwise import cosine_similarity
from sklearn.preprocessing import normalize
from tqdm import tqdm

from federank.data import InteractionDataset
from federank.errors import CatalogBoundsError
from federank.evaluation import validation_precision
from federank.federation import (
    ClientSampler,
    client_stream,
    init_stream,
    sample_local_triples,
    selection_stream,
)
from federank.model import (
    BestEpochTracker,
    ClientState,
    Regularization,
    ServerModel,
    Triple,
    ensure_finite,
    initialize_factors,
    score_all,
    triple_gradient,
)

logger = logging.getLogger(__name__)

KNN_MODES: tuple[str, ...] = ("user", "item")


class Recommender(ABC):
    """Fit on a dataset, then score the whole catalog for a user."""

    name: str = "recommender"

    def __init__(self) -> None:
        self.n_items = 0

    @abstractmethod
    def fit(self, dataset: InteractionDataset) -> Self: ...

    @abstractmethod
    def score_user(self, user: int) -> np.ndarray: ...

    def score(self, user: int, item: int) -> float:
        if not 0 <= item < self.n_items:
            raise CatalogBoundsError(f"item {item} outside [0, {self.n_items})")
        return float(self.score_user(user)[item])


# ---------------------------------------------------------------------------
# Non-personalized
# ---------------------------------------------------------------------------


class RandomRecommender(Recommender):
    """Uniform random scores; each user's scores come from its own seeded stream."""

    name = "random"

    def __init__(self, seed: int = 42) -> None:
        super().__init__()
        self.seed = seed

    def fit(self, dataset: InteractionDataset) -> Self:
        self.n_items = dataset.n_items
        return self

    def score_user(self, user: int) -> np.ndarray:
        seed = np.random.SeedSequence(self.seed, spawn_key=(user,))
        rng = np.random.default_rng(seed)
        return rng.random(self.n_items)


class MostPopular(Recommender):
    """Scores every item by its number of train positives."""

    name = "most_popular"

    def __init__(self) -> None:
        super().__init__()
        self.counts = np.zeros(0)

    def fit(self, dataset: InteractionDataset) -> Self:
        self.n_items = dataset.n_items
        self.counts = dataset.item_popularity().astype(float)
        self.counts.setflags(write=False)
        return self

    def score_user(self, user: int) -> np.ndarray:
        return self.counts


# ---------------------------------------------------------------------------
# Centralized BPR-MF
# ---------------------------------------------------------------------------


class BPRMF(Recommender):
    """Pair-wise factorization trained centrally with one triple per SGD step.

    Each step draws a user with probability proportional to its train
    profile (so (u, i) is uniform over all train positives), then a
    positive and a negative item from that user's per-step stream. These
    are the same streams the federated simulator uses, so a federated run
    with one client and one triple per round and pi = 1 reproduces this
    model exactly.

    Attributes:
        server: Item embeddings and biases.
        user_factors: User embedding matrix P.
        history: ``(epoch, validation P@N)`` pairs.
        best_epoch: Epoch whose parameters were kept.
    """

    name = "bpr_mf"

    def __init__(
        self,
        factors: int = 20,
        alpha: float = 0.05,
        reg: Regularization | None = None,
        epochs: int = 20,
        seed: int = 42,
        init_std: float = 0.1,
        top_n: int = 10,
        progress: bool = False,
    ) -> None:
        super().__init__()
        self.factors = factors
        self.alpha = alpha
        self.reg = reg if reg is not None else Regularization.from_learning_rate(alpha)
        self.epochs = epochs
        self.seed = seed
        self.init_std = init_std
        self.top_n = top_n
        self.progress = progress
        self.history: list[tuple[int, float]] = []
        self.best_epoch = 0
        self.steps = 0

    def start(self, dataset: InteractionDataset) -> None:
        """Initialize parameters and random streams without training."""
        self.dataset = dataset
        self.n_items = dataset.n_items
        self.server, self.user_factors = initialize_factors(
            init_stream(self.seed),
            dataset.n_users,
            dataset.n_items,
            self.factors,
            self.init_std,
        )
        self.clients = [
            ClientState(user, self.user_factors[user], dataset.consumed(user))
            for user in range(dataset.n_users)
        ]
        admitted = [c.user_id for c in self.clients if len(c.consumed)]
        self._sampler = ClientSampler(admitted, dataset.profile_sizes()[admitted])
        self._rng = selection_stream(self.seed)
        self.steps = 0

    def draw_triple(self) -> Triple:
        """Next triple of the shared stream."""
        (user,) = self._sampler.draw(self._rng, 1)
        batch = sample_local_triples(
            client_stream(self.seed, self.steps, user),
            self.clients[user],
            self.n_items,
            1,
        )
        return next(iter(batch))

    def step(self, triple: Triple | None = None) -> Triple:
        """One SGD ascent step on a triple (the next drawn one by default)."""
        triple = self.draw_triple() if triple is None else triple
        client = self.clients[triple.u]
        grad = triple_gradient(self.server, client, triple, self.reg)
        client.p += self.alpha * grad.dp
        self.server.Q[grad.items] += self.alpha * grad.dq
        self.server.b[grad.items] += self.alpha * grad.db
        ensure_finite(self.server, grad.items, f"step {self.steps}")
        self.steps += 1
        return triple

    def fit(self, dataset: InteractionDataset) -> Self:
        """Train for ``epochs`` epochs of X+ steps and keep the best one."""
        self.start(dataset)
        tracker = BestEpochTracker()
        tracker.offer(0, -np.inf, self.server, self.user_factors)
        self.history = []

        for epoch in range(1, self.epochs + 1):
            for _ in tqdm(
                range(dataset.x_plus),
                desc=f"  epoch {epoch}",
                ncols=70,
                leave=False,
                disable=not self.progress,
            ):
                self.step()
            score = validation_precision(self, dataset, self.top_n)
            self.history.append((epoch, score))
            improved = tracker.offer(epoch, score, self.server, self.user_factors)
            logger.info(
                "bpr_mf epoch %d/%d  validation P@%d = %.5f%s",
                epoch,
                self.epochs,
                self.top_n,
                score,
                "  (best)" if improved else "",
            )

        self.server, self.user_factors = tracker.restore()
        for client in self.clients:
            client.p = self.user_factors[client.user_id]
        self.best_epoch = tracker.best_epoch
        return self

    def score_user(self, user: int) -> np.ndarray:
        return score_all(self.server, self.user_factors[user])

    @property
    def model(self) -> ServerModel:
        return self.server


# ---------------------------------------------------------------------------
# Neighborhood models
# ---------------------------------------------------------------------------


def _keep_top_k(similarity: sparse.csr_matrix, k: int) -> sparse.csr_matrix:
    """Keep the ``k`` largest entries of every row (ties by column id)."""
    similarity = similarity.tocsr()
    indptr = [0]
    indices: list[np.ndarray] = []
    data: list[np.ndarray] = []
    for row in range(similarity.shape[0]):
        start, end = similarity.indptr[row], similarity.indptr[row + 1]
        cols = similarity.indices[start:end]
        vals = similarity.data[start:end]
        if len(vals) > k:
            order = np.lexsort((cols, -vals))[:k]
            cols, vals = cols[order], vals[order]
        indices.append(cols)
        data.append(vals)
        indptr.append(indptr[-1] + len(cols))
    return sparse.csr_matrix(
        (
            np.concatenate(data) if data else np.empty(0),
            np.concatenate(indices) if indices else np.empty(0, dtype=np.int32),
            np.asarray(indptr),
        ),
        shape=similarity.shape,
    )


class KNN(Recommender):
    """Cosine neighborhood model over binary profiles.

    User mode scores item i for user u as the sum of sim(u, v) over the k
    nearest neighbors v of u that consumed i. Item mode scores it as the
    sum of sim(i, j) over the items j of u that are among the k nearest
    neighbors of i.

    Args:
        mode: ``user`` or ``item``.
        k: Neighborhood size.
        shrink: Added to the cosine denominator; 0 gives plain cosine.
    """

    def __init__(self, mode: str = "user", k: int = 80, shrink: float = 0.0) -> None:
        super().__init__()
        if mode not in KNN_MODES:
            raise ValueError(f"mode must be one of {KNN_MODES}, got {mode!r}")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.mode = mode
        self.k = k
        self.shrink = shrink
        self.name = f"{mode}_knn"

    def fit(self, dataset: InteractionDataset) -> Self:
        self.n_items = dataset.n_items
        self._interactions = dataset.interaction_matrix(("train",))
        profiles = (
            self._interactions
            if self.mode == "user"
            else self._interactions.T.tocsr()
        )
        self._profiles = profiles
        self._unit = normalize(profiles, norm="l2", axis=1)

        if self.shrink:
            overlap = (profiles @ profiles.T).tocsr()
            norms = np.sqrt(np.asarray(profiles.sum(axis=1)).ravel())
            coo = overlap.tocoo()
            values = coo.data / (norms[coo.row] * norms[coo.col] + self.shrink)
            full = sparse.csr_matrix((values, (coo.row, coo.col)), shape=overlap.shape)
        else:
            full = sparse.csr_matrix(cosine_similarity(profiles, dense_output=False))

        # the two triangles can differ in the last bit; make them identical
        full = full.maximum(full.T).tolil()
        full.setdiag(0.0)
        full = full.tocsr()
        full.eliminate_zeros()
        self.similarity_matrix = _keep_top_k(full, self.k)
        logger.debug(
            "%s: %d similarities kept", self.name, self.similarity_matrix.nnz
        )
        return self

    def similarity(self, a: int, b: int) -> float:
        """Similarity of two users (or items) before top-k pruning."""
        if self.shrink:
            row_a, row_b = self._profiles[a], self._profiles[b]
            overlap = float(row_a.multiply(row_b).sum())
            denom = np.sqrt(row_a.sum()) * np.sqrt(row_b.sum()) + self.shrink
            return overlap / denom if denom else 0.0
        return float(self._unit[a].multiply(self._unit[b]).sum())

    def score_user(self, user: int) -> np.ndarray:
        if self.mode == "user":
            scores = self.similarity_matrix[user] @ self._interactions
            return np.asarray(scores.todense()).ravel()
        scores = self.similarity_matrix @ self._interactions[user].T
        return np.asarray(scores.todense()).ravel()
