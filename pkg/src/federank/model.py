"""Split factorization model and pair-wise ranking mathematics.

The model is split between a server, which owns the item embeddings Q
and item biases b, and one client per user, which owns the user
embedding p_u and the private set of consumed items. A user-item score
is

    x_ui = b_i + p_u . q_i

and training maximizes ln sigmoid(x_ui - x_uj) over triples (u, i, j)
of a user, a consumed item and a non-consumed item, minus an L2
penalty. Every function here is pure: gradients are returned, never
applied. Federated and centralized training share these kernels so that
both follow exactly the same arithmetic.
"""

from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from federank.errors import CatalogBoundsError, DivergenceError

# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


class Regularization(NamedTuple):
    """L2 weights for the user, positive-item and negative-item roles."""

    user: float
    positive: float
    negative: float

    @classmethod
    def from_learning_rate(cls, alpha: float) -> "Regularization":
        """Regularization tied to the learning rate: a/20, a/20, a/200."""
        return cls(user=alpha / 20, positive=alpha / 20, negative=alpha / 200)


@dataclass(eq=False)
class ServerModel:
    """Server-side parameters: item embeddings and item biases.

    Attributes:
        Q: Item embedding matrix, one row per catalog item.
        b: Item bias vector.
    """

    Q: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.Q.ndim != 2 or self.b.ndim != 1 or len(self.Q) != len(self.b):
            raise ValueError(
                f"Q {self.Q.shape} and b {self.b.shape} disagree on catalog size"
            )

    @property
    def n_items(self) -> int:
        return len(self.b)

    @property
    def factors(self) -> int:
        return self.Q.shape[1]

    def copy(self) -> "ServerModel":
        return ServerModel(Q=self.Q.copy(), b=self.b.copy())

    def check_items(self, items: np.ndarray | int) -> None:
        """Raise if any item id falls outside the catalog."""
        arr = np.asarray(items)
        if arr.size and (arr.min() < 0 or arr.max() >= self.n_items):
            raise CatalogBoundsError(
                f"item id out of range [0, {self.n_items}): {arr.min()}..{arr.max()}"
            )

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.Q).all() and np.isfinite(self.b).all())


@dataclass(eq=False)
class ClientState:
    """One user's private state on its device.

    Attributes:
        user_id: Dense user index.
        p: User embedding (written in place by training).
        consumed: Sorted item ids the user consumed in train.
    """

    user_id: int
    p: np.ndarray
    consumed: np.ndarray


class Triple(NamedTuple):
    """A training triple: user, consumed item, non-consumed item."""

    u: int
    i: int
    j: int


@dataclass(frozen=True, eq=False)
class TripleBatch:
    """The triples a client draws in one round, kept as parallel arrays."""

    user: int
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.positives)

    def __iter__(self) -> Iterator[Triple]:
        for i, j in zip(self.positives.tolist(), self.negatives.tolist(), strict=True):
            yield Triple(self.user, i, j)

    @classmethod
    def coerce(
        cls, user: int, triples: "TripleBatch | Sequence[Triple]"
    ) -> "TripleBatch":
        """Accept either a batch or a plain sequence of triples."""
        if isinstance(triples, TripleBatch):
            return triples
        pos = np.fromiter((t.i for t in triples), dtype=np.int64, count=len(triples))
        neg = np.fromiter((t.j for t in triples), dtype=np.int64, count=len(triples))
        return cls(user, pos, neg)


@dataclass(eq=False)
class GradientContribution:
    """Sparse ascent directions produced by a set of triples.

    Row ``k`` of ``dq`` and entry ``k`` of ``db`` belong to ``items[k]``,
    so the item keys of the two parts are equal by construction.

    Attributes:
        items: Sorted ids of the touched items.
        dq: Embedding directions, one row per touched item.
        db: Bias directions, one entry per touched item.
        dp: Direction for the user embedding.
    """

    items: np.ndarray
    dq: np.ndarray
    db: np.ndarray
    dp: np.ndarray

    @classmethod
    def empty(cls, factors: int) -> "GradientContribution":
        return cls(
            items=np.empty(0, dtype=np.int64),
            dq=np.empty((0, factors)),
            db=np.empty(0),
            dp=np.zeros(factors),
        )

    def dq_map(self) -> dict[int, np.ndarray]:
        return {int(item): row for item, row in zip(self.items, self.dq, strict=True)}

    def db_map(self) -> dict[int, float]:
        return {
            int(item): float(value)
            for item, value in zip(self.items, self.db, strict=True)
        }


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def sigmoid(x: float | np.ndarray) -> float | np.ndarray:
    """Logistic function, branching on sign so exp never overflows."""
    arr = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def predict_score(model: ServerModel, p_u: np.ndarray, i: int) -> float:
    """Score b_i + p_u . q_i of one item."""
    model.check_items(i)
    return float(model.b[i] + np.dot(p_u, model.Q[i]))


def pairwise_diff(model: ServerModel, p_u: np.ndarray, i: int, j: int) -> float:
    """Score difference x_ui - x_uj."""
    return predict_score(model, p_u, i) - predict_score(model, p_u, j)


def score_all(model: ServerModel, p_u: np.ndarray) -> np.ndarray:
    """Scores of every catalog item for one user embedding."""
    return model.b + model.Q @ p_u


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def accumulate_round(
    model: ServerModel,
    client: ClientState,
    triples: TripleBatch | Sequence[Triple],
    reg: Regularization,
) -> GradientContribution:
    """Sum of per-triple ascent directions, all taken at the given snapshot.

    For each triple, with s = 1 - sigmoid(x_ui - x_uj):

        dp_u  = s (q_i - q_j) - reg.user * p_u
        dq_i  =  s p_u - reg.positive * q_i     db_i =  s - reg.positive * b_i
        dq_j  = -s p_u - reg.negative * q_j     db_j = -s - reg.negative * b_j

    Directions of items hit by several triples are summed. Parameters are
    never modified, so duplicated triples contribute exactly twice.

    Raises:
        CatalogBoundsError: If a triple names an item outside the catalog.
    """
    batch = TripleBatch.coerce(client.user_id, triples)
    if len(batch) == 0:
        return GradientContribution.empty(model.factors)

    pos, neg = batch.positives, batch.negatives
    model.check_items(pos)
    model.check_items(neg)

    p = client.p
    q_i = model.Q[pos]
    q_j = model.Q[neg]
    b_i = model.b[pos]
    b_j = model.b[neg]

    x_uij = (b_i + q_i @ p) - (b_j + q_j @ p)
    # 1 - sigmoid(x) == sigmoid(-x), without the cancellation
    s = sigmoid(-x_uij)
    s_col = s[:, None]

    dp = (s_col * (q_i - q_j) - reg.user * p).sum(axis=0)
    rows = np.vstack((s_col * p - reg.positive * q_i, -s_col * p - reg.negative * q_j))
    biases = np.concatenate((s - reg.positive * b_i, -s - reg.negative * b_j))

    items, inverse = np.unique(np.concatenate((pos, neg)), return_inverse=True)
    dq = np.zeros((len(items), model.factors))
    db = np.zeros(len(items))
    np.add.at(dq, inverse, rows)
    np.add.at(db, inverse, biases)
    return GradientContribution(items=items, dq=dq, db=db, dp=dp)


def triple_gradient(
    model: ServerModel,
    client: ClientState,
    t: Triple,
    reg: Regularization,
) -> GradientContribution:
    """Ascent directions of a single triple."""
    return accumulate_round(model, client, [t], reg)


# ---------------------------------------------------------------------------
# Initialization and checks
# ---------------------------------------------------------------------------


def initialize_factors(
    rng: np.random.Generator,
    n_users: int,
    n_items: int,
    factors: int,
    std: float = 0.1,
) -> tuple[ServerModel, np.ndarray]:
    """Draw Q, then P, from N(0, std^2); biases start at zero.

    Returns:
        The server model and the user embedding matrix P.
    """
    if factors < 1:
        raise ValueError(f"factors must be >= 1, got {factors}")
    Q = rng.normal(0.0, std, size=(n_items, factors))
    P = rng.normal(0.0, std, size=(n_users, factors))
    return ServerModel(Q=Q, b=np.zeros(n_items)), P


def ensure_finite(model: ServerModel, items: np.ndarray, where: str) -> None:
    """Raise ``DivergenceError`` if any touched row became non-finite."""
    if not (np.isfinite(model.Q[items]).all() and np.isfinite(model.b[items]).all()):
        raise DivergenceError(f"non-finite item parameters after {where}")


# ---------------------------------------------------------------------------
# Trained model as a recommender
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FactorRecommender:
    """Scores items with a trained server model and user embeddings."""

    server: ServerModel
    user_factors: np.ndarray
    name: str = "factor_model"

    def score_user(self, user: int) -> np.ndarray:
        return score_all(self.server, self.user_factors[user])

    def score(self, user: int, item: int) -> float:
        return predict_score(self.server, self.user_factors[user], item)


@dataclass
class BestEpochTracker:
    """Keeps a copy of the parameters from the best validation epoch.

    Attributes:
        best_epoch: Epoch of the best score so far (0 = initialization).
        best_score: Best validation score so far.
    """

    best_epoch: int = 0
    best_score: float = -np.inf
    _server: ServerModel | None = field(default=None, repr=False)
    _users: np.ndarray | None = field(default=None, repr=False)

    def offer(
        self, epoch: int, score: float, server: ServerModel, users: np.ndarray
    ) -> bool:
        """Record an epoch; keep it if strictly better than the best so far.

        Returns:
            True if this epoch became the best.
        """
        if self._server is not None and not score > self.best_score:
            return False
        self.best_epoch = epoch
        self.best_score = score
        self._server = server.copy()
        self._users = users.copy()
        return True

    def restore(self) -> tuple[ServerModel, np.ndarray]:
        """Copies of the best parameters.

        Raises:
            RuntimeError: If nothing was offered yet.
        """
        if self._server is None or self._users is None:
            raise RuntimeError("no epoch recorded")
        return self._server.copy(), self._users.copy()
