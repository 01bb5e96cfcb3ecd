"""FedeRank rounds and the multi-epoch federated training schedule.

A round of communication runs four steps:

1. Distribution: the server picks m clients and hands them the current
   snapshot of (Q, b).
2. Federated optimization: each client draws T triples from its own
   data, sums their gradients at the snapshot and updates its private
   p_u right away.
3. Transmission: each client zeroes the rows of sampled positive items
   it decides not to share (each kept with probability pi) and sends the
   rest. Negative-item rows are always sent.
4. Global aggregation: the server adds alpha times the sum of the
   received rows, in ascending user order.

Randomness is split into seeded streams: one for initialization, one for
client selection, and one per (round, user) for everything a client
draws. A client's output therefore depends only on the snapshot, its
private state and its own stream.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from tqdm import tqdm

from federank.data import InteractionDataset
from federank.errors import (
    ConfigError,
    DivergenceError,
    ProtocolError,
    SamplingError,
)
from federank.evaluation import validation_precision
from federank.model import (
    BestEpochTracker,
    ClientState,
    FactorRecommender,
    Regularization,
    ServerModel,
    TripleBatch,
    accumulate_round,
    initialize_factors,
)

logger = logging.getLogger(__name__)

CLIENT_SAMPLING_MODES: tuple[str, ...] = ("uniform", "proportional")

# spawn keys that namespace the random streams of one run
_INIT_STREAM = 0
_SELECTION_STREAM = 1
_CLIENT_STREAM = 2


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def init_stream(seed: int) -> np.random.Generator:
    """Stream used to initialize the factors."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_INIT_STREAM,))
    )


def selection_stream(seed: int) -> np.random.Generator:
    """Server-side stream used to pick the clients of each round."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_SELECTION_STREAM,))
    )


def client_stream(seed: int, round_index: int, user: int) -> np.random.Generator:
    """Private stream of one client in one round."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_CLIENT_STREAM, round_index, user))
    )


# ---------------------------------------------------------------------------
# Schedule and round types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSchedule:
    """Hyperparameters of a training run.

    Attributes:
        epochs: Number of epochs E.
        clients_per_round: Clients m selected per round.
        triples_per_client: Triples T drawn by each client per round.
        pi: Probability that a sampled positive item's rows are sent.
        alpha: Learning rate shared by clients and server.
        reg: L2 weights; derived from ``alpha`` when None.
        factors: Latent dimensionality F.
        init_std: Standard deviation of the initial embeddings.
        seed: Root seed of every random stream.
        rounds_per_epoch: Fixed rpe, or None for ceil(X+ / (m * T)).
        client_sampling: ``uniform`` or ``proportional`` to profile size.
        sticky_mask: Fix each user's per-item transmit decision once drawn.
        top_n: Cutoff of the validation P@N used to pick the best epoch.
        progress: Show a progress bar per epoch.
    """

    epochs: int = 20
    clients_per_round: int = 1
    triples_per_client: int = 1
    pi: float = 1.0
    alpha: float = 0.05
    reg: Regularization | None = None
    factors: int = 20
    init_std: float = 0.1
    seed: int = 42
    rounds_per_epoch: int | None = None
    client_sampling: str = "uniform"
    sticky_mask: bool = False
    top_n: int = 10
    progress: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if self.clients_per_round < 1:
            raise ConfigError(
                "clients_per_round", f"must be >= 1, got {self.clients_per_round}"
            )
        if self.triples_per_client < 1:
            raise ConfigError(
                "triples_per_client", f"must be >= 1, got {self.triples_per_client}"
            )
        if not 0.0 <= self.pi <= 1.0:
            raise ConfigError("pi", f"must be in [0, 1], got {self.pi}")
        if not self.alpha > 0:
            raise ConfigError("alpha", f"must be > 0, got {self.alpha}")
        if self.factors < 1:
            raise ConfigError("factors", f"must be >= 1, got {self.factors}")
        if self.rounds_per_epoch is not None and self.rounds_per_epoch < 1:
            raise ConfigError(
                "rounds_per_epoch", f"must be >= 1, got {self.rounds_per_epoch}"
            )
        if self.client_sampling not in CLIENT_SAMPLING_MODES:
            raise ConfigError(
                "client_sampling",
                f"must be one of {CLIENT_SAMPLING_MODES}, got {self.client_sampling!r}",
            )

    @property
    def regularization(self) -> Regularization:
        return self.reg if self.reg is not None else Regularization.from_learning_rate(
            self.alpha
        )

    def resolve_rounds(self, x_plus: int) -> int:
        """Rounds per epoch, so one epoch processes about X+ triples."""
        if self.rounds_per_epoch is not None:
            return self.rounds_per_epoch
        per_round = self.clients_per_round * self.triples_per_client
        return max(1, math.ceil(x_plus / per_round))


@dataclass(frozen=True)
class RoundPlan:
    """Which clients take part in a round."""

    round_index: int
    selected_clients: tuple[int, ...]
    triples_per_client: int
    pi: float


@dataclass(frozen=True, eq=False)
class ServerUpdate:
    """What one client sends in one round, after masking.

    Masked positive rows are omitted entirely; every other touched item
    has its embedding row and bias entry.
    """

    user: int
    items: np.ndarray
    dq: np.ndarray
    db: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.items)

    def db_map(self) -> dict[int, float]:
        return {
            int(item): float(value)
            for item, value in zip(self.items, self.db, strict=True)
        }


@dataclass(frozen=True, eq=False)
class ClientRound:
    """Everything a client produced in one round.

    Only ``update`` leaves the device; the sampled item sets are kept for
    telemetry and for scoring the privacy audit.
    """

    round_index: int
    user: int
    update: ServerUpdate
    p_u: np.ndarray
    triples: TripleBatch
    positives: np.ndarray
    negatives: np.ndarray
    sent_positives: np.ndarray

    @property
    def n_positive_sent(self) -> int:
        return len(self.sent_positives)

    @property
    def n_negative_sent(self) -> int:
        return len(self.negatives)


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


class MaskPolicy(Protocol):
    """Decides which sampled positive items a client shares."""

    def keep(
        self, rng: np.random.Generator, user: int, positives: np.ndarray, pi: float
    ) -> np.ndarray: ...


class PerRoundMask:
    """Independent Bernoulli(pi) draw per positive item per round."""

    def keep(
        self, rng: np.random.Generator, user: int, positives: np.ndarray, pi: float
    ) -> np.ndarray:
        return rng.random(len(positives)) < pi


class StickyMask:
    """Draws each (user, item) decision once and reuses it afterwards."""

    def __init__(self) -> None:
        self._decisions: dict[int, dict[int, bool]] = {}

    def keep(
        self, rng: np.random.Generator, user: int, positives: np.ndarray, pi: float
    ) -> np.ndarray:
        decided = self._decisions.setdefault(user, {})
        out = np.empty(len(positives), dtype=bool)
        for k, item in enumerate(positives.tolist()):
            if item not in decided:
                decided[item] = bool(rng.random() < pi)
            out[k] = decided[item]
        return out


def make_mask_policy(sticky: bool = False) -> MaskPolicy:
    return StickyMask() if sticky else PerRoundMask()


def draw_mask(
    rng: np.random.Generator,
    positives: np.ndarray,
    pi: float,
    policy: MaskPolicy | None = None,
    user: int = 0,
) -> np.ndarray:
    """Per-item transmit indicator for the sampled positives (1 = send)."""
    policy = policy or PerRoundMask()
    return policy.keep(rng, user, positives, pi)


# ---------------------------------------------------------------------------
# Telemetry
# ---------------------------------------------------------------------------


@dataclass
class TelemetryLog:
    """Per-round transmission counts and per-item update counts.

    Attributes:
        n_items: Catalog size.
        record_rounds: Keep one row per (round, client); off for huge runs.
        rounds: ``(round, user, positive rows sent, negative rows sent)``.
        item_update_counts: Rows received by the server per item.
    """

    n_items: int
    record_rounds: bool = True
    rounds: list[tuple[int, int, int, int]] = field(default_factory=list)
    item_update_counts: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.item_update_counts = np.zeros(self.n_items, dtype=np.int64)

    def record(self, outcome: ClientRound) -> None:
        if self.record_rounds:
            self.rounds.append(
                (
                    outcome.round_index,
                    outcome.user,
                    outcome.n_positive_sent,
                    outcome.n_negative_sent,
                )
            )
        self.item_update_counts[outcome.update.items] += 1

    def item_rows(self) -> list[tuple[int, int]]:
        counts = self.item_update_counts
        return [(item, int(count)) for item, count in enumerate(counts)]


# ---------------------------------------------------------------------------
# Client selection and local sampling
# ---------------------------------------------------------------------------


class ClientSampler:
    """Draws distinct clients, uniformly or proportionally to a weight."""

    def __init__(
        self, clients: Sequence[int], weights: np.ndarray | None = None
    ) -> None:
        self.clients = np.asarray(clients, dtype=np.int64)
        self._cdf: np.ndarray | None = None
        self._eligible = len(self.clients)
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if len(weights) != len(self.clients) or (weights < 0).any():
                raise ValueError("weights must be non-negative, one per client")
            total = weights.sum()
            if total <= 0:
                raise ValueError("weights sum to zero")
            self._cdf = np.cumsum(weights) / total
            self._eligible = int((weights > 0).sum())

    def draw(self, rng: np.random.Generator, m: int) -> list[int]:
        """Pick ``m`` distinct clients.

        Raises:
            ConfigError: If ``m`` is below 1 or above the number of clients.
        """
        if not 1 <= m <= self._eligible:
            raise ConfigError(
                "clients_per_round",
                f"must be in [1, {self._eligible}], got {m}",
            )
        n = len(self.clients)
        if self._cdf is None:
            if m == 1:
                return [int(self.clients[rng.integers(n)])]
            picks = rng.choice(n, size=m, replace=False)
            return [int(self.clients[k]) for k in picks]

        chosen: list[int] = []
        while len(chosen) < m:
            k = min(int(np.searchsorted(self._cdf, rng.random(), side="right")), n - 1)
            client = int(self.clients[k])
            if client not in chosen:
                chosen.append(client)
        return chosen


def select_clients(
    rng: np.random.Generator,
    all_clients: Sequence[int],
    m: int,
    weights: np.ndarray | None = None,
) -> list[int]:
    """Pick ``m`` distinct clients for one round."""
    return ClientSampler(all_clients, weights).draw(rng, m)


def _contains(sorted_items: np.ndarray, values: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_items, values)
    pos = np.minimum(pos, len(sorted_items) - 1)
    return sorted_items[pos] == values


def sample_local_triples(
    rng: np.random.Generator,
    client: ClientState,
    n_items: int,
    T: int,
) -> TripleBatch:
    """Draw ``T`` triples from the client's own data.

    Positives are uniform over the consumed items; each negative is
    uniform over the rest of the catalog, redrawn until it is not
    consumed. Repeated triples are allowed.

    Raises:
        SamplingError: If the client has no positives or no negatives.
    """
    consumed = client.consumed
    n_pos = len(consumed)
    if n_pos == 0:
        raise SamplingError(f"user {client.user_id} has no consumed items")
    if n_pos >= n_items:
        raise SamplingError(f"user {client.user_id} consumed the whole catalog")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")

    positives = consumed[rng.integers(0, n_pos, size=T)]
    negatives = rng.integers(0, n_items, size=T)
    pending = np.flatnonzero(_contains(consumed, negatives))
    while len(pending):
        negatives[pending] = rng.integers(0, n_items, size=len(pending))
        pending = pending[_contains(consumed, negatives[pending])]
    return TripleBatch(client.user_id, positives.astype(np.int64), negatives)


# ---------------------------------------------------------------------------
# Client and server steps
# ---------------------------------------------------------------------------


def client_round(
    snapshot: ServerModel,
    client: ClientState,
    T: int,
    alpha: float,
    reg: Regularization,
    rng: np.random.Generator,
    pi: float,
    mask_policy: MaskPolicy | None = None,
    round_index: int = 0,
) -> ClientRound:
    """One client's local optimization and masked transmission.

    The client samples triples, sums their gradients at ``snapshot``,
    moves its embedding by ``alpha`` times the user direction, and sends
    the item directions with the masked positive rows left out. The
    client's embedding is returned, not written back.
    """
    triples = sample_local_triples(rng, client, snapshot.n_items, T)
    contribution = accumulate_round(snapshot, client, triples, reg)
    p_u = client.p + alpha * contribution.dp

    positives = np.unique(triples.positives)
    negatives = np.unique(triples.negatives)
    keep = draw_mask(rng, positives, pi, mask_policy, client.user_id)
    withheld = positives[~keep]
    sent = ~np.isin(contribution.items, withheld, assume_unique=True)

    update = ServerUpdate(
        user=client.user_id,
        items=contribution.items[sent],
        dq=contribution.dq[sent],
        db=contribution.db[sent],
    )
    return ClientRound(
        round_index=round_index,
        user=client.user_id,
        update=update,
        p_u=p_u,
        triples=triples,
        positives=positives,
        negatives=negatives,
        sent_positives=positives[keep],
    )


def aggregate(
    model: ServerModel, updates: Sequence[ServerUpdate], alpha: float
) -> ServerModel:
    """Apply Q += alpha * sum dQ_u and b += alpha * sum db_u in place.

    Updates are summed in ascending user order; rows nobody sent are
    left untouched. On ``DivergenceError`` the model is left as it was.

    Raises:
        ProtocolError: If an update names an item outside the catalog or
            has rows of the wrong shape.
        DivergenceError: If the result is not finite.
    """
    if not updates:
        return model

    ordered = sorted(updates, key=lambda u: u.user)
    for update in ordered:
        k = len(update.items)
        if update.dq.shape != (k, model.factors) or update.db.shape != (k,):
            raise ProtocolError(f"malformed update from user {update.user}")
        if k and (update.items.min() < 0 or update.items.max() >= model.n_items):
            raise ProtocolError(
                f"update from user {update.user} names an item outside the catalog"
            )

    items = np.concatenate([u.items for u in ordered])
    if not len(items):
        return model
    uniq, inverse = np.unique(items, return_inverse=True)
    total_q = np.zeros((len(uniq), model.factors))
    total_b = np.zeros(len(uniq))
    np.add.at(total_q, inverse, np.vstack([u.dq for u in ordered]))
    np.add.at(total_b, inverse, np.concatenate([u.db for u in ordered]))

    # the model is only written once every touched row is finite
    new_q = model.Q[uniq] + alpha * total_q
    new_b = model.b[uniq] + alpha * total_b
    if not (np.isfinite(new_q).all() and np.isfinite(new_b).all()):
        raise DivergenceError("non-finite item parameters after aggregation")
    model.Q[uniq] = new_q
    model.b[uniq] = new_b
    return model


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


RoundObserver = Callable[[ClientRound], None]


@dataclass(eq=False)
class TrainingResult:
    """Outcome of a training run, holding the best-validation parameters."""

    server: ServerModel
    user_factors: np.ndarray
    clients: list[ClientState]
    telemetry: TelemetryLog
    history: list[tuple[int, float]]
    best_epoch: int

    def recommender(self, name: str = "federank") -> FactorRecommender:
        return FactorRecommender(self.server, self.user_factors, name=name)


class FederatedSimulation:
    """Server plus one client per user, stepping through rounds.

    Args:
        dataset: Split interaction data; each user's train items are the
            private data of its client.
        schedule: Training hyperparameters.
        telemetry: Log to fill; a fresh one is created when None.
        observers: Callables invoked with every ``ClientRound``.
    """

    def __init__(
        self,
        dataset: InteractionDataset,
        schedule: TrainingSchedule,
        telemetry: TelemetryLog | None = None,
        observers: Sequence[RoundObserver] = (),
    ) -> None:
        self.dataset = dataset
        self.schedule = schedule
        self.reg = schedule.regularization
        self.server, self.user_factors = initialize_factors(
            init_stream(schedule.seed),
            dataset.n_users,
            dataset.n_items,
            schedule.factors,
            schedule.init_std,
        )
        # each client's p is a view into user_factors
        self.clients = [
            ClientState(user, self.user_factors[user], dataset.consumed(user))
            for user in range(dataset.n_users)
        ]
        admitted = [c.user_id for c in self.clients if len(c.consumed)]
        weights = None
        if schedule.client_sampling == "proportional":
            weights = dataset.profile_sizes()[admitted]
        self.sampler = ClientSampler(admitted, weights)
        self.selection_rng = selection_stream(schedule.seed)
        self.mask_policy = make_mask_policy(schedule.sticky_mask)
        self.rounds_per_epoch = schedule.resolve_rounds(dataset.x_plus)
        self.telemetry = telemetry if telemetry is not None else TelemetryLog(
            dataset.n_items
        )
        self.observers = list(observers)
        self.round_index = 0

    def plan_round(self) -> RoundPlan:
        m = self.schedule.clients_per_round
        selected = self.sampler.draw(self.selection_rng, m)
        return RoundPlan(
            round_index=self.round_index,
            selected_clients=tuple(selected),
            triples_per_client=self.schedule.triples_per_client,
            pi=self.schedule.pi,
        )

    def run_round(self) -> list[ClientRound]:
        """Run one distribution / optimization / transmission / aggregation cycle."""
        plan = self.plan_round()
        s = self.schedule
        outcomes = [
            client_round(
                self.server,
                self.clients[user],
                plan.triples_per_client,
                s.alpha,
                self.reg,
                client_stream(s.seed, plan.round_index, user),
                plan.pi,
                self.mask_policy,
                plan.round_index,
            )
            for user in plan.selected_clients
        ]
        aggregate(self.server, [o.update for o in outcomes], s.alpha)
        logger.debug(
            "round %d: clients %s, %d rows received",
            plan.round_index,
            plan.selected_clients,
            sum(o.update.n_rows for o in outcomes),
        )

        for outcome in sorted(outcomes, key=lambda o: o.user):
            self.clients[outcome.user].p[:] = outcome.p_u
            self.telemetry.record(outcome)
            for observer in self.observers:
                observer(outcome)
        self.round_index += 1
        return outcomes

    def run_epoch(self, epoch: int) -> None:
        for _ in tqdm(
            range(self.rounds_per_epoch),
            desc=f"  epoch {epoch}",
            ncols=70,
            leave=False,
            disable=not self.schedule.progress,
        ):
            self.run_round()

    def recommender(self) -> FactorRecommender:
        return FactorRecommender(self.server, self.user_factors, name="federank")

    def train(self) -> TrainingResult:
        """Run every epoch and keep the best validation epoch.

        With zero epochs the initial parameters are returned.
        """
        tracker = BestEpochTracker()
        history: list[tuple[int, float]] = []
        tracker.offer(0, -np.inf, self.server, self.user_factors)

        for epoch in range(1, self.schedule.epochs + 1):
            self.run_epoch(epoch)
            score = validation_precision(
                self.recommender(), self.dataset, self.schedule.top_n
            )
            if not math.isfinite(score):
                logger.warning("epoch %d: validation P@N is %s", epoch, score)
            history.append((epoch, score))
            improved = tracker.offer(epoch, score, self.server, self.user_factors)
            logger.info(
                "epoch %d/%d  validation P@%d = %.5f%s",
                epoch,
                self.schedule.epochs,
                self.schedule.top_n,
                score,
                "  (best)" if improved else "",
            )

        server, users = tracker.restore()
        clients = [
            ClientState(c.user_id, users[c.user_id], c.consumed) for c in self.clients
        ]
        return TrainingResult(
            server=server,
            user_factors=users,
            clients=clients,
            telemetry=self.telemetry,
            history=history,
            best_epoch=tracker.best_epoch,
        )


def train(
    dataset: InteractionDataset,
    schedule: TrainingSchedule,
    telemetry_sink: TelemetryLog | None = None,
) -> TrainingResult:
    """Federated training of ``schedule.epochs`` epochs of rpe rounds each."""
    return FederatedSimulation(dataset, schedule, telemetry_sink).train()
