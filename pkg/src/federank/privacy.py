"""Server-side sign attack on client updates, and how masking limits it.

For a triple (u, i, j) the bias directions of i and j are s and -s
(minus regularization), with s in (0, 1). A curious server can therefore
label every transmitted item with a positive bias update as consumed and
every negative one as not consumed. Masking withholds a fraction 1 - pi
of the positive rows, so the attack's recall on the sampled positives
falls to about pi while its precision stays at 1 without regularization.

Regularization can flip the sign of a row (a large bias decays faster
than s pushes it), so the audit also counts sign flips.
"""

import dataclasses
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

from tqdm import tqdm

from federank.data import InteractionDataset
from federank.errors import ConfigError
from federank.federation import (
    ClientRound,
    FederatedSimulation,
    ServerUpdate,
    TelemetryLog,
    TrainingSchedule,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SignInference:
    """Items a server labels from the signs of one update's bias rows."""

    consumed: frozenset[int]
    non_consumed: frozenset[int]


@dataclass(frozen=True)
class AttackResult:
    """Attack outcome on one client round.

    Attributes:
        inferred: Items labelled consumed.
        truth: Positive items the client sampled that round.
        precision: Share of ``inferred`` that is right (NaN if empty).
        recall: Share of ``truth`` that was recovered.
    """

    round_index: int
    user: int
    inferred: frozenset[int]
    truth: frozenset[int]
    precision: float
    recall: float


@dataclass(frozen=True)
class AuditRow:
    """Pooled attack performance at one pi."""

    pi: float
    rounds: int
    attack_precision: float
    attack_recall: float
    sign_flip_rate: float

    def as_row(self) -> dict[str, float | int]:
        return dataclasses.asdict(self)


def sign_attack(update: ServerUpdate) -> SignInference:
    """Label items by the sign of their transmitted bias update.

    Positive means consumed, negative means not consumed, zero or absent
    means unknown.
    """
    consumed = frozenset(int(i) for i in update.items[update.db > 0])
    non_consumed = frozenset(int(i) for i in update.items[update.db < 0])
    return SignInference(consumed=consumed, non_consumed=non_consumed)


def score_attack(outcome: ClientRound) -> AttackResult:
    """Run the sign attack on a client round and score it against the truth."""
    inferred = sign_attack(outcome.update).consumed
    truth = frozenset(int(i) for i in outcome.positives)
    hits = len(inferred & truth)
    return AttackResult(
        round_index=outcome.round_index,
        user=outcome.user,
        inferred=inferred,
        truth=truth,
        precision=hits / len(inferred) if inferred else math.nan,
        recall=hits / len(truth) if truth else math.nan,
    )


def count_sign_flips(outcome: ClientRound) -> tuple[int, int]:
    """Transmitted rows whose bias sign contradicts the item's role.

    Returns:
        ``(flipped rows, transmitted rows)``.
    """
    update = outcome.update
    positive = {int(i) for i in outcome.positives}
    flipped = 0
    for item, value in zip(update.items.tolist(), update.db.tolist(), strict=True):
        if (item in positive and value <= 0) or (item not in positive and value >= 0):
            flipped += 1
    return flipped, update.n_rows


@dataclass
class SignAttackObserver:
    """Round observer that attacks every update and pools the counts.

    Attributes:
        keep_results: Also store every per-round ``AttackResult``.
    """

    keep_results: bool = False
    rounds: int = 0
    inferred: int = 0
    true_positives: int = 0
    truth: int = 0
    flipped: int = 0
    transmitted: int = 0
    results: list[AttackResult] = field(default_factory=list)

    def __call__(self, outcome: ClientRound) -> None:
        result = score_attack(outcome)
        flipped, transmitted = count_sign_flips(outcome)
        self.rounds += 1
        self.inferred += len(result.inferred)
        self.true_positives += len(result.inferred & result.truth)
        self.truth += len(result.truth)
        self.flipped += flipped
        self.transmitted += transmitted
        if self.keep_results:
            self.results.append(result)

    @property
    def precision(self) -> float:
        return self.true_positives / self.inferred if self.inferred else math.nan

    @property
    def recall(self) -> float:
        return self.true_positives / self.truth if self.truth else math.nan

    @property
    def sign_flip_rate(self) -> float:
        return self.flipped / self.transmitted if self.transmitted else math.nan


def audit_curve(
    dataset: InteractionDataset,
    schedule: TrainingSchedule,
    pi_grid: Sequence[float],
    rounds: int = 10_000,
) -> list[AuditRow]:
    """Train briefly at every pi and attack every transmitted update.

    Each grid point runs ``rounds`` rounds from a fresh initialization with
    the schedule's seed; precision and recall are pooled over all client
    rounds.

    Raises:
        ConfigError: If a pi is outside [0, 1] or ``rounds`` < 1.
    """
    if rounds < 1:
        raise ConfigError("audit_rounds", f"must be >= 1, got {rounds}")
    rows = []
    for pi in pi_grid:
        sched = dataclasses.replace(schedule, pi=float(pi))
        observer = SignAttackObserver()
        simulation = FederatedSimulation(
            dataset,
            sched,
            TelemetryLog(dataset.n_items, record_rounds=False),
            observers=[observer],
        )
        for _ in tqdm(
            range(rounds),
            desc=f"  audit pi={pi:.2f}",
            ncols=70,
            leave=False,
            disable=not schedule.progress,
        ):
            simulation.run_round()
        row = AuditRow(
            pi=float(pi),
            rounds=observer.rounds,
            attack_precision=observer.precision,
            attack_recall=observer.recall,
            sign_flip_rate=observer.sign_flip_rate,
        )
        logger.info(
            "audit pi=%.2f  precision=%.4f  recall=%.4f  sign flips=%.4f",
            row.pi,
            row.attack_precision,
            row.attack_recall,
            row.sign_flip_rate,
        )
        rows.append(row)
    return rows
