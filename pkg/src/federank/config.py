"""Experiment configuration.

Settings come from three layers, later ones winning:

1. packaged defaults (``assets/defaults.json``)
2. a plain-text config file, one ``key = value`` per line
3. command-line overrides

Lists are comma-separated, booleans are ``true``/``false``, an empty
value means "unset". ``dataset_format`` names a dataset profile that
fills ``separator`` and ``columns`` unless those are set explicitly.
Every run directory gets the fully resolved config back in the same
format, so a run can be repeated from its own output.
"""

import dataclasses
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from federank.data import DATASET_PROFILES, DEFAULTS, InteractionDataset
from federank.errors import ConfigError
from federank.federation import CLIENT_SAMPLING_MODES, TrainingSchedule
from federank.model import Regularization

ALGORITHMS: tuple[str, ...] = (
    "federank",
    "bpr_mf",
    "random",
    "most_popular",
    "user_knn",
    "item_knn",
)

# symbolic T regime: the average train profile size X+ / |U|
PER_USER_AVG = "per_user_avg"


# ---------------------------------------------------------------------------
# Value parsers
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str) -> float | None:
    return None if text.strip() in ("", "none", "null") else float(text)


def _parse_separator(text: str) -> str:
    # config files cannot hold a literal tab comfortably
    return text.replace("\\t", "\t") if text else "\t"


def _split_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


_PARSERS: dict[str, Callable[[str], Any]] = {
    "dataset": str.strip,
    "dataset_format": str.strip,
    "separator": _parse_separator,
    "columns": lambda text: tuple(_split_list(text)),
    "min_ratings": int,
    "train_fraction": float,
    "validation_fraction": float,
    "user_fraction": float,
    "algorithm": str.strip,
    "factors": int,
    "alpha": float,
    "lambda_user": _parse_optional_float,
    "lambda_pos": _parse_optional_float,
    "lambda_neg": _parse_optional_float,
    "epochs": int,
    "clients_per_round": int,
    "t_mode": str.strip,
    "pi": float,
    "client_sampling": str.strip,
    "sticky_mask": _parse_bool,
    "init_std": float,
    "top_n": int,
    "knn_neighbors": int,
    "seed": int,
    "out": str.strip,
    "save_split": _parse_bool,
    "record_rounds": _parse_bool,
    "progress": _parse_bool,
    "freq_top_k": int,
    "audit_rounds": int,
    "pi_grid": lambda text: tuple(float(v) for v in _split_list(text)),
    "t_regimes": lambda text: tuple(_split_list(text)),
    "alpha_grid": lambda text: tuple(float(v) for v in _split_list(text)),
}


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple | list):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, str):
        return value.replace("\t", "\\t")
    return repr(value) if isinstance(value, float) else str(value)


# ---------------------------------------------------------------------------
# Config types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Every setting of an experiment run.

    Unset regularization weights follow the learning rate: alpha/20 for
    the user and positive items, alpha/200 for negative items.
    """

    dataset: str = ""
    dataset_format: str = ""
    separator: str = "\t"
    columns: tuple[str, ...] = ("user", "item", "rating", "timestamp")
    min_ratings: int = 20
    train_fraction: float = 0.8
    validation_fraction: float = 0.2
    user_fraction: float = 1.0
    algorithm: str = "federank"
    factors: int = 20
    alpha: float = 0.05
    lambda_user: float | None = None
    lambda_pos: float | None = None
    lambda_neg: float | None = None
    epochs: int = 20
    clients_per_round: int = 1
    t_mode: str = "1"
    pi: float = 1.0
    client_sampling: str = "auto"
    sticky_mask: bool = False
    init_std: float = 0.1
    top_n: int = 10
    knn_neighbors: int = 80
    seed: int = 42
    out: str = "runs"
    save_split: bool = False
    record_rounds: bool = True
    progress: bool = True
    freq_top_k: int = 1000
    audit_rounds: int = 10_000
    pi_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    t_regimes: tuple[str, ...] = ("1", PER_USER_AVG)
    alpha_grid: tuple[float, ...] = (0.005, 0.01, 0.05, 0.1, 0.5)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        """Build from already-typed values (JSON defaults, tests)."""
        unknown = set(values) - set(_PARSERS)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(key, "unknown configuration key")
        kwargs = {
            key: tuple(value) if isinstance(value, list) else value
            for key, value in values.items()
        }
        return cls(**kwargs)

    def with_overrides(self, overrides: Mapping[str, str]) -> "ExperimentConfig":
        """Apply ``key -> text`` overrides, parsing each value."""
        return dataclasses.replace(self, **parse_values(overrides))

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- validation -------------------------------------------------------

    def validate(self, require_dataset: bool = True) -> "ExperimentConfig":
        """Check every field.

        Returns:
            The config itself, for chaining.

        Raises:
            ConfigError: Naming the first invalid field.
        """
        if require_dataset:
            if not self.dataset:
                raise ConfigError("dataset", "no dataset path given")
            if not Path(self.dataset).exists():
                raise ConfigError("dataset", f"not found: {self.dataset}")
        if self.dataset_format and self.dataset_format not in DATASET_PROFILES:
            raise ConfigError(
                "dataset_format",
                f"unknown profile {self.dataset_format!r}; "
                f"known: {', '.join(sorted(DATASET_PROFILES))}",
            )
        if not {"user", "item", "timestamp"} <= set(self.columns):
            raise ConfigError("columns", "must name user, item and timestamp")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(
                "algorithm", f"must be one of {', '.join(ALGORITHMS)}"
            )
        _require(self.min_ratings >= 1, "min_ratings", "must be >= 1")
        _require(0 < self.train_fraction < 1, "train_fraction", "must be in (0, 1)")
        _require(
            0 < self.validation_fraction < 1,
            "validation_fraction",
            "must be in (0, 1)",
        )
        _require(0 < self.user_fraction <= 1, "user_fraction", "must be in (0, 1]")
        _require(self.factors >= 1, "factors", "must be >= 1")
        _require(self.alpha > 0, "alpha", "must be > 0")
        for name in ("lambda_user", "lambda_pos", "lambda_neg"):
            value = getattr(self, name)
            _require(value is None or value >= 0, name, "must be >= 0")
        _require(self.epochs >= 0, "epochs", "must be >= 0")
        _require(self.clients_per_round >= 1, "clients_per_round", "must be >= 1")
        _check_t_mode(self.t_mode, "t_mode")
        _require(0 <= self.pi <= 1, "pi", "must be in [0, 1]")
        _require(
            self.client_sampling in ("auto", *CLIENT_SAMPLING_MODES),
            "client_sampling",
            "must be auto, uniform or proportional",
        )
        _require(self.init_std > 0, "init_std", "must be > 0")
        _require(self.top_n >= 1, "top_n", "must be >= 1")
        _require(self.knn_neighbors >= 1, "knn_neighbors", "must be >= 1")
        _require(self.freq_top_k >= 1, "freq_top_k", "must be >= 1")
        _require(self.audit_rounds >= 1, "audit_rounds", "must be >= 1")
        _require(bool(self.pi_grid), "pi_grid", "must not be empty")
        _require(
            all(0 <= pi <= 1 for pi in self.pi_grid), "pi_grid", "values in [0, 1]"
        )
        _require(bool(self.t_regimes), "t_regimes", "must not be empty")
        for regime in self.t_regimes:
            _check_t_mode(regime, "t_regimes")
        _require(bool(self.alpha_grid), "alpha_grid", "must not be empty")
        _require(all(a > 0 for a in self.alpha_grid), "alpha_grid", "values > 0")
        return self

    # -- derived values ---------------------------------------------------

    @property
    def regularization(self) -> Regularization:
        derived = Regularization.from_learning_rate(self.alpha)
        return Regularization(
            user=derived.user if self.lambda_user is None else self.lambda_user,
            positive=derived.positive if self.lambda_pos is None else self.lambda_pos,
            negative=derived.negative if self.lambda_neg is None else self.lambda_neg,
        )

    def triples_per_client(
        self, dataset: InteractionDataset, t_mode: str | None = None
    ) -> int:
        """Resolve a T regime against the train split."""
        mode = self.t_mode if t_mode is None else t_mode
        if mode == PER_USER_AVG:
            return max(1, round(dataset.x_plus / dataset.n_users))
        return int(mode)

    def schedule(
        self,
        dataset: InteractionDataset,
        t_mode: str | None = None,
        pi: float | None = None,
    ) -> TrainingSchedule:
        """Training schedule for this config on ``dataset``."""
        T = self.triples_per_client(dataset, t_mode)
        sampling = self.client_sampling
        if sampling == "auto":
            sampling = "proportional" if T == 1 else "uniform"
        return TrainingSchedule(
            epochs=self.epochs,
            clients_per_round=self.clients_per_round,
            triples_per_client=T,
            pi=self.pi if pi is None else pi,
            alpha=self.alpha,
            reg=self.regularization,
            factors=self.factors,
            init_std=self.init_std,
            seed=self.seed,
            client_sampling=sampling,
            sticky_mask=self.sticky_mask,
            top_n=self.top_n,
            progress=self.progress,
        )

    def to_text(self) -> str:
        """Serialize in the ``key = value`` format read by :func:`load_config`."""
        lines = ["# federank experiment configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepSpec:
    """The grid of a pi sweep."""

    pis: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    t_regimes: tuple[str, ...] = ("1", PER_USER_AVG)

    def __post_init__(self) -> None:
        if not self.pis or not all(0 <= pi <= 1 for pi in self.pis):
            raise ConfigError("pi_grid", "values must be in [0, 1]")
        if not self.t_regimes:
            raise ConfigError("t_regimes", "must not be empty")
        for regime in self.t_regimes:
            _check_t_mode(regime, "t_regimes")

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "SweepSpec":
        return cls(pis=tuple(config.pi_grid), t_regimes=tuple(config.t_regimes))

    def cells(self) -> list[tuple[str, float]]:
        """``(T regime, pi)`` pairs in output order."""
        return [(regime, pi) for regime in self.t_regimes for pi in self.pis]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _require(condition: bool, field: str, message: str) -> None:
    if not condition:
        raise ConfigError(field, message)


def _check_t_mode(mode: str, field: str) -> None:
    if mode == PER_USER_AVG:
        return
    if not mode.isdigit() or int(mode) < 1:
        raise ConfigError(field, f"T must be a positive integer or {PER_USER_AVG!r}")


def parse_values(raw: Mapping[str, str]) -> dict[str, Any]:
    """Parse ``key -> text`` pairs into typed values.

    Raises:
        ConfigError: For unknown keys or unparseable values.
    """
    parsed = {}
    for key, text in raw.items():
        parser = _PARSERS.get(key)
        if parser is None:
            raise ConfigError(key, "unknown configuration key")
        try:
            parsed[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {text!r}: {exc}") from exc
    return parsed


def parse_config_text(text: str) -> dict[str, str]:
    """Split ``key = value`` lines; ``#`` starts a comment line.

    Raises:
        ConfigError: For lines without ``=``.
    """
    raw: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {number}", f"expected 'key = value', got {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Resolve defaults, an optional config file and overrides.

    Raises:
        FileNotFoundError: If ``path`` doesn't exist.
        ConfigError: For unknown keys or unparseable values.
    """
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    raw.update(overrides or {})

    config = ExperimentConfig.from_mapping(DEFAULTS).replace(**parse_values(raw))
    if config.dataset_format in DATASET_PROFILES:
        profile = DATASET_PROFILES[config.dataset_format]
        changes: dict[str, Any] = {}
        if "separator" not in raw:
            changes["separator"] = profile["separator"]
        if "columns" not in raw:
            changes["columns"] = tuple(profile["columns"])
        config = config.replace(**changes)
    return config
