"""Exception hierarchy shared by every federank module."""


class FedeRankError(Exception):
    """Base class for all federank errors."""


class CatalogBoundsError(FedeRankError, IndexError):
    """An item id falls outside the catalog."""


class DatasetError(FedeRankError):
    """Problem with the interaction data."""


class DatasetParseError(DatasetError):
    """A delimited-text record could not be parsed."""


class EmptyDatasetError(DatasetError):
    """Nothing is left after filtering or splitting."""


class SamplingError(FedeRankError):
    """A client cannot produce a valid training triple."""


class ProtocolError(FedeRankError):
    """A server update does not fit the server model."""


class DivergenceError(FedeRankError):
    """An update would make model parameters non-finite."""


class MetricError(FedeRankError):
    """A metric has no users to average over."""


class ConfigError(FedeRankError, ValueError):
    """Invalid configuration value.

    Attributes:
        field: Name of the offending configuration key.
    """

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class SweepError(FedeRankError):
    """One or more sweep cells failed.

    Attributes:
        failures: ``(cell label, error message)`` pairs.
    """

    def __init__(self, failures: list[tuple[str, str]]) -> None:
        cells = ", ".join(label for label, _ in failures)
        super().__init__(f"{len(failures)} sweep cell(s) failed: {cells}")
        self.failures = failures
