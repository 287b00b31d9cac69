"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failure classes to
distinct process exit statuses (config 2, data 3, numerics 4).
"""


class OsslError(Exception):
    exit_code = 1


class ConfigError(OsslError):
    """Invalid configuration: bad values, unknown keys, incompatible options."""

    exit_code = 2


class ValidationError(ConfigError):
    """An operation precondition failed on user-supplied input."""


class DataError(OsslError):
    """Missing, malformed, or inconsistent datasets and checkpoints."""

    exit_code = 3


class ShapeError(DataError):
    """Array dimensions do not line up."""


class UndefinedMetricError(DataError):
    """The requested metric is undefined on the given data (e.g. one class only)."""


class NumericsError(OsslError):
    """Non-finite values or failed numerical evaluation."""

    exit_code = 4


class TrainingError(NumericsError):
    """Training diverged; remembers the epoch where it happened."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
