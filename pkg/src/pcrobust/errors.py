"""Exception types shared across the package."""


class PCRobustError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PCRobustError):
    """A config value is missing, out of range, or names an unknown entity."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")


class DegenerateInputError(PCRobustError):
    """Input has no usable geometric extent (e.g. all points coincide)."""


class DatasetParseError(PCRobustError):
    """A dataset file is malformed; carries the byte offset of the failure."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class NumericalFailureError(PCRobustError):
    """A forward/backward pass produced non-finite values."""

    def __init__(self, message, layer_index=None, max_statistic=None):
        self.layer_index = layer_index
        self.max_statistic = max_statistic
        super().__init__(message)


class DivergenceError(PCRobustError):
    """An optimization loop ran away (loss or estimate exceeded its cap)."""


class AdvisorDivergenceError(DivergenceError):
    """Pacing-advisor gradients exploded; callers should fall back to the anchor schedule."""


class InsufficientDataError(PCRobustError):
    """Not enough samples to compute a statistically meaningful quantity."""


class DegenerateClusteringError(PCRobustError):
    """Clustering requested on data with too few distinct values."""


class CheckpointMismatchError(PCRobustError):
    """Checkpoint config does not match the model it is being loaded into."""


class UnsupportedOperationError(PCRobustError):
    """The requested operation is not defined for this configuration."""
