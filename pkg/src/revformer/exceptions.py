"""Error types raised by the revformer engine."""


class RevformerError(ValueError):
    """Base class for all revformer errors."""


class DimensionError(RevformerError):
    """Tensor extents are incompatible with a kernel or layer."""


class InvariantViolationError(RevformerError):
    """A structural invariant (e.g. equal stream shapes) does not hold."""


class ReplayError(RevformerError):
    """A recorded RNG seed needed for recomputation is missing."""


class NumericError(RevformerError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(RevformerError):
    """A configuration value is invalid."""
