"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared, or a numeric routine cannot proceed."""


class UsageError(ValueError):
    """An API was called with arguments outside its contract."""


class IngestionError(ValueError):
    """A dataset file could not be parsed."""


class ConfigError(ValueError):
    """A run configuration is invalid or inconsistent with its inputs."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the model."""
