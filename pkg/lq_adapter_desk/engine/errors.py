"""Exception hierarchy shared by the engine and the CLI.

The CLI maps these onto process exit codes; nothing here is swallowed.
"""


class LQAdapterError(Exception):
    """Base class for every error raised by the engine."""


class ConfigError(LQAdapterError, ValueError):
    """Configuration is invalid or internally inconsistent."""


class ShapeError(LQAdapterError, ValueError):
    """Tensor dimensions do not line up for an operation."""


class TapeError(LQAdapterError, RuntimeError):
    """Gradient tape misuse (non-scalar loss, second backward, empty tape)."""


class NumericalError(LQAdapterError, ArithmeticError):
    """A NaN or Inf appeared in a forward value, gradient or loss."""


class DataError(LQAdapterError, RuntimeError):
    """Dataset, image or manifest could not be read or is invalid."""


class CheckpointError(DataError):
    """Checkpoint manifest and blob disagree, or do not match the config."""
