"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``longattn.cli``).
"""


class LongAttnError(Exception):
    """Base class for all package errors."""


class ConfigError(LongAttnError, ValueError):
    """Invalid parameters or configuration (exit code 2)."""


class DimensionError(LongAttnError, ValueError):
    """Tensor shapes that cannot be combined."""


class StateError(LongAttnError, RuntimeError):
    """An object was used in a state that does not permit the operation."""


class NumericalError(LongAttnError, FloatingPointError):
    """A NaN or Inf appeared in an operation result (exit code 4)."""


class EmptyAttentionRowError(NumericalError):
    """A softmax row had every entry masked out."""


class ContractError(LongAttnError, ValueError):
    """A call violated a documented precondition (e.g. backward on a non-scalar)."""


class CheckpointError(LongAttnError, OSError):
    """A checkpoint file is unreadable, truncated or malformed (exit code 3)."""
