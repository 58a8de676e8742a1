"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared while the finiteness guard was active."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class ParameterError(ValueError):
    """An argument or configuration value is out of range."""


class EmptyBatchError(ValueError):
    """An aggregation was asked to reduce over zero rows."""
