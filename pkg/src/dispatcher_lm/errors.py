"""Shared exception types.

Exit-code mapping used by the CLI: DataError and usage problems -> 2,
NumericError -> 3, property-check failures -> 4.
"""


class DispatcherError(Exception):
    """Base class for all library errors."""


class DimensionError(DispatcherError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(DispatcherError, ValueError):
    """An argument violates a documented precondition."""


class DataError(DispatcherError, ValueError):
    """Input data (corpus, token ids, checkpoint bytes) is malformed."""


class CapacityError(DispatcherError, ValueError):
    """A sequence exceeds the configured maximum length."""


class NumericError(DispatcherError, ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""
