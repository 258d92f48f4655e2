"""Exception types shared across the package."""


class SliceNetError(Exception):
    """Base class for all package errors."""


class DimensionError(SliceNetError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(SliceNetError, ValueError):
    """A spec or config violates its invariants."""


class ContractError(SliceNetError, RuntimeError):
    """An API was used outside its contract (e.g. double backward)."""


class InputError(SliceNetError, ValueError):
    """Bad user data, e.g. an out-of-vocabulary token id."""


class NonFiniteError(SliceNetError, FloatingPointError):
    """A NaN or infinity showed up in a loss or gradient."""


class DataExhaustedError(SliceNetError, RuntimeError):
    """A finite data stream ran out and repetition was not allowed."""
