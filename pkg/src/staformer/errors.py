"""Exception types shared across the package."""


class StaformerError(Exception):
    """Base class for all package errors."""


class DimensionError(StaformerError, ValueError):
    """Tensor extents are incompatible for an operation."""


class ConfigurationError(StaformerError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(StaformerError, ValueError):
    """Input data violates a documented contract."""


class ContractError(StaformerError, RuntimeError):
    """An API was called in a state it does not support."""


class NumericError(StaformerError, ArithmeticError):
    """Non-finite values were produced or consumed."""


class IncompatibleCheckpointError(StaformerError, ValueError):
    """A checkpoint does not match the requested configuration."""
