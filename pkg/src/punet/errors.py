"""Exception types shared across the package."""


class PUNetError(Exception):
    """Base class for all package errors."""


class DimensionError(PUNetError, ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(PUNetError, ValueError):
    """An argument is outside its allowed range."""


class ContractError(PUNetError, RuntimeError):
    """A caller violated an API contract (e.g. non-scalar loss)."""


class ConfigError(PUNetError, ValueError):
    """Invalid or unknown configuration."""


class NumericError(PUNetError, FloatingPointError):
    """Training produced a non-finite value."""
