"""Exception types shared across the package."""


class IamLabError(Exception):
    """Base class for all package errors."""


class ShapeError(IamLabError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(IamLabError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class NumericError(IamLabError, ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finiteness is required."""


class ContractError(IamLabError, ValueError):
    """A caller violated a documented precondition."""


class ConfigError(IamLabError, ValueError):
    """Invalid configuration key or value."""


class CheckpointError(IamLabError, IOError):
    """A checkpoint file is corrupt, truncated, or does not match the model."""
