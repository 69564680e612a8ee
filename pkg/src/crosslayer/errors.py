"""Exception types shared across the package.

CLI exit codes: ConfigurationError -> 1, NumericError -> 2.
"""


class CrossLayerError(Exception):
    """Base class for package errors."""


class ConfigurationError(CrossLayerError):
    """Invalid configuration, file, or problem description."""


class DomainError(CrossLayerError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class NumericError(CrossLayerError, RuntimeError):
    """A numerical procedure failed (non-bracketing bisection, infeasible LP, ...)."""
