"""Exception types raised across the package."""


class PowrError(Exception):
    """Base class for package errors."""


class PolicyError(PowrError, ValueError):
    """A policy returned something that is not a probability vector."""


class UnsupportedError(PowrError, NotImplementedError):
    """Operation not available for this environment."""


class NumericalError(PowrError, ArithmeticError):
    """A factorization or solve failed, usually because of NaN inputs."""


class ContractionError(PowrError, ArithmeticError):
    """gamma times the spectral radius of K^-1 M reached 1 after all refits."""

    def __init__(self, message, radius=None, lam=None):
        super().__init__(message)
        self.radius = radius
        self.lam = lam


class ConfigError(PowrError, ValueError):
    """Malformed configuration or override."""
