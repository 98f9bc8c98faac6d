"""Exception types shared across the package."""


class BregmanGridError(Exception):
    """Base class for all errors raised by bregmangrid."""


class DomainError(BregmanGridError, ValueError):
    """An argument lies outside the domain of an operation (e.g. V <= 0)."""


class TopologyError(BregmanGridError, ValueError):
    """The network description is malformed or violates a standing assumption."""


class ConfigError(BregmanGridError, ValueError):
    """A controller configuration or scenario is inconsistent."""


class SolverError(BregmanGridError, RuntimeError):
    """The equilibrium solver failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class IntegrationError(BregmanGridError, RuntimeError):
    """The integrator produced a non-finite state.

    ``trace`` holds every record up to and including the last valid one.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def require_positive(V, name="V"):
    """Raise DomainError unless every entry of ``V`` is strictly positive."""
    import numpy as np

    V = np.asarray(V, dtype=float)
    if not np.all(V > 0.0):
        raise DomainError(f"{name} must be strictly positive element-wise, got min {V.min():.6g}")
    return V
