"""Exception hierarchy shared by every optguard module."""


class OptGuardError(Exception):
    """Base class for all library errors."""


class InvalidInput(OptGuardError, ValueError):
    """Non-finite entries, wrong shapes, or an inconsistent configuration."""


class SingularSystem(OptGuardError):
    """A linear system was numerically singular; no solution is returned."""

    def __init__(self, message, verdict=None):
        super().__init__(message)
        self.verdict = verdict


class SingularInput(OptGuardError):
    """A matrix-calculus formula was evaluated at a numerically singular matrix."""


class DegenerateSpectrum(OptGuardError):
    """The extreme singular values are not simple, so their vectors are not unique."""


class NonFiniteForward(OptGuardError):
    """A backward pass was requested after a forward pass that produced non-finite values."""


class NotConverged(OptGuardError):
    """An iterative solver exhausted its budget. ``best`` holds the best iterate."""

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class ZeroMatrix(OptGuardError):
    """Operation is undefined for the zero matrix."""


class AlreadySingular(OptGuardError):
    """The input matrix is already numerically singular."""


class DegenerateRhs(OptGuardError):
    """The reference solution is zero, so a relative error is undefined."""
