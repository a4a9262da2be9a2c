"""Exception hierarchy shared by all solvers and checks."""

from __future__ import annotations


class WbsdeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(WbsdeError, ValueError):
    """Malformed measure, grid or argument."""


class DomainError(WbsdeError, ValueError):
    """Argument outside the domain where the quantity is defined."""


class DomainCoverageError(DomainError):
    """Quadrature grid does not cover the reference law."""


class ConfigurationError(WbsdeError, ValueError):
    """Inconsistent problem or solver configuration."""


class CapabilityError(WbsdeError, TypeError):
    """A functional lacks a derivative that the requested solver needs."""


class GluingError(WbsdeError, ValueError):
    """Solutions on adjacent time intervals do not share a knot."""


class NonConvergenceError(WbsdeError, RuntimeError):
    """Iteration stopped before reaching tolerance.

    Attributes
    ----------
    gap : float
        Last observed iteration gap.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message: str, gap: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.gap = float(gap)
        self.iterations = int(iterations)
