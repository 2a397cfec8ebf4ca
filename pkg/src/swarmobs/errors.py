"""Exception types shared across the simulators and analysis tools."""

from __future__ import annotations


class SwarmObsError(Exception):
    """Base class for all package errors."""


class ParameterError(SwarmObsError, ValueError):
    """Invalid or unknown model parameter."""


class BVPError(SwarmObsError):
    """The orientation boundary-value problem could not be solved."""


class NonFiniteError(SwarmObsError, FloatingPointError):
    """A state became non-finite (usually a time step that is too large)."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} (t={t:.6g})")
        self.t = t


class CFLViolation(SwarmObsError):
    """Requested time step exceeds the hyperbolic stability limit."""


class NegativeDensityError(SwarmObsError):
    """Obstacle density dropped below zero."""

    def __init__(self, message: str, diag=None):
        super().__init__(message)
        self.diag = diag


class DegenerateField(SwarmObsError, ValueError):
    """Density field has zero maximum; no signature can be built."""


class EmptyCandidates(SwarmObsError, ValueError):
    """No candidate grid spacing was supplied."""
