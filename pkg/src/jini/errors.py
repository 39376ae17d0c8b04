"""Exception hierarchy shared by every module."""

from __future__ import annotations


class JiniError(Exception):
    """Base class for all package errors."""


class InvalidArgument(JiniError, ValueError):
    """An argument is outside the documented domain."""


class NumericFailure(JiniError, ArithmeticError):
    """A computation produced non-finite values or could not proceed.

    ``index`` identifies the offending observation or sample when known,
    and ``trace`` carries a partial iteration trace when raised from the
    iterative bootstrap loop.
    """

    def __init__(self, message: str, index: int | None = None, trace=None):
        super().__init__(message)
        self.index = index
        self.trace = trace


class SimulationOverflow(NumericFailure):
    """A simulated mean is too large for the discrete support cap."""


class InitialEstimatorFailure(JiniError):
    """The initial estimator failed on the observed data."""


class InnerFitError(NumericFailure):
    """An initial-estimator fit failed on simulated sample ``h``."""

    def __init__(self, h: int, cause: str):
        super().__init__(f"inner fit failed on simulated sample h={h}: {cause}", index=h)
        self.h = h
        self.cause = cause
