"""Bootstrap bias correction and the iterative bootstrap fixed point.

``pi_star(theta)`` is the average of the initial estimator over H samples
simulated at ``theta`` from one fixed bank of uniforms.  The iterative
bootstrap repeats

    theta_{k+1} = project(theta_k + pi_hat - pi_star(theta_k))

from ``theta_0 = pi_hat``.  Its first iterate is the bootstrap bias
corrected (BBC) estimator and its limit is the JINI estimator.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .crn import CrnBank, make_bank
from .errors import (
    InitialEstimatorFailure,
    InnerFitError,
    InvalidArgument,
    JiniError,
    NumericFailure,
)
from .estimators import Fitter
from .models import Dataset, Family, ModelSpec, simulate_responses

FAILURE_POLICIES = ("abort", "skip-and-average")


@dataclass(frozen=True)
class IbConfig:
    H: int = 100
    tol: float = 1e-4
    max_iter: int = 100
    seed: int = 0
    failure_policy: str = "abort"

    def __post_init__(self):
        if int(self.H) < 1:
            raise InvalidArgument(f"H must be >= 1, got {self.H}")
        if not self.tol > 0:
            raise InvalidArgument(f"tol must be positive, got {self.tol}")
        if int(self.max_iter) < 0:
            raise InvalidArgument(f"max_iter must be >= 0, got {self.max_iter}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.failure_policy not in FAILURE_POLICIES:
            raise InvalidArgument(f"failure_policy must be one of {FAILURE_POLICIES}")


@dataclass
class IbTrace:
    iterates: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    pi_star_residuals: list = field(default_factory=list)
    converged: bool = False
    fit_failures: int = 0

    @property
    def iterations(self) -> int:
        return len(self.step_norms)


@dataclass(frozen=True)
class Corrected:
    estimate: np.ndarray
    method: str
    pi_hat: np.ndarray
    trace: IbTrace | None = None
    box_active: bool = False
    note: str = ""


@dataclass(frozen=True)
class PiStar:
    """Result of one pi_star evaluation with bookkeeping."""

    value: np.ndarray
    nonconverged: int
    failed: int


def _check_bank(model: ModelSpec, bank: CrnBank) -> None:
    # the synthetic estimator only reads the first p uniforms of a row
    ok = bank.n >= model.n if model.family is Family.SYNTHETIC else bank.n == model.n
    if not ok:
        raise InvalidArgument(f"bank rows have length {bank.n}, model needs {model.n}")


def pi_star_eval(model: ModelSpec, theta, bank: CrnBank, fitter, failure_policy: str = "abort") -> PiStar:
    """Average the initial estimator over the bank's H simulated samples.

    Inner fits that merely fail to converge (e.g. separation) contribute
    their projected last iterate and are counted.  Fits that fail outright
    follow ``failure_policy``.  The average is taken over rows in bank
    order, so the result does not depend on how the fits were scheduled.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (model.dim,):
        raise InvalidArgument(f"theta must have shape ({model.dim},), got {theta.shape}")
    if not model.box.contains(theta):
        raise InvalidArgument("theta lies outside the parameter box")
    _check_bank(model, bank)
    Y = simulate_responses(model, theta, bank.u)
    return _reduce(fitter(model, Y), failure_policy)


def _reduce(fit, failure_policy: str) -> PiStar:
    failed = fit.failed | ~np.all(np.isfinite(fit.params), axis=1)
    if failed.any():
        h = int(np.flatnonzero(failed)[0])
        if failure_policy == "abort" or failed.all():
            raise InnerFitError(h, fit.notes[h] or "non-finite estimate")
    ok = ~failed
    value = np.mean(fit.params[ok], axis=0)
    nonconv = int(np.sum(~fit.converged & ok))
    return PiStar(value, nonconv, int(failed.sum()))


class PathPiStar:
    """pi_star along an iteration path with the bank held fixed.

    A simulated row identical to the one of the previous evaluation gets
    the previous estimate back (the fitter is deterministic in the row);
    changed rows are refit starting from their previous converged
    estimate.  The first evaluation is an ordinary ``pi_star``.
    """

    def __init__(self, model: ModelSpec, bank: CrnBank, fitter, failure_policy: str = "abort"):
        _check_bank(model, bank)
        self.model = model
        self.bank = bank
        self.fitter = fitter
        self.failure_policy = failure_policy
        self._Y = None
        self._fit = None

    def __call__(self, theta) -> PiStar:
        model = self.model
        theta = np.asarray(theta, dtype=np.float64)
        if not model.box.contains(theta):
            raise InvalidArgument("theta lies outside the parameter box")
        Y = simulate_responses(model, theta, self.bank.u)
        if self._fit is None:
            fit = self.fitter(model, Y)
        else:
            prev = self._fit
            fit = copy.deepcopy(prev)
            idx = np.flatnonzero(np.any(Y != self._Y, axis=1))
            if idx.size:
                if isinstance(self.fitter, Fitter):
                    start = np.where((prev.converged[idx] & ~prev.failed[idx])[:, None], prev.params[idx], np.nan)
                    sub = self.fitter(model, Y[idx], start=start)
                else:
                    sub = self.fitter(model, Y[idx])
                for name in ("params", "converged", "iterations", "loglik", "grad_norm", "failed"):
                    getattr(fit, name)[idx] = getattr(sub, name)
                for k, i in enumerate(idx):
                    fit.notes[i] = sub.notes[k]
        self._Y, self._fit = Y, fit
        return _reduce(fit, self.failure_policy)


def pi_star(model: ModelSpec, theta, bank: CrnBank, fitter, failure_policy: str = "abort") -> np.ndarray:
    return pi_star_eval(model, theta, bank, fitter, failure_policy).value


def _check_pi_hat(model: ModelSpec, pi_hat) -> np.ndarray:
    pi_hat = np.asarray(pi_hat, dtype=np.float64)
    if pi_hat.shape != (model.dim,):
        raise InvalidArgument(f"pi_hat must have shape ({model.dim},), got {pi_hat.shape}")
    if not np.all(np.isfinite(pi_hat)):
        raise InvalidArgument("pi_hat must be finite")
    if not model.box.contains(pi_hat):
        raise InvalidArgument("pi_hat lies outside the parameter box")
    return pi_hat


def bbc(pi_hat, model: ModelSpec, bank: CrnBank, fitter, failure_policy: str = "abort") -> Corrected:
    """One-step correction 2 pi_hat - pi_star(pi_hat), projected onto the box."""
    pi_hat = _check_pi_hat(model, pi_hat)
    ps = pi_star(model, pi_hat, bank, fitter, failure_policy)
    # written as theta + residual so it matches the first iterate bit for bit
    raw = pi_hat + (pi_hat - ps)
    est = model.box.project(raw)
    return Corrected(est, "BBC", pi_hat, box_active=bool(np.any(est != raw)))


def ib_solve(pi_hat, model: ModelSpec, bank: CrnBank, fitter, cfg: IbConfig) -> Corrected:
    """Iterate to the fixed point pi_star(theta) = pi_hat.

    Stops once a step shorter than ``cfg.tol`` (L2) lands on an iterate
    whose residual is also within ``cfg.tol``, or after ``cfg.max_iter``
    steps.  The residual at the returned estimate is
    always evaluated, so the trace holds one more residual than steps.
    """
    pi_hat = _check_pi_hat(model, pi_hat)
    trace = IbTrace(iterates=[pi_hat.copy()])
    theta = pi_hat
    box_active = False
    evaluate = PathPiStar(model, bank, fitter, cfg.failure_policy)
    k = 0
    while True:
        try:
            ps = evaluate(theta)
        except NumericFailure as exc:
            exc.trace = trace
            raise
        trace.fit_failures += ps.nonconverged + ps.failed
        resid = pi_hat - ps.value
        rnorm = float(np.linalg.norm(resid))
        trace.pi_star_residuals.append(rnorm)
        # pi_star is a step function for discrete responses, so a short step
        # alone does not put the new iterate near the fixed point
        if trace.step_norms and trace.step_norms[-1] < cfg.tol and rnorm <= cfg.tol:
            trace.converged = True
            break
        if k >= cfg.max_iter:
            break
        raw = theta + resid
        new = model.box.project(raw)
        box_active = box_active or bool(np.any(new != raw))
        if not np.all(np.isfinite(new)):
            raise NumericFailure(f"non-finite iterate at step {k + 1}", trace=trace)
        step = float(np.linalg.norm(new - theta))
        trace.iterates.append(new)
        trace.step_norms.append(step)
        theta = new
        k += 1
    return Corrected(theta.copy(), "JINI", pi_hat, trace=trace, box_active=box_active)


def initial_estimate(data: Dataset, model: ModelSpec, fitter) -> np.ndarray:
    """Initial estimator on the observed data; failure or non-convergence is fatal."""
    if data.design.n != model.n or data.design.p_x != model.design.p_x:
        raise InvalidArgument("dataset does not match the model design")
    try:
        res = fitter.fit(model, data.y)
    except JiniError as exc:
        raise InitialEstimatorFailure(f"initial estimator failed on the observed data: {exc}") from exc
    if not res.converged or not np.all(np.isfinite(res.params)):
        why = res.note or "did not converge"
        raise InitialEstimatorFailure(f"initial estimator failed on the observed data: {why}")
    return res.params


def jini(data: Dataset, model: ModelSpec, cfg: IbConfig, fitter, bank: CrnBank | None = None) -> Corrected:
    """Fit the initial estimator, then solve for the iterative bootstrap fixed point."""
    pi_hat = initial_estimate(data, model, fitter)
    if bank is None:
        bank = make_bank(cfg.seed, cfg.H, model.n)
    return ib_solve(pi_hat, model, bank, fitter, cfg)
