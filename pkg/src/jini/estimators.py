"""Maximum likelihood fitters used as initial estimators and as benchmarks.

The fitters used inside the iterative bootstrap are batched: they take a
response matrix ``Y`` of shape (B, n) sharing one design matrix and fit all
B samples at once.  Each sample follows exactly the iteration it would
follow on its own (converged samples are frozen and dropped from the active
set), so a batch of one is the single-dataset fitter.

``grad_norm`` is the Euclidean norm of the (box-projected) score divided by
the number of observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.special import digamma, expit, gammainc, gammaincc, gammaln, log_expit, polygamma

from . import _kernels
from .errors import InvalidArgument, NumericFailure
from .models import Dataset, Family, ModelSpec, default_box

_GRAM_CHUNK = 20_000_000  # max elements of the (b, p, n) temporary
_STEP_TOL = 1e-6
# counts above this use polygamma differences instead of explicit sums
_SUM_CUTOFF = 64


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 100
    grad_tol: float = 1e-8
    step_halvings: int = 30
    ridge: float = 0.0

    def __post_init__(self):
        if self.max_iter < 0 or self.step_halvings < 0:
            raise InvalidArgument("iteration limits must be non-negative")
        if not self.grad_tol > 0:
            raise InvalidArgument("grad_tol must be positive")
        if self.ridge < 0:
            raise InvalidArgument("ridge must be non-negative")


@dataclass(frozen=True)
class FitResult:
    params: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    grad_norm: float
    note: str = ""


@dataclass
class BatchFit:
    params: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    loglik: np.ndarray
    grad_norm: np.ndarray
    failed: np.ndarray
    notes: list = field(default_factory=list)

    @classmethod
    def empty(cls, B: int, p: int) -> "BatchFit":
        return cls(
            params=np.zeros((B, p)),
            converged=np.zeros(B, dtype=bool),
            iterations=np.zeros(B, dtype=np.int64),
            loglik=np.full(B, -np.inf),
            grad_norm=np.full(B, np.inf),
            failed=np.zeros(B, dtype=bool),
            notes=[""] * B,
        )

    def result(self, i: int = 0) -> FitResult:
        return FitResult(
            params=self.params[i].copy(),
            converged=bool(self.converged[i]),
            iterations=int(self.iterations[i]),
            loglik=float(self.loglik[i]),
            grad_norm=float(self.grad_norm[i]),
            note=self.notes[i],
        )


# ---------------------------------------------------------------------------
# single-sample log-likelihoods with analytic gradients
# ---------------------------------------------------------------------------


def logistic_loglik(X, y, beta):
    eta = X @ beta
    ll = float(np.sum(y * eta + log_expit(-eta)))
    return ll, (y * expit(-eta) - (1.0 - y) * expit(eta)) @ X


def poisson_loglik(X, y, beta):
    eta = X @ beta
    mu = np.exp(eta)
    ll = float(np.sum(y * eta - mu - gammaln(y + 1.0)))
    return ll, (y - mu) @ X


def _lgamma_ratios(y, r):
    """log Gamma(y+r)/Gamma(r) and its first two r-derivatives for integer y.

    Small counts use exact finite sums; large counts use digamma and
    trigamma differences, which are accurate once y is not small.
    """
    a0 = np.empty(y.shape)
    a1 = np.empty(y.shape)
    a2 = np.empty(y.shape)
    big = y > _SUM_CUTOFF
    if big.any():
        yb, rb = y[big], r[big]
        a0[big] = gammaln(yb + rb) - gammaln(rb)
        a1[big] = digamma(yb + rb) - digamma(rb)
        a2[big] = polygamma(1, yb + rb) - polygamma(1, rb)
        small = ~big
        ys, rs = y[small], r[small]
        b0, b1, b2 = np.empty(ys.shape), np.empty(ys.shape), np.empty(ys.shape)
        _kernels.lgamma_ratio_sums(ys, rs, b0, b1, b2)
        a0[small], a1[small], a2[small] = b0, b1, b2
    else:
        _kernels.lgamma_ratio_sums(y, r, a0, a1, a2)
    return a0, a1, a2


def _nb_terms(y, mu, r):
    """Per-observation NB log pmf, d/d eta, d/dr, d2/dr2."""
    yy = np.ascontiguousarray(y, dtype=np.int64)
    rr = np.ascontiguousarray(np.broadcast_to(r, yy.shape), dtype=np.float64)
    a0, a1, a2 = _lgamma_ratios(yy, rr)
    l1p = np.log1p(mu / rr)
    rmu = rr + mu
    lp = a0 - gammaln(yy + 1.0) - rr * l1p + yy * (np.log(mu) - np.log(rmu))
    d_eta = rr * (yy - mu) / rmu
    d_r = a1 - l1p + (mu - yy) / rmu
    d_rr = a2 + mu / (rr * rmu) - (mu - yy) / rmu**2
    return lp, d_eta, d_r, d_rr


def negbin_loglik(X, y, theta):
    """NB log-likelihood in (beta, alpha) with its gradient."""
    beta, alpha = theta[:-1], float(theta[-1])
    r = 1.0 / alpha
    mu = np.exp(X @ beta)
    lp, d_eta, d_r, _ = _nb_terms(y, mu, r)
    grad = np.append(d_eta @ X, -r * r * np.sum(d_r))
    return float(np.sum(lp)), grad


def _poisson_log_survival(C: int, lam: np.ndarray):
    """log P(Y >= C) and its derivative w.r.t. eta = log(lam)."""
    with np.errstate(divide="ignore"):
        Q = gammaincc(C, lam)
        log_s = np.where(Q < 0.5, np.log1p(-Q), np.log(gammainc(C, lam)))
        log_f = (C - 1) * np.log(lam) - lam - gammaln(C)
    g = np.exp(np.log(lam) + log_f - log_s)
    return log_s, g


def censored_poisson_loglik(X, y, beta, C, hessian=False):
    """Censored Poisson log-likelihood; observations equal to C contribute log P(Y* >= C)."""
    eta = X @ beta
    lam = np.exp(eta)
    cens = y >= C
    d = y - lam
    w = lam.copy()
    ll = np.sum((y * eta - lam - gammaln(y + 1.0))[~cens])
    if np.any(cens):
        log_s, g = _poisson_log_survival(C, lam[cens])
        if not np.all(np.isfinite(log_s)):
            bad = int(np.flatnonzero(cens)[np.flatnonzero(~np.isfinite(log_s))[0]])
            raise NumericFailure(f"censored tail probability underflows at index {bad}", index=bad)
        ll += np.sum(log_s)
        d[cens] = g
        w[cens] = -g * (C - lam[cens] - g)
    grad = d @ X
    if hessian:
        return float(ll), grad, (X.T * w) @ X
    return float(ll), grad


def _negbin_censored_terms(y, mu, r, C):
    lp, d_eta, d_r, _ = _nb_terms(np.minimum(y, C), mu, r)
    cens = y >= C
    if np.any(cens):
        mc = np.ascontiguousarray(mu[cens])
        ls = np.empty(mc.size)
        de = np.empty(mc.size)
        dr = np.empty(mc.size)
        bad = _kernels.negbin_log_survival_vec(int(C), mc, float(r), 1e-13, ls, de, dr)
        if bad >= 0:
            idx = int(np.flatnonzero(cens)[bad])
            raise NumericFailure(f"censored NB tail could not be evaluated at index {idx}", index=idx)
        if not np.all(np.isfinite(ls)):
            idx = int(np.flatnonzero(cens)[np.flatnonzero(~np.isfinite(ls))[0]])
            raise NumericFailure(f"censored NB tail probability underflows at index {idx}", index=idx)
        lp[cens] = ls
        d_eta[cens] = de
        d_r[cens] = dr
    return lp, d_eta, d_r


def censored_negbin_loglik(X, y, theta, C):
    beta, alpha = theta[:-1], float(theta[-1])
    r = 1.0 / alpha
    mu = np.exp(X @ beta)
    lp, d_eta, d_r = _negbin_censored_terms(y, mu, r, C)
    grad = np.append(d_eta @ X, -r * r * np.sum(d_r))
    return float(np.sum(lp)), grad


# ---------------------------------------------------------------------------
# batched GLM machinery
# ---------------------------------------------------------------------------


def _weighted_gram(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """X^T diag(w_b) X for every row b of ``w``."""
    b, n = w.shape
    p = X.shape[1]
    Xt = X.T
    out = np.empty((b, p, p))
    step = max(1, _GRAM_CHUNK // max(1, p * n))
    for s in range(0, b, step):
        out[s : s + step] = (Xt[None, :, :] * w[s : s + step, None, :]) @ X
    return out


def _solve_batch(Hm: np.ndarray, g: np.ndarray) -> np.ndarray:
    p = Hm.shape[-1]
    scale = np.maximum(np.trace(Hm, axis1=1, axis2=2) / p, 1e-300)
    Hm = Hm + (1e-12 * scale)[:, None, None] * np.eye(p)
    try:
        return np.linalg.solve(Hm, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(Hi, gi, rcond=None)[0] for Hi, gi in zip(Hm, g)])


def _ridge_start(X: np.ndarray, Z: np.ndarray, ridge: float) -> np.ndarray:
    G = X.T @ X
    p = G.shape[0]
    kappa = ridge + 1e-8 * max(np.trace(G) / p, 1e-12)
    M = np.linalg.solve(G + kappa * np.eye(p), X.T)
    return Z @ M.T


def _warm(beta0: np.ndarray, start, cols: slice) -> np.ndarray:
    """Replace default starting rows by finite rows of ``start``."""
    if start is None:
        return np.zeros(beta0.shape[0], dtype=bool)
    start = np.asarray(start, dtype=np.float64)[:, cols]
    use = np.all(np.isfinite(start), axis=1)
    beta0[use] = start[use]
    return use


def _start_values(family: str, X: np.ndarray, Y: np.ndarray, ridge: float) -> np.ndarray:
    if family == "binary":
        z = np.clip((Y + 0.5) / 2.0, 0.05, 0.95)
        Z = np.log(z / (1.0 - z))
    else:
        Z = np.log(Y + 0.5)
    return _ridge_start(X, Z, ridge)


def _ll_logistic(X, Y, beta):
    eta = beta @ X.T
    return np.sum(Y * eta + log_expit(-eta), axis=1)


def _score_logistic(eta, Y):
    # both tails kept separately so 1 - mu does not round to zero
    mu = expit(eta)
    nu = expit(-eta)
    return Y * nu - (1.0 - Y) * mu, mu * nu


def _ll_poisson(X, Y, beta):
    eta = beta @ X.T
    with np.errstate(over="ignore", invalid="ignore"):
        return np.sum(Y * eta - np.exp(eta), axis=1)


def _score_poisson(eta, Y):
    mu = np.exp(eta)
    return Y - mu, mu


def _small_step(step, beta):
    # a tiny score with a unit-size Newton step means the optimum is at infinity
    return np.max(np.abs(step), axis=1) <= _STEP_TOL * (1.0 + np.max(np.abs(beta), axis=1))


def _newton_glm(X, Y, ll_fn, score_fn, beta, cfg: FitConfig, lo, hi):
    """Fisher scoring with per-sample step halving on a batch of responses.

    A sample converges when both the score and the Newton step are small.
    Samples whose iterate leaves the box (divergence, e.g. separation) are
    stopped, projected and flagged as not converged.
    """
    B, n = Y.shape
    p = X.shape[1]
    out = BatchFit.empty(B, p)
    beta = np.array(beta, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        ll = ll_fn(X, Y, beta)
    done = ~np.isfinite(ll)
    out.failed[:] = done
    ridge = cfg.ridge
    eye = np.eye(p)
    for it in range(cfg.max_iter + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        b = beta[act]
        y = Y[act]
        with np.errstate(over="ignore"):
            resid, w = score_fn(b @ X.T, y)
        g = resid @ X - ridge * b
        gn = np.linalg.norm(g, axis=1) / n
        out.grad_norm[act] = gn
        Hm = _weighted_gram(X, w)
        if ridge:
            Hm += ridge * eye
        step = _solve_batch(Hm, g)
        ok = (gn <= cfg.grad_tol) & _small_step(step, b)
        # the last Newton step is tiny but doubles the number of correct digits
        beta[act[ok]] = b[ok] + step[ok]
        out.converged[act[ok]] = True
        done[act[ok]] = True
        if it == cfg.max_iter:
            break
        keep = ~ok
        act, b, y, step = act[keep], b[keep], y[keep], step[keep]
        if act.size == 0:
            break
        new_b = b.copy()
        new_ll = ll[act].copy()
        old_ll = ll[act]
        slack = 1e-12 * (1.0 + np.abs(old_ll))
        t = np.ones(act.size)
        pending = np.ones(act.size, dtype=bool)
        for _ in range(cfg.step_halvings + 1):
            idx = np.flatnonzero(pending)
            cand = b[idx] + t[idx, None] * step[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                llc = ll_fn(X, y[idx], cand) - 0.5 * ridge * np.sum(cand * cand, axis=1)
            good = np.isfinite(llc) & (llc >= old_ll[idx] - 0.5 * ridge * np.sum(b[idx] ** 2, axis=1) - slack[idx])
            gi = idx[good]
            new_b[gi] = cand[good]
            new_ll[gi] = llc[good] + 0.5 * ridge * np.sum(cand[good] ** 2, axis=1)
            pending[gi] = False
            t[idx[~good]] *= 0.5
            if not pending.any():
                break
        out.iterations[act] += 1
        beta[act] = new_b
        ll[act] = new_ll
        stuck = act[pending]
        done[stuck] = True
        for s in stuck:
            out.notes[s] = "step-halving exhausted"
        outside = np.any((new_b < lo) | (new_b > hi), axis=1)
        if outside.any():
            gone = act[outside]
            beta[gone] = np.clip(beta[gone], lo, hi)
            done[gone] = True
            for s in gone:
                out.notes[s] = "diverged: iterate left the parameter box"
    out.params = np.clip(beta, lo, hi)
    with np.errstate(over="ignore", invalid="ignore"):
        out.loglik = ll_fn(X, Y, out.params)
    return out


def _poisson_const(Y):
    return np.sum(gammaln(Y + 1.0), axis=1)


def fit_logistic_batch(X, Y, cfg: FitConfig = FitConfig(), box=None, start=None) -> BatchFit:
    X = np.asarray(X, dtype=np.float64)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    _check_batch(X, Y)
    lo, hi = _beta_box(box, X.shape[1], Family.LOGISTIC)
    beta0 = _start_values("binary", X, Y, cfg.ridge)
    _warm(beta0, start, slice(None))
    return _newton_glm(X, Y, _ll_logistic, _score_logistic, beta0, cfg, lo, hi)


def fit_poisson_batch(X, Y, cfg: FitConfig = FitConfig(), box=None, start=None) -> BatchFit:
    X = np.asarray(X, dtype=np.float64)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    _check_batch(X, Y)
    lo, hi = _beta_box(box, X.shape[1], Family.POISSON)
    beta0 = _start_values("count", X, Y, cfg.ridge)
    _warm(beta0, start, slice(None))
    res = _newton_glm(X, Y, _ll_poisson, _score_poisson, beta0, cfg, lo, hi)
    res.loglik = res.loglik - _poisson_const(Y)
    return res


def _check_batch(X, Y):
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidArgument("design must be a non-empty 2-D array")
    if Y.shape[1] != X.shape[0]:
        raise InvalidArgument(f"responses have length {Y.shape[1]}, design has {X.shape[0]} rows")


def _beta_box(box, p_x, family):
    if box is None:
        box = default_box(family, p_x + (1 if family.has_alpha else 0))
    return np.asarray(box.lower[:p_x]), np.asarray(box.upper[:p_x])


# ---------------------------------------------------------------------------
# negative binomial in (beta, log alpha)
# ---------------------------------------------------------------------------


def _nb_alpha_parts(Y, mu, r):
    """Profile pieces in r: sum f_r, sum f_rr per row (rows share a single r)."""
    _, _, d_r, d_rr = _nb_terms(Y, mu, r[:, None])
    return d_r.sum(axis=1), d_rr.sum(axis=1)


def _nb_full_ll(Y, mu, r):
    lp, _, _, _ = _nb_terms(Y, mu, r[:, None])
    return lp.sum(axis=1)


def _nb_eta_ll(Y, eta, r):
    # beta-dependent part of the NB log-likelihood at fixed r
    rr = r[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        return np.sum(Y * eta - (rr + Y) * np.logaddexp(np.log(rr), eta), axis=1)


def _alpha_step(Y, mu, a, a_lo, a_hi, tol_a, max_inner=60):
    """Maximize the NB log-likelihood over a = log(alpha) at fixed means.

    Safeguarded Newton inside a shrinking bracket; an edge is returned
    when the derivative keeps its sign up to it.  Returns (a, pinned_low).
    """
    b = a.shape[0]
    a = a.copy()
    lo = np.full(b, a_lo)
    hi = np.full(b, a_hi)
    pinned = np.zeros(b, dtype=bool)
    active = np.arange(b)
    for _ in range(max_inner):
        if active.size == 0:
            break
        aa = a[active]
        r = np.exp(-aa)
        fr, frr = _nb_alpha_parts(Y[active], mu[active], r)
        g = -r * fr
        h = r * r * frr + r * fr
        n = Y.shape[1]
        at_lo = (aa <= a_lo) & (g <= 0)
        at_hi = (aa >= a_hi) & (g >= 0)
        small = np.abs(g) / n <= tol_a * np.exp(aa)
        finished = at_lo | at_hi | small | (hi[active] - lo[active] < 1e-13)
        pinned[active[at_lo]] = True
        upd = ~finished
        idx = active[upd]
        g, h, aa = g[upd], h[upd], aa[upd]
        pos = g > 0
        lo[idx[pos]] = aa[pos]
        hi[idx[~pos]] = aa[~pos]
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = np.where(h < 0, aa - g / h, np.nan)
        l, u = lo[idx], hi[idx]
        inside = (newton > l) & (newton < u)
        prop = np.where(inside, newton, 0.5 * (l + u))
        # jump straight to an edge whose side has never been bracketed
        to_lo = ~inside & (l == a_lo) & ~pos & (aa > a_lo) & (np.nan_to_num(newton, nan=-np.inf) <= l)
        to_hi = ~inside & (u == a_hi) & pos & (aa < a_hi) & (np.nan_to_num(newton, nan=np.inf) >= u)
        prop = np.where(to_lo, a_lo, np.where(to_hi, a_hi, prop))
        a[idx] = prop
        active = idx
    return a, pinned


def _nb_state(X, Yi, beta, a, ridge):
    """Log-likelihood, gradient in (beta, a) and observed Hessian blocks."""
    r = np.exp(-a)
    rr = r[:, None]
    with np.errstate(over="ignore"):
        mu = np.exp(beta @ X.T)
    lp, d_eta, d_r, d_rr = _nb_terms(Yi, mu, rr)
    y = Yi.astype(np.float64)
    rmu = rr + mu
    ll = lp.sum(axis=1) - 0.5 * ridge * np.sum(beta * beta, axis=1)
    g_beta = d_eta @ X - ridge * beta
    fr = d_r.sum(axis=1)
    g_a = -r * fr
    h_aa = r * r * d_rr.sum(axis=1) + r * fr
    w_obs = (rr + y) * rr * mu / rmu**2
    h_ba = (-rr * (y - mu) * mu / rmu**2) @ X
    return dict(r=r, mu=mu, y=y, ll=ll, g_beta=g_beta, g_a=g_a, h_aa=h_aa, w_obs=w_obs, h_ba=h_ba)


def _nb_joint_direction(X, st, a, a_lo, a_hi, ridge):
    """Newton direction in (beta, a) from the observed Hessian.

    Returns (d_beta, d_a, usable); ``usable`` is False where the Hessian is
    not negative definite.  When log(alpha) sits on a box edge and the step
    points outward, only beta moves.
    """
    p = X.shape[1]
    Hbb = _weighted_gram(X, st["w_obs"])
    if ridge:
        Hbb += ridge * np.eye(p)
    # solve with -Hbb (positive definite) for both right-hand sides at once
    rhs = np.stack([st["g_beta"], st["h_ba"]], axis=-1)
    sol = np.linalg.solve(Hbb + 1e-12 * (np.trace(Hbb, axis1=1, axis2=2) / p)[:, None, None] * np.eye(p), rhs)
    u, v = sol[..., 0], sol[..., 1]  # u = (-Hbb)^{-1} g_beta, v = (-Hbb)^{-1} h_ba
    schur = st["h_aa"] + np.sum(st["h_ba"] * v, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_a = -(st["g_a"] + np.sum(st["h_ba"] * u, axis=1)) / schur
    d_beta = u + v * d_a[:, None]
    usable = schur < 0
    edge = ((a <= a_lo) & ~(d_a > 0)) | ((a >= a_hi) & ~(d_a < 0))
    d_a = np.where(edge, 0.0, d_a)
    d_beta = np.where(edge[:, None], u, d_beta)
    usable = usable | edge
    return d_beta, d_a, usable


def fit_negbin_batch(X, Y, cfg: FitConfig = FitConfig(), box=None, start=None) -> BatchFit:
    """NB maximum likelihood in (beta, alpha) for a batch of responses.

    The first step, and any step where the joint observed Hessian is not
    negative definite, alternates one Fisher-scoring step for beta with a
    bracketed Newton maximization over log(alpha).  Otherwise a joint
    Newton step in (beta, log alpha) is taken.  Every step is safeguarded
    by halving on the log-likelihood.
    """
    X = np.asarray(X, dtype=np.float64)
    Yi = np.atleast_2d(np.asarray(Y)).astype(np.int64)
    _check_batch(X, Yi)
    B, n = Yi.shape
    p = X.shape[1]
    if box is None:
        box = default_box(Family.NEGBIN, p + 1)
    lo, hi = np.asarray(box.lower[:p]), np.asarray(box.upper[:p])
    a_lo, a_hi = math.log(box.lower[-1]), math.log(box.upper[-1])
    ridge = cfg.ridge
    out = BatchFit.empty(B, p + 1)
    beta = _start_values("count", X, Yi.astype(np.float64), ridge)
    a = np.full(B, min(max(math.log(0.5), a_lo), a_hi))
    warm = _warm(beta, start, slice(0, p))
    if warm.any():
        a[warm] = np.log(np.clip(np.asarray(start)[warm, p], box.lower[-1], box.upper[-1]))
    pinned = np.zeros(B, dtype=bool)
    done = np.zeros(B, dtype=bool)
    for it in range(cfg.max_iter + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        b, aa, yi = beta[act], a[act], Yi[act]
        st = _nb_state(X, yi, b, aa, ridge)
        bad = ~np.isfinite(st["ll"])
        if bad.any():
            out.failed[act[bad]] = True
            done[act[bad]] = True
            keep = ~bad
            act, b, aa, yi = act[keep], b[keep], aa[keep], yi[keep]
            st = {k: v[keep] for k, v in st.items()}
            if act.size == 0:
                continue
        r = st["r"]
        # convergence is judged on the natural alpha scale, projected on the box
        g_alpha = st["g_a"] * r
        g_alpha = np.where(((aa <= a_lo) & (g_alpha < 0)) | ((aa >= a_hi) & (g_alpha > 0)), 0.0, g_alpha)
        gn = np.sqrt(np.sum(st["g_beta"] ** 2, axis=1) + g_alpha**2) / n
        out.grad_norm[act] = gn
        d_beta, d_a, usable = _nb_joint_direction(X, st, aa, a_lo, a_hi, ridge)
        if it == 0:
            usable &= warm[act]
        pinned[act] = (aa <= a_lo) & (g_alpha == 0) & (st["g_a"] <= 0)
        ok = (gn <= cfg.grad_tol) & usable & _small_step(d_beta, b)
        out.converged[act[ok]] = True
        done[act[ok]] = True
        if it == cfg.max_iter:
            break
        sel = ~ok
        act, b, aa, yi, d_beta, d_a, usable = act[sel], b[sel], aa[sel], yi[sel], d_beta[sel], d_a[sel], usable[sel]
        st = {k: v[sel] for k, v in st.items()}
        if act.size == 0:
            break
        out.iterations[act] += 1
        new_b, new_a = b.copy(), aa.copy()
        fallback = ~usable
        # joint Newton with halving on the full log-likelihood
        pending = usable.copy()
        t = np.ones(act.size)
        old = st["ll"]
        slack = 1e-12 * (1.0 + np.abs(old))
        for _ in range(cfg.step_halvings + 1):
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            cb = b[idx] + t[idx, None] * d_beta[idx]
            ca = np.clip(aa[idx] + t[idx] * d_a[idx], a_lo, a_hi)
            with np.errstate(over="ignore", invalid="ignore"):
                llc = _nb_loglik_rows(X, yi[idx], cb, ca, ridge)
            good = np.isfinite(llc) & (llc >= old[idx] - slack[idx])
            new_b[idx[good]] = cb[good]
            new_a[idx[good]] = ca[good]
            pending[idx[good]] = False
            t[idx[~good]] *= 0.5
        fallback |= pending
        stuck = np.zeros(act.size, dtype=bool)
        if fallback.any():
            fb = np.flatnonzero(fallback)
            nb_, na_, st_ok = _nb_alternating_step(X, yi[fb], b[fb], aa[fb], st["r"][fb], st["mu"][fb], st["g_beta"][fb], cfg, a_lo, a_hi)
            new_b[fb], new_a[fb] = nb_, na_
            stuck[fb[~st_ok]] = True
        beta[act] = new_b
        a[act] = new_a
        outside = np.any((new_b < lo) | (new_b > hi), axis=1)
        for s_, flag, note in ((act[outside], True, "diverged: iterate left the parameter box"),
                               (act[stuck & ~outside], True, "step-halving exhausted")):
            if s_.size:
                done[s_] = flag
                for s in s_:
                    out.notes[s] = note
        if outside.any():
            beta[act[outside]] = np.clip(beta[act[outside]], lo, hi)
    alpha = np.where(a <= a_lo, box.lower[-1], np.minimum(np.exp(a), box.upper[-1]))
    out.params = np.column_stack([np.clip(beta, lo, hi), alpha])
    with np.errstate(over="ignore", invalid="ignore"):
        out.loglik = _nb_loglik_rows(X, Yi, out.params[:, :p], np.log(out.params[:, p]), 0.0)
    for s in np.flatnonzero(pinned & out.converged):
        out.notes[s] = "alpha at lower box edge (profile likelihood decreasing in alpha)"
    return out


def _nb_loglik_rows(X, Yi, beta, a, ridge):
    with np.errstate(over="ignore"):
        mu = np.exp(beta @ X.T)
    ok = np.all(np.isfinite(mu) & (mu > 0), axis=1)
    ll = np.full(beta.shape[0], -np.inf)
    if ok.any():
        lp, _, _, _ = _nb_terms(Yi[ok], mu[ok], np.exp(-a[ok])[:, None])
        ll[ok] = lp.sum(axis=1) - 0.5 * ridge * np.sum(beta[ok] ** 2, axis=1)
    return ll


def _nb_alternating_step(X, Yi, b, a, r, mu, g_beta, cfg, a_lo, a_hi):
    """One Fisher-scoring step for beta at fixed alpha, then alpha at the new beta."""
    p = X.shape[1]
    y = Yi.astype(np.float64)
    rr = r[:, None]
    w = mu * rr / (rr + mu)
    Hm = _weighted_gram(X, w)
    if cfg.ridge:
        Hm += cfg.ridge * np.eye(p)
    step = _solve_batch(Hm, g_beta)
    eta = b @ X.T
    old = _nb_eta_ll(y, eta, r) - 0.5 * cfg.ridge * np.sum(b * b, axis=1)
    slack = 1e-12 * (1.0 + np.abs(old))
    t = np.ones(b.shape[0])
    pending = np.ones(b.shape[0], dtype=bool)
    new_b = b.copy()
    for _ in range(cfg.step_halvings + 1):
        idx = np.flatnonzero(pending)
        cand = b[idx] + t[idx, None] * step[idx]
        llc = _nb_eta_ll(y[idx], cand @ X.T, r[idx]) - 0.5 * cfg.ridge * np.sum(cand * cand, axis=1)
        good = np.isfinite(llc) & (llc >= old[idx] - slack[idx])
        new_b[idx[good]] = cand[good]
        pending[idx[good]] = False
        t[idx[~good]] *= 0.5
        if not pending.any():
            break
    new_a = a.copy()
    live = np.flatnonzero(~pending & np.all(np.abs(new_b) < 1e3, axis=1))
    if live.size:
        with np.errstate(over="ignore"):
            mu_new = np.exp(new_b[live] @ X.T)
        new_a[live], _ = _alpha_step(Yi[live], mu_new, a[live], a_lo, a_hi, 0.1 * cfg.grad_tol)
    return new_b, new_a, ~pending


# ---------------------------------------------------------------------------
# single-dataset entry points
# ---------------------------------------------------------------------------


def _design(data: Dataset) -> np.ndarray:
    if data.n == 0:
        raise InvalidArgument("empty dataset")
    return data.design.x


def _single(batch: BatchFit) -> FitResult:
    if batch.failed[0]:
        raise NumericFailure("non-finite log-likelihood")
    return batch.result(0)


def fit_logistic_mle(data: Dataset, cfg: FitConfig = FitConfig(), box=None) -> FitResult:
    if data.kind != "binary":
        raise InvalidArgument("logistic fit requires binary responses")
    return _single(fit_logistic_batch(_design(data), data.y[None, :], cfg, box))


def fit_poisson_mle(data: Dataset, cfg: FitConfig = FitConfig(), box=None) -> FitResult:
    """Poisson MLE that treats every response as exact (censoring ignored)."""
    return _single(fit_poisson_batch(_design(data), data.y[None, :], cfg, box))


def fit_negbin_mle(data: Dataset, cfg: FitConfig = FitConfig(), box=None) -> FitResult:
    """NB MLE of (beta, alpha); censoring, if any, is ignored."""
    return _single(fit_negbin_batch(_design(data), data.y[None, :], cfg, box))


def fit_censored_poisson_mle(data: Dataset, cfg: FitConfig = FitConfig(), box=None) -> FitResult:
    if data.censor_at is None:
        raise InvalidArgument("censored fit requires censor_at")
    X = _design(data)
    y = data.y.astype(np.float64)
    C = int(data.censor_at)
    p = X.shape[1]
    lo, hi = _beta_box(box, p, Family.POISSON_CENSORED)
    n = X.shape[0]
    beta = _start_values("count", X, y[None, :], cfg.ridge)[0]
    gn = np.inf
    note = ""
    it = 0
    converged = False
    while True:
        ll, g, Hn = censored_poisson_loglik(X, y, beta, C, hessian=True)
        g = g - cfg.ridge * beta
        gn = float(np.linalg.norm(g) / n)
        Hm = Hn + cfg.ridge * np.eye(p)
        try:
            evals = np.linalg.eigvalsh(Hm)
            shift = 0.0 if evals.min() > 1e-10 * max(evals.max(), 1e-300) else -evals.min() + 1e-6 * max(evals.max(), 1.0)
            step = np.linalg.solve(Hm + shift * np.eye(p), g)
        except np.linalg.LinAlgError:
            step = g / max(np.abs(g).max(), 1.0)
        if gn <= cfg.grad_tol and _small_step(step[None, :], beta[None, :])[0]:
            converged = True
            break
        if it >= cfg.max_iter:
            break
        obj = ll - 0.5 * cfg.ridge * beta @ beta
        t = 1.0
        accepted = False
        for _ in range(cfg.step_halvings + 1):
            cand = beta + t * step
            try:
                llc = censored_poisson_loglik(X, y, cand, C)[0] - 0.5 * cfg.ridge * cand @ cand
            except NumericFailure:
                llc = -np.inf
            if np.isfinite(llc) and llc >= obj - 1e-12 * (1 + abs(obj)):
                accepted = True
                break
            t *= 0.5
        it += 1
        if not accepted:
            note = "step-halving exhausted"
            break
        beta = cand
        if np.any((beta < lo) | (beta > hi)):
            beta = np.clip(beta, lo, hi)
            note = "diverged: iterate left the parameter box"
            break
    ll = censored_poisson_loglik(X, y, beta, C)[0]
    return FitResult(np.clip(beta, lo, hi), converged, it, ll, gn, note)


def _projected_grad_norm(grad, theta, lo, hi, n):
    g = np.array(grad, dtype=np.float64)
    g[(theta <= lo) & (g < 0)] = 0.0
    g[(theta >= hi) & (g > 0)] = 0.0
    return float(np.linalg.norm(g) / n)


def fit_censored_negbin_mle(data: Dataset, cfg: FitConfig = FitConfig(), box=None) -> FitResult:
    """Censored NB MLE by L-BFGS-B on (beta, log alpha), polished with Newton steps.

    The Newton polish uses a Hessian built from central differences of the
    analytic gradient.
    """
    if data.censor_at is None:
        raise InvalidArgument("censored fit requires censor_at")
    X = _design(data)
    y = data.y.astype(np.int64)
    C = int(data.censor_at)
    n, p = X.shape
    if box is None:
        box = default_box(Family.NEGBIN_CENSORED, p + 1)
    lo_n, hi_n = np.asarray(box.lower), np.asarray(box.upper)
    lo = np.append(lo_n[:p], math.log(lo_n[-1]))
    hi = np.append(hi_n[:p], math.log(hi_n[-1]))

    def to_theta(z):
        # exp(log(edge)) is not the edge in floating point
        alpha = lo_n[-1] if z[p] <= lo[p] else math.exp(z[p])
        return np.append(z[:p], alpha)

    def neg(z):
        th = to_theta(z)
        try:
            ll, g = censored_negbin_loglik(X, y, th, C)
        except NumericFailure:
            return np.inf, np.zeros_like(z)
        g = g.copy()
        g[p] *= th[p]  # chain rule to log(alpha)
        ll -= 0.5 * cfg.ridge * z[:p] @ z[:p]
        g[:p] -= cfg.ridge * z[:p]
        return -ll / n, -g / n

    nb0 = fit_negbin_batch(X, np.minimum(y, C)[None, :], FitConfig(max_iter=50, grad_tol=1e-6), box)
    z = np.append(nb0.params[0, :p], math.log(nb0.params[0, p]))
    z = np.clip(z, lo, hi)
    res = optimize.minimize(
        neg, z, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
        options={"maxiter": max(cfg.max_iter * 10, 200), "gtol": 1e-12, "ftol": 1e-15},
    )
    z = np.clip(res.x, lo, hi)
    iters = int(res.nit)

    def nat_grad(z):
        th = to_theta(z)
        ll, g = censored_negbin_loglik(X, y, th, C)
        g = g.copy()
        g[:p] -= cfg.ridge * z[:p]
        return th, ll, g

    th, ll, g = nat_grad(z)
    gn = _projected_grad_norm(g, th, lo_n, hi_n, n)
    note = ""
    for _ in range(cfg.max_iter):
        if gn <= cfg.grad_tol:
            break
        f0, gz = neg(z)
        free = ~(((z <= lo) & (gz > 0)) | ((z >= hi) & (gz < 0)))
        Hz = np.zeros((p + 1, p + 1))
        for j in range(p + 1):
            e = np.zeros(p + 1)
            e[j] = 1e-5 * max(1.0, abs(z[j]))
            Hz[:, j] = (neg(z + e)[1] - neg(z - e)[1]) / (2 * e[j])
        Hz = 0.5 * (Hz + Hz.T)
        Hf = Hz[np.ix_(free, free)]
        try:
            evals = np.linalg.eigvalsh(Hf)
            if evals.min() <= 0:
                Hf = Hf + (-evals.min() + 1e-8) * np.eye(Hf.shape[0])
            step = np.zeros(p + 1)
            step[free] = -np.linalg.solve(Hf, gz[free])
        except np.linalg.LinAlgError:
            break
        t = 1.0
        improved = False
        for _ in range(cfg.step_halvings + 1):
            cand = np.clip(z + t * step, lo, hi)
            fc, _ = neg(cand)
            if np.isfinite(fc) and fc <= f0 + 1e-15 * (1 + abs(f0)):
                improved = True
                break
            t *= 0.5
        iters += 1
        if not improved:
            note = "step-halving exhausted"
            break
        z = cand
        th, ll, g = nat_grad(z)
        gn = _projected_grad_norm(g, th, lo_n, hi_n, n)
    th, ll, g = nat_grad(z)
    gn = _projected_grad_norm(g, th, lo_n, hi_n, n)
    return FitResult(np.clip(th, lo_n, hi_n), gn <= cfg.grad_tol, iters, ll, gn, note)


# ---------------------------------------------------------------------------
# fitters bound to a model (used by pi_star and the harness)
# ---------------------------------------------------------------------------


def synthetic_fit_batch(model: ModelSpec, Y, cfg: FitConfig = FitConfig()) -> BatchFit:
    """The synthetic pseudo-model's samples already are the estimates."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    B, p = Y.shape
    out = BatchFit.empty(B, p)
    out.params = model.box.project(Y)
    out.converged[:] = True
    out.loglik[:] = 0.0
    out.grad_norm[:] = 0.0
    out.failed = ~np.all(np.isfinite(Y), axis=1)
    return out


@dataclass(frozen=True)
class Fitter:
    """An estimator applied to a batch of response vectors from one model."""

    name: str
    fn: Callable
    cfg: FitConfig = FitConfig()

    def __call__(self, model: ModelSpec, Y, start=None) -> BatchFit:
        """Fit every row of ``Y``; finite rows of ``start`` replace the default starting values."""
        if model.family is Family.SYNTHETIC:
            return self.fn(model, Y, self.cfg)
        return self.fn(model.design.x, Y, self.cfg, model.box, start=start)

    def fit(self, model: ModelSpec, y) -> FitResult:
        return self(model, np.asarray(y)[None, :]).result(0)


_NAIVE = {
    Family.LOGISTIC: ("logistic-mle", fit_logistic_batch),
    Family.LOGISTIC_MISCLASSIFIED: ("logistic-mle", fit_logistic_batch),
    Family.POISSON: ("poisson-mle", fit_poisson_batch),
    Family.POISSON_CENSORED: ("poisson-mle", fit_poisson_batch),
    Family.NEGBIN: ("negbin-mle", fit_negbin_batch),
    Family.NEGBIN_CENSORED: ("negbin-mle", fit_negbin_batch),
    Family.SYNTHETIC: ("synthetic", synthetic_fit_batch),
}


def initial_fitter(family: Family | str, cfg: FitConfig = FitConfig()) -> Fitter:
    """The readily available (possibly inconsistent) MLE for a model family."""
    name, fn = _NAIVE[Family(family)]
    return Fitter(name, fn, cfg)


def benchmark_fit(model: ModelSpec, y, cfg: FitConfig = FitConfig()) -> FitResult:
    """Consistent MLE for censored families; the plain MLE otherwise."""
    data = Dataset(model.design, y, kind=model.family.kind, censor_at=model.censor_at)
    if model.family is Family.POISSON_CENSORED:
        return fit_censored_poisson_mle(data, cfg, model.box)
    if model.family is Family.NEGBIN_CENSORED:
        return fit_censored_negbin_mle(data, cfg, model.box)
    if model.family is Family.LOGISTIC_MISCLASSIFIED:
        raise InvalidArgument("no benchmark estimator is available for misclassified logistic regression")
    return initial_fitter(model.family, cfg).fit(model, y)
