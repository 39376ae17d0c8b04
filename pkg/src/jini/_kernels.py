"""Compiled scalar kernels for discrete quantiles and negative binomial sums.

All kernels work with integer responses and use multiplicative pmf
recurrences instead of gamma-function ratios wherever a walk over the
support is needed.  Quantile kernels return ``-1`` when the support cap
is exceeded; the Python wrappers turn that into an exception.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SUPPORT_CAP = 10_000_000
# below exp(-700) the point mass at zero underflows; start the walk at the mode
_LOG_TINY = -700.0
_REL_EPS = 1e-17


@njit(cache=True)
def poisson_quantile(u, lam):
    if lam <= 0.0:
        return 0
    if -lam > _LOG_TINY:
        p = math.exp(-lam)
        cdf = p
        k = 0
        while cdf < u:
            k += 1
            if k > SUPPORT_CAP:
                return -1
            p *= lam / k
            cdf += p
            if k > lam and p < cdf * _REL_EPS:
                break
        return k
    m = int(math.floor(lam))
    if m > SUPPORT_CAP:
        return -1
    pm = math.exp(m * math.log(lam) - lam - math.lgamma(m + 1.0))
    # mass at or below the mode, summed downward
    s = pm
    p = pm
    k = m
    while k > 0:
        p *= k / lam
        k -= 1
        s += p
        if p < s * _REL_EPS:
            break
    cdf = s
    k = m
    p = pm
    if u <= cdf:
        while k > 0 and cdf - p >= u:
            cdf -= p
            p *= k / lam
            k -= 1
        return k
    while cdf < u:
        k += 1
        if k > SUPPORT_CAP:
            return -1
        p *= lam / k
        cdf += p
        if p < cdf * _REL_EPS:
            break
    return k


@njit(cache=True)
def negbin_quantile(u, mu, r):
    """Quantile of NB with mean ``mu`` and size ``r = 1/alpha``."""
    if mu <= 0.0:
        return 0
    q = mu / (mu + r)
    logp0 = -r * math.log1p(mu / r)
    if logp0 > _LOG_TINY:
        p = math.exp(logp0)
        cdf = p
        k = 0
        while cdf < u:
            if k >= SUPPORT_CAP:
                return -1
            p *= (k + r) / (k + 1.0) * q
            k += 1
            cdf += p
            if k > mu and p < cdf * _REL_EPS:
                break
        return k
    m = 0
    if r > 1.0:
        m = int(math.floor((r - 1.0) * mu / r))
    if m > SUPPORT_CAP:
        return -1
    logpm = (
        math.lgamma(m + r)
        - math.lgamma(r)
        - math.lgamma(m + 1.0)
        + r * math.log(r / (r + mu))
        + m * math.log(q)
    )
    pm = math.exp(logpm)
    s = pm
    p = pm
    k = m
    while k > 0:
        p *= k / ((k - 1.0 + r) * q)
        k -= 1
        s += p
        if p < s * _REL_EPS:
            break
    cdf = s
    k = m
    p = pm
    if u <= cdf:
        while k > 0 and cdf - p >= u:
            cdf -= p
            p *= k / ((k - 1.0 + r) * q)
            k -= 1
        return k
    while cdf < u:
        if k >= SUPPORT_CAP:
            return -1
        p *= (k + r) / (k + 1.0) * q
        k += 1
        cdf += p
        if p < cdf * _REL_EPS:
            break
    return k


@njit(cache=True)
def poisson_quantile_matrix(u, lam, out):
    H, n = u.shape
    for i in range(n):
        li = lam[i]
        for h in range(H):
            k = poisson_quantile(u[h, i], li)
            if k < 0:
                return i
            out[h, i] = k
    return -1


@njit(cache=True)
def negbin_quantile_matrix(u, mu, r, out):
    H, n = u.shape
    for i in range(n):
        mi = mu[i]
        for h in range(H):
            k = negbin_quantile(u[h, i], mi, r)
            if k < 0:
                return i
            out[h, i] = k
    return -1


@njit(cache=True)
def lgamma_ratio_sums(y, r, a0, a1, a2):
    """For each entry: log Gamma(y+r)/Gamma(r) and its first two r-derivatives.

    Computed as finite sums over j < y of log(r+j), 1/(r+j), -1/(r+j)^2.
    """
    for t in range(y.size):
        yt = y.flat[t]
        rt = r.flat[t]
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for j in range(yt):
            v = rt + j
            s0 += math.log(v)
            iv = 1.0 / v
            s1 += iv
            s2 -= iv * iv
        a0.flat[t] = s0
        a1.flat[t] = s1
        a2.flat[t] = s2


@njit(cache=True)
def _nb_logpmf_parts(k, mu, r):
    """log pmf and its derivatives w.r.t. eta=log(mu) and r at count k."""
    a0 = 0.0
    a1 = 0.0
    for j in range(k):
        v = r + j
        a0 += math.log(v)
        a1 += 1.0 / v
    lp = a0 - math.lgamma(k + 1.0) + r * math.log(r / (r + mu)) + k * math.log(mu / (r + mu))
    d_eta = r * (k - mu) / (r + mu)
    d_r = a1 + math.log(r) + 1.0 - math.log(r + mu) - (r + k) / (r + mu)
    return lp, d_eta, d_r, a1


@njit(cache=True)
def negbin_log_survival(C, mu, r, tol):
    """log P(Y >= C) for NB(mu, r) with derivatives w.r.t. eta and r.

    Uses 1 - CDF(C-1) when the lower part holds less than half of the
    mass, otherwise sums the upper tail from C relative to pmf(C) until a
    geometric remainder bound drops below ``tol`` times the running sum.
    Returns (log_s, dlog_s/deta, dlog_s/dr, status) where status < 0
    signals that the tail could not be evaluated.
    """
    if C <= 0:
        return 0.0, 0.0, 0.0, 0
    q = mu / (mu + r)
    # lower part: F = sum_{k<C} pmf(k), with derivative sums
    F = 0.0
    dF_eta = 0.0
    dF_r = 0.0
    for k in range(C):
        lp, de, dr_, _ = _nb_logpmf_parts(k, mu, r)
        pk = math.exp(lp)
        F += pk
        dF_eta += pk * de
        dF_r += pk * dr_
    if F < 0.5:
        S = 1.0 - F
        return math.log1p(-F), -dF_eta / S, -dF_r / S, 0
    lpC, de, dr_, a1 = _nb_logpmf_parts(C, mu, r)
    if not np.isfinite(lpC):
        return -np.inf, 0.0, 0.0, -1
    t = 1.0
    s = 1.0
    s_eta = de
    s_r = dr_
    k = C
    base_r = math.log(r) + 1.0 - math.log(r + mu)
    while True:
        ratio = (k + r) / (k + 1.0) * q
        a1 += 1.0 / (r + k)
        t *= ratio
        k += 1
        s += t
        s_eta += t * r * (k - mu) / (r + mu)
        s_r += t * (a1 + base_r - (r + k) / (r + mu))
        nxt = (k + r) / (k + 1.0) * q
        bound = q if r < 1.0 else nxt
        if bound < 1.0 and t * bound / (1.0 - bound) < tol * s:
            break
        if k - C > SUPPORT_CAP:
            return -np.inf, 0.0, 0.0, -2
    return lpC + math.log(s), s_eta / s, s_r / s, 0


@njit(cache=True)
def negbin_log_survival_vec(C, mu, r, tol, out_ls, out_eta, out_r):
    for i in range(mu.size):
        ls, de, dr_, st = negbin_log_survival(C, mu[i], r, tol)
        if st < 0:
            return i
        out_ls[i] = ls
        out_eta[i] = de
        out_r[i] = dr_
    return -1
