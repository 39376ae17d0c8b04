"""Deterministic random numbers: seeded streams, the CRN bank, quantile samplers.

Every simulated sample used by the iterative bootstrap is obtained by
inverting a model CDF at a fixed uniform, so the only thing that changes
between iterations is the parameter value.  The bank of uniforms is built
from a counter-based generator (Philox), which makes each draw addressable
by ``(seed, h, i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InvalidArgument, SimulationOverflow

_U53 = 2.0**-53


def _raw_to_open_unit(raw: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted by half a ulp: strictly inside (0, 1)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _U53


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


class RngStream:
    """A seeded, splittable stream of draws.

    Substreams are addressed by integer index paths, so ``stream.substream(3)``
    is the same generator no matter how many draws the parent has made.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = _check_seed(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    @property
    def counter(self) -> int:
        """Number of 4-word Philox blocks consumed so far."""
        ctr = self._gen.bit_generator.state["state"]["counter"]
        return int(sum(int(c) << (64 * j) for j, c in enumerate(ctr)))

    def substream(self, *index: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(index))

    def derive_seed(self) -> int:
        """A 64-bit seed for components (like a CRN bank) that take a bare integer."""
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def uniform(self, size) -> np.ndarray:
        return _raw_to_open_unit(self._gen.bit_generator.random_raw(size))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"


@dataclass(frozen=True)
class CrnBank:
    """H x n matrix of uniforms in (0, 1), fixed for a whole IB run."""

    H: int
    n: int
    seed: int
    u: np.ndarray = field(repr=False)

    def row(self, h: int) -> np.ndarray:
        if not 0 <= h < self.H:
            raise InvalidArgument(f"row index {h} outside [0, {self.H})")
        return self.u[h]


def _bank_bitgen(seed: int) -> np.random.Philox:
    return np.random.Philox(np.random.SeedSequence(seed))


def make_bank(seed: int, H: int, n: int) -> CrnBank:
    """Build the common-random-numbers bank for ``H`` samples of size ``n``."""
    seed = _check_seed(seed)
    H, n = int(H), int(n)
    if H < 1 or n < 1:
        raise InvalidArgument(f"bank dimensions must be positive, got H={H}, n={n}")
    raw = _bank_bitgen(seed).random_raw(H * n)
    u = _raw_to_open_unit(raw).reshape(H, n)
    u.setflags(write=False)
    return CrnBank(H=H, n=n, seed=seed, u=u)


def uniform_at(seed: int, h: int, i: int, n: int) -> float:
    """Entry ``(h, i)`` of ``make_bank(seed, H, n)`` without generating the rows before it."""
    j = int(h) * int(n) + int(i)
    bg = _bank_bitgen(_check_seed(seed))
    # Philox emits four 64-bit words per counter step
    block, offset = divmod(j, 4)
    if block:
        bg.advance(block)
    raw = bg.random_raw(offset + 1)
    return float(_raw_to_open_unit(raw[-1:])[0])


# ---------------------------------------------------------------------------
# quantile functions
# ---------------------------------------------------------------------------


def _check_u(u: float) -> None:
    if not 0.0 < u < 1.0:
        raise InvalidArgument(f"u must lie in (0, 1), got {u}")


def bernoulli_q(u: float, mu: float) -> int:
    """1 if ``u < mu`` else 0."""
    _check_u(u)
    if not 0.0 <= mu <= 1.0:
        raise InvalidArgument(f"mu must lie in [0, 1], got {mu}")
    return int(u < mu)


def poisson_q(u: float, lam: float) -> int:
    _check_u(u)
    if not math.isfinite(lam) or lam < 0:
        raise InvalidArgument(f"lambda must be finite and non-negative, got {lam}")
    k = _kernels.poisson_quantile(float(u), float(lam))
    if k < 0:
        raise SimulationOverflow(f"Poisson quantile exceeds support cap at lambda={lam}")
    return int(k)


def negbin_q(u: float, mu: float, alpha: float) -> int:
    """Quantile of the NB distribution with mean ``mu`` and variance ``mu + alpha mu^2``."""
    _check_u(u)
    if not (math.isfinite(mu) and math.isfinite(alpha)) or mu < 0 or alpha <= 0:
        raise InvalidArgument(f"invalid NB parameters mu={mu}, alpha={alpha}")
    k = _kernels.negbin_quantile(float(u), float(mu), 1.0 / float(alpha))
    if k < 0:
        raise SimulationOverflow(f"NB quantile exceeds support cap at mu={mu}, alpha={alpha}")
    return int(k)


def bernoulli_q_matrix(u: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return (u < mu).astype(np.int64)


def poisson_q_matrix(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Apply ``poisson_q`` to an (H, n) block of uniforms with per-column means."""
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        bad = int(np.flatnonzero(~np.isfinite(lam) | (lam < 0))[0])
        raise SimulationOverflow(f"invalid Poisson mean at index {bad}", index=bad)
    out = np.empty(u.shape, dtype=np.int64)
    bad = _kernels.poisson_quantile_matrix(np.ascontiguousarray(u), lam, out)
    if bad >= 0:
        raise SimulationOverflow(f"Poisson quantile exceeds support cap at index {bad}", index=int(bad))
    return out


def negbin_q_matrix(u: np.ndarray, mu: np.ndarray, alpha: float) -> np.ndarray:
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    if not np.all(np.isfinite(mu)) or np.any(mu < 0):
        bad = int(np.flatnonzero(~np.isfinite(mu) | (mu < 0))[0])
        raise SimulationOverflow(f"invalid NB mean at index {bad}", index=bad)
    if not (alpha > 0 and math.isfinite(alpha)):
        raise InvalidArgument(f"alpha must be positive and finite, got {alpha}")
    out = np.empty(u.shape, dtype=np.int64)
    bad = _kernels.negbin_quantile_matrix(np.ascontiguousarray(u), mu, 1.0 / alpha, out)
    if bad >= 0:
        raise SimulationOverflow(f"NB quantile exceeds support cap at index {bad}", index=int(bad))
    return out


# ---------------------------------------------------------------------------
# continuous draws from a stream
# ---------------------------------------------------------------------------


def beta_sample(stream: RngStream, a: float, b: float, size=None):
    if not (a > 0 and b > 0):
        raise InvalidArgument(f"beta shapes must be positive, got a={a}, b={b}")
    return stream.generator.beta(a, b, size=size)


def normal_sample(stream: RngStream, mean: float, sd: float, size=None):
    if not sd >= 0:
        raise InvalidArgument(f"sd must be non-negative, got {sd}")
    if sd == 0:
        return mean if size is None else np.full(size, float(mean))
    return stream.generator.normal(mean, sd, size=size)
