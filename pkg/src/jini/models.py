"""Parametric models with simulators, design generators and the dataset format."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtri

from .crn import (
    CrnBank,
    RngStream,
    bernoulli_q_matrix,
    beta_sample,
    negbin_q_matrix,
    normal_sample,
    poisson_q_matrix,
)
from ._kernels import SUPPORT_CAP
from .errors import InvalidArgument, SimulationOverflow

BETA_BOUND = 50.0
ALPHA_BOUNDS = (1e-4, 1e2)
# a mean beyond the support cap cannot be inverted by a walk over the support
MEAN_CAP = float(SUPPORT_CAP)


class Family(str, enum.Enum):
    LOGISTIC = "logistic"
    LOGISTIC_MISCLASSIFIED = "logistic-misclassified"
    POISSON = "poisson"
    POISSON_CENSORED = "poisson-censored"
    NEGBIN = "negbin"
    NEGBIN_CENSORED = "negbin-censored"
    SYNTHETIC = "synthetic"

    @property
    def censored(self) -> bool:
        return self in (Family.POISSON_CENSORED, Family.NEGBIN_CENSORED)

    @property
    def has_alpha(self) -> bool:
        return self in (Family.NEGBIN, Family.NEGBIN_CENSORED)

    @property
    def kind(self) -> str:
        if self in (Family.LOGISTIC, Family.LOGISTIC_MISCLASSIFIED):
            return "binary"
        if self is Family.SYNTHETIC:
            return "continuous"
        return "count"


@dataclass(frozen=True)
class DesignMatrix:
    x: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64, copy=True)
        if x.ndim != 2:
            raise InvalidArgument(f"design must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidArgument("design has non-finite entries")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p_x(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class Dataset:
    design: DesignMatrix
    y: np.ndarray
    kind: str = "count"
    censor_at: int | None = None

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1 or y.shape[0] != self.design.n:
            raise InvalidArgument(f"y must have length {self.design.n}, got shape {y.shape}")
        if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
            raise InvalidArgument("responses must be integers")
        y = y.astype(np.int64)
        if self.kind == "binary" and not np.all((y == 0) | (y == 1)):
            raise InvalidArgument("binary responses must be 0/1")
        if self.kind == "count" and np.any(y < 0):
            raise InvalidArgument("count responses must be non-negative")
        if self.kind not in ("binary", "count"):
            raise InvalidArgument(f"unknown response kind {self.kind!r}")
        if self.censor_at is not None:
            if int(self.censor_at) < 1:
                raise InvalidArgument("censor_at must be a positive integer")
            if np.any(y > self.censor_at):
                raise InvalidArgument(f"responses exceed censoring threshold {self.censor_at}")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.design.n


@dataclass(frozen=True)
class MisclassLatents:
    """Per-observation false-positive and false-negative rates, fixed once drawn."""

    u_fp: np.ndarray
    u_fn: np.ndarray

    def __post_init__(self):
        fp = np.array(self.u_fp, dtype=np.float64)
        fn = np.array(self.u_fn, dtype=np.float64)
        if fp.shape != fn.shape or fp.ndim != 1:
            raise InvalidArgument("latent vectors must be 1-D with equal length")
        if np.any((fp < 0) | (fp > 1) | (fn < 0) | (fn > 1)):
            raise InvalidArgument("latent rates must lie in [0, 1]")
        fp.setflags(write=False)
        fn.setflags(write=False)
        object.__setattr__(self, "u_fp", fp)
        object.__setattr__(self, "u_fn", fn)

    @classmethod
    def draw(cls, stream: RngStream, n: int, fp_shape=(2.0, 50.0), fn_shape=(2.0, 10.0)):
        """Independent Beta draws for both rates (defaults: FP ~ 2%, FN ~ 10%)."""
        fp = beta_sample(stream.substream(0), *fp_shape, size=n)
        fn = beta_sample(stream.substream(1), *fn_shape, size=n)
        return cls(fp, fn)


@dataclass(frozen=True)
class SyntheticBiasSpec:
    """Initial estimator with exactly affine bias: theta + B theta + c + noise."""

    B: np.ndarray
    c: np.ndarray
    noise_sd: float = 0.0

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        c = np.atleast_1d(np.asarray(self.c, dtype=np.float64))
        if B.shape != (c.size, c.size):
            raise InvalidArgument(f"B must be {c.size}x{c.size}, got {B.shape}")
        if self.noise_sd < 0:
            raise InvalidArgument("noise_sd must be non-negative")
        B.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @property
    def p(self) -> int:
        return self.c.size


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=np.float64)
        hi = np.array(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise InvalidArgument("box requires lower < upper elementwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def project(self, theta):
        return np.clip(theta, self.lower, self.upper)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta)
        return bool(np.all((theta >= self.lower) & (theta <= self.upper)))


def default_box(family: Family, p: int) -> Box:
    """Default parameter box; ``p`` is the full parameter dimension."""
    lo = np.full(p, -BETA_BOUND)
    hi = np.full(p, BETA_BOUND)
    if family.has_alpha:
        lo[-1], hi[-1] = ALPHA_BOUNDS
    if family is Family.SYNTHETIC:
        lo[:] = -1e6
        hi[:] = 1e6
    return Box(lo, hi)


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    design: DesignMatrix | None
    censor_at: int | None = None
    misclass: MisclassLatents | None = None
    box: Box | None = None
    synth: SyntheticBiasSpec | None = None

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        if fam.censored != (self.censor_at is not None):
            raise InvalidArgument(f"censor_at is required iff the family is censored ({fam.value})")
        if (fam is Family.LOGISTIC_MISCLASSIFIED) != (self.misclass is not None):
            raise InvalidArgument("misclassification latents are required iff family is logistic-misclassified")
        if fam is Family.SYNTHETIC:
            if self.synth is None:
                raise InvalidArgument("synthetic model needs a SyntheticBiasSpec")
        elif self.design is None:
            raise InvalidArgument("design is required for data models")
        if self.misclass is not None and self.misclass.u_fp.size != self.design.n:
            raise InvalidArgument("latent vectors must match the number of observations")
        if self.box is None:
            object.__setattr__(self, "box", default_box(fam, self.dim))
        elif self.box.lower.size != self.dim:
            raise InvalidArgument(f"box dimension {self.box.lower.size} != parameter dimension {self.dim}")

    @property
    def dim(self) -> int:
        if self.family is Family.SYNTHETIC:
            return self.synth.p
        return self.design.p_x + (1 if self.family.has_alpha else 0)

    @property
    def n(self) -> int:
        if self.family is Family.SYNTHETIC:
            return self.synth.p
        return self.design.n

    def split(self, theta):
        """Return (beta, alpha) for data models; alpha is None without overdispersion."""
        theta = np.asarray(theta, dtype=np.float64)
        if self.family.has_alpha:
            return theta[..., :-1], theta[..., -1]
        return theta, None


# ---------------------------------------------------------------------------
# mean functions
# ---------------------------------------------------------------------------


def linear_predictor(design: DesignMatrix | np.ndarray, beta) -> np.ndarray:
    x = design.x if isinstance(design, DesignMatrix) else np.asarray(design)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-1] != x.shape[1]:
        raise InvalidArgument(f"beta has length {beta.shape[-1]}, design has {x.shape[1]} columns")
    return beta @ x.T if beta.ndim > 1 else x @ beta


def mean_logistic(eta) -> np.ndarray:
    return expit(np.asarray(eta, dtype=np.float64))


def mean_misclassified(mu, lat: MisclassLatents) -> np.ndarray:
    """Success probability of the observed label given per-observation error rates."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape[-1] != lat.u_fp.size:
        raise InvalidArgument(f"mu has length {mu.shape[-1]}, latents have {lat.u_fp.size}")
    return lat.u_fp * (1.0 - mu) + (1.0 - lat.u_fn) * mu


def _count_mean(model: ModelSpec, beta) -> np.ndarray:
    eta = linear_predictor(model.design, beta)
    with np.errstate(over="ignore"):
        mu = np.exp(eta)
    too_big = ~(mu <= MEAN_CAP)
    if np.any(too_big):
        idx = int(np.flatnonzero(too_big)[0])
        raise SimulationOverflow(f"simulated mean exp(eta)={mu[idx]:.3g} too large at index {idx}", index=idx)
    return mu


def synthetic_initial(spec: SyntheticBiasSpec, theta, u_rows) -> np.ndarray:
    """theta + B theta + c + noise_sd * Phi^{-1}(u[:p]), row-wise over ``u_rows``."""
    theta = np.asarray(theta, dtype=np.float64)
    u = np.asarray(u_rows, dtype=np.float64)
    if theta.shape[-1] != spec.p or u.shape[-1] < spec.p:
        raise InvalidArgument("dimension mismatch in synthetic estimator")
    base = theta + spec.B @ theta + spec.c
    if spec.noise_sd == 0:
        return np.broadcast_to(base, u.shape[:-1] + (spec.p,)).copy()
    return base + spec.noise_sd * ndtri(u[..., : spec.p])


def simulate_responses(model: ModelSpec, theta, u: np.ndarray) -> np.ndarray:
    """Responses for each row of the uniform block ``u`` (shape (H, n)).

    For the synthetic pseudo-model the rows are the initial estimates
    themselves (shape (H, p)).
    """
    fam = model.family
    u = np.atleast_2d(u)
    if fam is Family.SYNTHETIC:
        return synthetic_initial(model.synth, theta, u)
    if u.shape[1] != model.n:
        raise InvalidArgument(f"uniform rows have length {u.shape[1]}, model has n={model.n}")
    beta, alpha = model.split(theta)
    if fam in (Family.LOGISTIC, Family.LOGISTIC_MISCLASSIFIED):
        mu = mean_logistic(linear_predictor(model.design, beta))
        if fam is Family.LOGISTIC_MISCLASSIFIED:
            mu = mean_misclassified(mu, model.misclass)
        return bernoulli_q_matrix(u, mu)
    mu = _count_mean(model, beta)
    if fam in (Family.POISSON, Family.POISSON_CENSORED):
        y = poisson_q_matrix(u, mu)
    else:
        y = negbin_q_matrix(u, mu, float(alpha))
    if fam.censored:
        np.minimum(y, model.censor_at, out=y)
    return y


def simulate_bank(model: ModelSpec, theta, bank: CrnBank) -> np.ndarray:
    return simulate_responses(model, theta, bank.u)


def simulate(model: ModelSpec, theta, bank: CrnBank, h: int) -> Dataset:
    """Dataset generated at ``theta`` from row ``h`` of the bank only."""
    if model.family is Family.SYNTHETIC:
        raise InvalidArgument("the synthetic pseudo-model produces estimates, not datasets")
    y = simulate_responses(model, theta, bank.row(h)[None, :])[0]
    return Dataset(model.design, y, kind=model.family.kind, censor_at=model.censor_at)


# ---------------------------------------------------------------------------
# design recipes
# ---------------------------------------------------------------------------

DESIGN_RECIPES = ("nb-style", "logistic-I", "logistic-II", "intercept")


def gen_design(setting: str, n: int, p: int, stream: RngStream) -> DesignMatrix:
    """Covariates for the simulation studies.

    ``nb-style``: intercept, N(0, 1), a dummy whose first ceil(n/2) entries are
    zero, then N(0, 16/n) columns.  ``logistic-I`` / ``logistic-II``: every
    column N(0, 16/n) resp. N(0.6, 16/n), no intercept.  ``intercept``: a
    single column of ones (p must be 1).
    """
    n, p = int(n), int(p)
    if n < 1 or p < 1:
        raise InvalidArgument("n and p must be positive")
    sd = 4.0 / np.sqrt(n)
    if setting == "nb-style":
        if p < 3:
            raise InvalidArgument("nb-style design needs p >= 3")
        x = np.empty((n, p))
        x[:, 0] = 1.0
        x[:, 1] = normal_sample(stream.substream(1), 0.0, 1.0, size=n)
        x[:, 2] = 0.0
        x[(n + 1) // 2 :, 2] = 1.0
        if p > 3:
            x[:, 3:] = normal_sample(stream.substream(2), 0.0, sd, size=(n, p - 3))
    elif setting == "intercept":
        if p != 1:
            raise InvalidArgument("intercept design needs p == 1")
        x = np.ones((n, 1))
    elif setting == "logistic-I":
        x = normal_sample(stream.substream(1), 0.0, sd, size=(n, p))
    elif setting == "logistic-II":
        x = normal_sample(stream.substream(1), 0.6, sd, size=(n, p))
    else:
        raise InvalidArgument(f"unknown design recipe {setting!r}; expected one of {DESIGN_RECIPES}")
    return DesignMatrix(x)


# ---------------------------------------------------------------------------
# dataset CSV
# ---------------------------------------------------------------------------


class DatasetFormatError(InvalidArgument):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def read_dataset_csv(path, kind: str = "count", censor_at: int | None = None) -> Dataset:
    """Read ``y,x1..xp`` CSV with an optional ``#censor_at=C`` metadata line."""
    text = Path(path).read_text()
    return parse_dataset_csv(text, kind=kind, censor_at=censor_at)


def parse_dataset_csv(text: str, kind: str = "count", censor_at: int | None = None) -> Dataset:
    header = None
    rows: list[list[float]] = []
    meta_c = None
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            if key.strip() == "censor_at":
                try:
                    meta_c = int(val.strip())
                except ValueError:
                    raise DatasetFormatError(f"bad censor_at value {val.strip()!r}", lineno) from None
            continue
        fields = next(csv.reader([line]))
        if header is None:
            header = [f.strip() for f in fields]
            if not header or header[0] != "y":
                raise DatasetFormatError("first column must be 'y'", lineno)
            continue
        if len(fields) != len(header):
            raise DatasetFormatError(f"expected {len(header)} fields, got {len(fields)}", lineno)
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise DatasetFormatError("non-numeric field", lineno) from None
    if header is None or not rows:
        raise DatasetFormatError("no data rows")
    if len(header) < 2:
        raise DatasetFormatError("no covariate columns")
    arr = np.asarray(rows)
    c = censor_at if censor_at is not None else meta_c
    return Dataset(DesignMatrix(arr[:, 1:]), arr[:, 0], kind=kind, censor_at=c)


def write_dataset_csv(data: Dataset, path) -> None:
    p = data.design.p_x
    lines = []
    if data.censor_at is not None:
        lines.append(f"#censor_at={data.censor_at}")
    lines.append(",".join(["y"] + [f"x{j + 1}" for j in range(p)]))
    for yi, xi in zip(data.y, data.design.x):
        lines.append(",".join([str(int(yi))] + [repr(float(v)) for v in xi]))
    Path(path).write_text("\n".join(lines) + "\n")


def dataset_from_model(model: ModelSpec, y) -> Dataset:
    return Dataset(model.design, y, kind=model.family.kind, censor_at=model.censor_at)
