"""Monte Carlo experiments: bias and RMSE of MLE, BBC and JINI over replications.

Seeding layout for one experiment with master seed ``s``::

    (s, 0)        design matrix, drawn once
    (s, 1)        misclassification latents, drawn once
    (s, 2, r)     observed data of replication r
    (s, 3, r)     CRN bank of replication r (shared by BBC and JINI)

Every replication is a pure function of the config and its index, so the
output does not depend on the number of workers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .bias_correct import IbConfig, bbc, ib_solve, pi_star
from .crn import RngStream, make_bank
from .errors import InvalidArgument, JiniError
from .estimators import benchmark_fit, initial_fitter
from .models import (
    Family,
    MisclassLatents,
    ModelSpec,
    SyntheticBiasSpec,
    gen_design,
    simulate_responses,
)

METHODS = ("MLE", "naive-MLE", "benchmark-MLE", "BBC", "JINI")

_NB_HEAD = (1.5, 2.5, -2.5)
_LOGIT_HEAD = (5.0, 5.0, -7.0, -7.0)

# desk-scale defaults; --paper-scale restores reps=1000, H=200
PRESETS: dict[str, dict] = {
    "negbin-t2": dict(
        family="negbin", design="nb-style", n=100, p=20, beta_head=_NB_HEAD, alpha=0.6,
        methods=("MLE", "BBC", "JINI"),
    ),
    "negbin-censored-t3": dict(
        family="negbin-censored", design="nb-style", n=100, p=20, beta_head=_NB_HEAD, alpha=0.6,
        censor_at=30, methods=("naive-MLE", "benchmark-MLE", "JINI"),
    ),
    "logistic-misclass-t4-I": dict(
        family="logistic-misclassified", design="logistic-I", n=2000, p=200, beta_head=_LOGIT_HEAD,
        methods=("naive-MLE", "JINI"),
    ),
    "logistic-misclass-t4-II": dict(
        family="logistic-misclassified", design="logistic-II", n=3000, p=200, beta_head=_LOGIT_HEAD,
        methods=("naive-MLE", "JINI"),
    ),
    "logistic-t6-I": dict(
        family="logistic", design="logistic-I", n=2000, p=200, beta_head=_LOGIT_HEAD,
        methods=("MLE", "BBC", "JINI"),
    ),
    "logistic-t6-II": dict(
        family="logistic", design="logistic-II", n=3000, p=200, beta_head=_LOGIT_HEAD,
        methods=("MLE", "BBC", "JINI"),
    ),
    "censored-poisson-t8": dict(
        family="poisson-censored", design="nb-style", n=200, p=50, beta_head=(0.5, 0.8, -0.4),
        censor_at=5, methods=("naive-MLE", "benchmark-MLE", "JINI"),
    ),
    "poisson-intercept": dict(
        family="poisson", design="intercept", n=50, p=1, beta_head=(float(np.log(2.0)),),
        H=10, reps=2000, methods=("MLE", "JINI"),
    ),
    "synthetic": dict(
        family="synthetic", design=None, n=5, p=5, beta_head=(1.0, -0.5, 0.25, 2.0, 0.0),
        methods=("MLE", "BBC", "JINI"),
    ),
}

DESK_SCALE = dict(reps=200, H=100)
PAPER_SCALE = dict(reps=1000, H=200)


@dataclass(frozen=True)
class ExperimentConfig:
    setting: str
    family: str
    n: int
    p: int
    theta0: tuple
    design: str | None = None
    H: int = 100
    reps: int = 200
    master_seed: int = 1
    methods: tuple = ("MLE", "BBC", "JINI")
    workers: int = 1
    censor_at: int | None = None
    latent_fp: tuple = (2.0, 50.0)
    latent_fn: tuple = (2.0, 10.0)
    bias_slope: float = 0.5
    bias_offset: float = 0.1
    noise_sd: float = 0.0
    tol: float = 1e-4
    max_iter: int = 100
    failure_policy: str = "abort"

    def __post_init__(self):
        object.__setattr__(self, "theta0", tuple(float(v) for v in self.theta0))
        object.__setattr__(self, "methods", tuple(self.methods))
        fam = Family(self.family)
        dim = self.p + (1 if fam.has_alpha else 0)
        if len(self.theta0) != dim:
            raise InvalidArgument(f"theta0 has length {len(self.theta0)}, expected {dim}")
        if self.reps < 1 or self.H < 1 or self.workers < 1:
            raise InvalidArgument("reps, H and workers must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise InvalidArgument(f"unknown methods {bad}; choose from {METHODS}")
        if "benchmark-MLE" in self.methods and fam is Family.LOGISTIC_MISCLASSIFIED:
            raise InvalidArgument("no benchmark estimator exists for misclassified logistic regression")
        if fam.censored != (self.censor_at is not None):
            raise InvalidArgument("censor_at is required exactly for censored families")
        if fam is Family.SYNTHETIC and self.n != self.p:
            raise InvalidArgument("the synthetic setting needs n == p")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        """Digest of the config fields that determine the estimates."""
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def preset(setting: str, paper_scale: bool = False, **overrides) -> ExperimentConfig:
    """Build the config of a named study; any field may be overridden.

    Overriding ``p`` rebuilds ``theta0`` from the preset's leading
    coefficients padded with zeros (plus alpha for NB models).
    """
    if setting not in PRESETS:
        raise InvalidArgument(f"unknown setting {setting!r}; presets: {', '.join(PRESETS)}")
    base = dict(PRESETS[setting])
    head = base.pop("beta_head")
    alpha = base.pop("alpha", None)
    scale = PAPER_SCALE if paper_scale else DESK_SCALE
    cfg = dict(scale, **base)
    cfg["setting"] = setting
    overrides = {k: v for k, v in overrides.items() if v is not None}
    cfg.update(overrides)
    if "theta0" not in overrides:
        beta = np.zeros(cfg["p"])
        k = min(len(head), cfg["p"])
        beta[:k] = head[:k]
        cfg["theta0"] = tuple(beta) + ((alpha,) if alpha is not None else ())
    if setting == "synthetic" and "n" not in overrides:
        cfg["n"] = cfg["p"]
    return ExperimentConfig(**cfg)


# ---------------------------------------------------------------------------
# building the model of an experiment
# ---------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig) -> ModelSpec:
    fam = Family(cfg.family)
    root = RngStream(cfg.master_seed)
    if fam is Family.SYNTHETIC:
        spec = SyntheticBiasSpec(cfg.bias_slope * np.eye(cfg.p), np.full(cfg.p, cfg.bias_offset), cfg.noise_sd)
        return ModelSpec(fam, None, synth=spec)
    design = gen_design(cfg.design, cfg.n, cfg.p, root.substream(0))
    lat = None
    if fam is Family.LOGISTIC_MISCLASSIFIED:
        lat = MisclassLatents.draw(root.substream(1), cfg.n, cfg.latent_fp, cfg.latent_fn)
    return ModelSpec(fam, design, censor_at=cfg.censor_at, misclass=lat)


def _observed(cfg: ExperimentConfig, model: ModelSpec, rep: int) -> np.ndarray:
    seed = RngStream(cfg.master_seed, (2, rep)).derive_seed()
    u = make_bank(seed, 1, model.n).u
    return simulate_responses(model, np.asarray(cfg.theta0), u)[0]


def _bank_seed(cfg: ExperimentConfig, rep: int) -> int:
    return RngStream(cfg.master_seed, (3, rep)).derive_seed()


@dataclass
class RepOutcome:
    rep: int
    estimates: dict = field(default_factory=dict)
    error: str | None = None
    failed_method: str | None = None
    jini_iterations: int | None = None
    jini_converged: bool | None = None
    events: int | None = None


def run_replication(cfg: ExperimentConfig, model: ModelSpec, rep: int) -> RepOutcome:
    """All requested estimators on the data of one replication."""
    out = RepOutcome(rep)
    fitter = initial_fitter(model.family)
    with threadpool_limits(1):
        try:
            method = "data"
            y = _observed(cfg, model, rep)
            if model.family.kind == "binary":
                out.events = int(min(y.sum(), y.size - y.sum()))
            method = "MLE"
            fit = fitter.fit(model, y)
            if not fit.converged:
                raise JiniError(f"initial estimator did not converge: {fit.note or 'max_iter reached'}")
            pi_hat = fit.params
            bank = None
            ib = IbConfig(H=cfg.H, tol=cfg.tol, max_iter=cfg.max_iter, seed=_bank_seed(cfg, rep),
                          failure_policy=cfg.failure_policy)
            for method in cfg.methods:
                if method in ("MLE", "naive-MLE"):
                    out.estimates[method] = pi_hat
                    continue
                if method == "benchmark-MLE":
                    out.estimates[method] = benchmark_fit(model, y).params
                    continue
                if bank is None:
                    bank = make_bank(ib.seed, ib.H, model.n)
                if method == "BBC":
                    out.estimates[method] = bbc(pi_hat, model, bank, fitter, ib.failure_policy).estimate
                else:
                    res = ib_solve(pi_hat, model, bank, fitter, ib)
                    out.estimates[method] = res.estimate
                    out.jini_iterations = res.trace.iterations
                    out.jini_converged = res.trace.converged
        except JiniError as exc:
            out.error = f"{type(exc).__name__}: {exc}"
            out.failed_method = method
            out.estimates = {}
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    theta0: np.ndarray
    estimates: dict
    reps_ok: np.ndarray
    bias: dict
    rmse: dict
    failures: dict
    wall_time: float
    iteration_hist: dict
    jini_converged: int
    errors: list
    mean_events: float | None = None

    @property
    def methods(self) -> tuple:
        return tuple(self.estimates)


def aggregate(cfg: ExperimentConfig, outcomes: list, wall_time: float = 0.0) -> ExperimentResult:
    theta0 = np.asarray(cfg.theta0)
    ok = [o for o in outcomes if o.error is None]
    if not ok:
        raise JiniError(f"all {len(outcomes)} replications failed; first error: {outcomes[0].error}")
    estimates = {m: np.array([o.estimates[m] for o in ok]) for m in cfg.methods}
    bias = {m: e.mean(axis=0) - theta0 for m, e in estimates.items()}
    rmse = {m: np.sqrt(np.mean((e - theta0) ** 2, axis=0)) for m, e in estimates.items()}
    failures = Counter(o.failed_method for o in outcomes if o.error is not None)
    hist = Counter(o.jini_iterations for o in ok if o.jini_iterations is not None)
    events = [o.events for o in ok if o.events is not None]
    return ExperimentResult(
        config=cfg,
        theta0=theta0,
        estimates=estimates,
        reps_ok=np.array([o.rep for o in ok]),
        bias=bias,
        rmse=rmse,
        failures=dict(sorted(failures.items())),
        wall_time=wall_time,
        iteration_hist=dict(sorted(hist.items())),
        jini_converged=sum(bool(o.jini_converged) for o in ok),
        errors=[(o.rep, o.error) for o in outcomes if o.error is not None],
        mean_events=float(np.mean(events)) if events else None,
    )


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """Run every replication and aggregate bias and RMSE over the successful ones."""
    workers = cfg.workers if workers is None else int(workers)
    t0 = time.perf_counter()
    model = build_model(cfg)
    if workers <= 1:
        outcomes = [run_replication(cfg, model, r) for r in range(cfg.reps)]
    else:
        outcomes = Parallel(n_jobs=workers)(delayed(run_replication)(cfg, model, r) for r in range(cfg.reps))
    outcomes.sort(key=lambda o: o.rep)
    return aggregate(cfg, outcomes, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def parameter_groups(theta0, has_alpha: bool) -> list[tuple[str, list[int]]]:
    """Nonzero coefficients individually, the trailing zero block pooled, alpha last."""
    theta0 = np.asarray(theta0)
    p = theta0.size - (1 if has_alpha else 0)
    beta = theta0[:p]
    nz = np.flatnonzero(beta != 0)
    last = int(nz[-1]) + 1 if nz.size else 0
    groups = [(f"beta_{j + 1}", [j]) for j in range(last)]
    if last < p:
        label = f"beta_{last + 1}" if last + 1 == p else f"beta_{last + 1}:{p}"
        groups.append((label, list(range(last, p))))
    if has_alpha:
        groups.append(("alpha", [p]))
    return groups


def summarize(result: ExperimentResult) -> list[dict]:
    """One row per (method, parameter group) with mean |bias| and mean RMSE."""
    fam = Family(result.config.family)
    groups = parameter_groups(result.theta0, fam.has_alpha)
    rows = []
    for m in result.methods:
        for label, idx in groups:
            rows.append(dict(
                method=m,
                group=label,
                abs_bias=float(np.mean(np.abs(result.bias[m][idx]))),
                rmse=float(np.mean(result.rmse[m][idx])),
            ))
    return rows


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the target directory and rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def results_csv(result: ExperimentResult) -> str:
    lines = ["rep,method,param_index,estimate"]
    for m in result.methods:
        est = result.estimates[m]
        for k, rep in enumerate(result.reps_ok):
            for j, v in enumerate(est[k]):
                lines.append(f"{rep},{m},{j},{float(v)!r}")
    return "\n".join(lines) + "\n"


def summary_dict(result: ExperimentResult) -> dict:
    cfg = result.config
    return dict(
        setting=cfg.setting,
        config=cfg.to_dict(),
        config_hash=cfg.content_hash(),
        theta0=list(result.theta0),
        reps_ok=int(result.reps_ok.size),
        failures=result.failures,
        errors=[dict(rep=int(r), error=e) for r, e in result.errors],
        bias={m: v.tolist() for m, v in result.bias.items()},
        rmse={m: v.tolist() for m, v in result.rmse.items()},
        groups=summarize(result),
        jini_iterations={str(k): v for k, v in result.iteration_hist.items()},
        jini_converged=result.jini_converged,
        mean_events_per_variable=(result.mean_events / cfg.p if result.mean_events is not None else None),
        wall_time=result.wall_time,
    )


def write_results(result: ExperimentResult, csv_path, json_path=None) -> None:
    atomic_write_text(csv_path, results_csv(result))
    if json_path is not None:
        atomic_write_text(json_path, json.dumps(summary_dict(result), indent=2) + "\n")


# ---------------------------------------------------------------------------
# bias-function probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BiasProbeResult:
    coord: int
    grid: np.ndarray
    d_star: np.ndarray
    H: int
    half_width: float


def default_probe_H(model: ModelSpec) -> int:
    """10^3 for large binary-response designs, 10^4 otherwise."""
    if model.family.kind == "binary" and model.n >= 1000:
        return 1_000
    return 10_000


def bias_probe(model: ModelSpec, fitter, theta0, coord: int, grid, H: int | None = None, seed: int = 0) -> BiasProbeResult:
    """Estimated bias d*(theta) = pi_star(theta) - theta along one coordinate.

    All grid points share one bank.  ``half_width`` is the absolute
    estimated bias of coordinate ``coord`` at ``theta0``, the size of the
    neighborhood where the true value plausibly lies.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if not 0 <= coord < model.dim:
        raise InvalidArgument(f"coordinate {coord} outside [0, {model.dim})")
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise InvalidArgument("grid must be non-empty and strictly increasing")
    if np.any(grid < model.box.lower[coord]) or np.any(grid > model.box.upper[coord]):
        raise InvalidArgument("grid leaves the parameter box")
    H = default_probe_H(model) if H is None else int(H)
    bank = make_bank(seed, H, model.n)
    rows = []
    for g in grid:
        th = theta0.copy()
        th[coord] = g
        rows.append(pi_star(model, th, bank, fitter) - th)
    d0 = pi_star(model, theta0, bank, fitter) - theta0
    return BiasProbeResult(coord, grid, np.array(rows), H, float(abs(d0[coord])))
