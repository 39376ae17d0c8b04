"""Command-line entry point: ``jini {fit,experiment,bias-probe,trace}``.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
Outputs are written to a temporary file and renamed into place, so a
failed command leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from .bias_correct import IbConfig, bbc, ib_solve, initial_estimate
from .crn import make_bank
from .errors import InvalidArgument, JiniError
from .estimators import FitConfig, benchmark_fit, initial_fitter
from .harness import (
    PRESETS,
    ExperimentConfig,
    atomic_write_text,
    bias_probe,
    build_model,
    preset,
    results_csv,
    run_experiment,
    summary_dict,
)
from .models import Family, MisclassLatents, ModelSpec, read_dataset_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
DATA_MODELS = [f.value for f in Family if f is not Family.SYNTHETIC]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_name(exc: BaseException) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "-", type(exc).__name__).lower()


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        atomic_write_text(out, text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# fit / trace
# ---------------------------------------------------------------------------


def _read_latents(path) -> MisclassLatents:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or [h.strip() for h in lines[0].split(",")] != ["u_fp", "u_fn"]:
        raise InvalidArgument(f"{path}: latents file needs the header 'u_fp,u_fn'")
    rows = []
    for k, ln in enumerate(lines[1:], start=2):
        try:
            rows.append([float(v) for v in ln.split(",")])
        except ValueError:
            raise InvalidArgument(f"{path}: line {k}: non-numeric field") from None
        if len(rows[-1]) != 2:
            raise InvalidArgument(f"{path}: line {k}: expected 2 fields")
    arr = np.asarray(rows)
    return MisclassLatents(arr[:, 0], arr[:, 1])


def _load_fit_inputs(args):
    fam = Family(args.model)
    data = read_dataset_csv(args.data, kind=fam.kind, censor_at=args.censor_at)
    if fam.censored and data.censor_at is None:
        raise InvalidArgument(f"model {fam.value} needs a censoring threshold (--censor-at or #censor_at=C)")
    lat = None
    if fam is Family.LOGISTIC_MISCLASSIFIED:
        if not args.latents:
            raise InvalidArgument("--latents is required for logistic-misclassified")
        lat = _read_latents(args.latents)
    model = ModelSpec(fam, data.design, censor_at=data.censor_at if fam.censored else None, misclass=lat)
    return data, model


def _ib_config(args) -> IbConfig:
    return IbConfig(H=args.H, tol=args.tol, max_iter=args.max_iter, seed=args.seed,
                    failure_policy=args.failure_policy)


def _trace_summary(trace) -> dict:
    return dict(
        iterations=trace.iterations,
        converged=trace.converged,
        step_norms=trace.step_norms,
        residuals=trace.pi_star_residuals,
        final_residual=trace.pi_star_residuals[-1] if trace.pi_star_residuals else None,
        fit_failures=trace.fit_failures,
    )


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    data, model = _load_fit_inputs(args)
    fitter = initial_fitter(model.family)
    cfg = _ib_config(args)
    out = dict(method=args.method, model=model.family.value)
    if args.method == "mle":
        res = fitter.fit(model, data.y)
        out.update(estimate=res.params.tolist(), converged=res.converged, iterations=res.iterations,
                   loglik=res.loglik, grad_norm=res.grad_norm, note=res.note)
    elif args.method == "benchmark":
        res = benchmark_fit(model, data.y, FitConfig())
        out.update(estimate=res.params.tolist(), converged=res.converged, iterations=res.iterations,
                   loglik=res.loglik, grad_norm=res.grad_norm, note=res.note)
    else:
        pi_hat = initial_estimate(data, model, fitter)
        bank = make_bank(cfg.seed, cfg.H, model.n)
        if args.method == "bbc":
            res = bbc(pi_hat, model, bank, fitter, cfg.failure_policy)
            out.update(estimate=res.estimate.tolist(), pi_hat=pi_hat.tolist(), box_active=res.box_active)
        else:
            res = ib_solve(pi_hat, model, bank, fitter, cfg)
            out.update(estimate=res.estimate.tolist(), pi_hat=pi_hat.tolist(), box_active=res.box_active,
                       trace=_trace_summary(res.trace))
        out.update(H=cfg.H, seed=cfg.seed, tol=cfg.tol, max_iter=cfg.max_iter)
    out["timing_seconds"] = time.perf_counter() - t0
    _emit(_dumps(out), args.out)
    return EXIT_OK


def cmd_trace(args) -> int:
    data, model = _load_fit_inputs(args)
    fitter = initial_fitter(model.family)
    cfg = _ib_config(args)
    pi_hat = initial_estimate(data, model, fitter)
    res = ib_solve(pi_hat, model, make_bank(cfg.seed, cfg.H, model.n), fitter, cfg)
    tr = res.trace
    dim = model.dim
    lines = ["k,step_norm,residual," + ",".join(f"theta_{j + 1}" for j in range(dim))]
    for k, theta in enumerate(tr.iterates):
        step = repr(tr.step_norms[k - 1]) if k > 0 else ""
        lines.append(f"{k},{step},{tr.pi_star_residuals[k]!r}," + ",".join(repr(float(v)) for v in theta))
    _emit("\n".join(lines) + "\n", args.out)
    state = "converged" if tr.converged else "not converged"
    print(f"{state} after {tr.iterations} iterations; final residual {tr.pi_star_residuals[-1]:.3g}",
          file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment / bias-probe
# ---------------------------------------------------------------------------


def _workers(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("JINI_WORKERS")
    if env:
        try:
            w = int(env)
        except ValueError:
            raise InvalidArgument(f"JINI_WORKERS must be an integer, got {env!r}") from None
        if w < 1:
            raise InvalidArgument("JINI_WORKERS must be >= 1")
        return w
    return 1


def _experiment_config(args) -> ExperimentConfig:
    fields = {}
    if args.config:
        try:
            fields = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidArgument(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(fields, dict):
            raise InvalidArgument("config file must hold a JSON object")
        known = set(ExperimentConfig.__dataclass_fields__)
        unknown = sorted(set(fields) - known)
        if unknown:
            raise InvalidArgument(f"unknown config keys: {', '.join(unknown)}")
    setting = args.setting or fields.pop("setting", None)
    if setting is None:
        raise UsageError("--setting or --config is required")
    fields.pop("setting", None)
    flags = dict(reps=args.reps, H=args.H, master_seed=args.seed, n=args.n, p=args.p,
                 censor_at=args.censor_at, noise_sd=args.noise_sd, bias_slope=args.bias_slope,
                 bias_offset=args.bias_offset, tol=args.tol, max_iter=args.max_iter,
                 failure_policy=args.failure_policy,
                 methods=tuple(args.methods.split(",")) if args.methods else None)
    fields.update({k: v for k, v in flags.items() if v is not None})
    for key in ("theta0", "methods", "latent_fp", "latent_fn"):
        if key in fields and isinstance(fields[key], list):
            fields[key] = tuple(fields[key])
    fields["workers"] = _workers(args.workers)
    return preset(setting, paper_scale=args.paper_scale, **fields)


def cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    result = run_experiment(cfg)
    csv_text = results_csv(result)
    json_text = _dumps(summary_dict(result))
    out = args.out or f"{cfg.setting}.csv"
    summary = args.summary or str(Path(out).with_suffix(".json"))
    atomic_write_text(out, csv_text)
    atomic_write_text(summary, json_text)
    print(f"{cfg.setting}: {result.reps_ok.size}/{cfg.reps} replications in {result.wall_time:.1f}s "
          f"-> {out}, {summary}", file=sys.stderr)
    return EXIT_OK


def _parse_grid(spec: str) -> np.ndarray:
    parts = spec.split(":")
    if len(parts) != 3:
        raise UsageError(f"grid must be lo:hi:steps, got {spec!r}")
    try:
        lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise UsageError(f"grid must be lo:hi:steps, got {spec!r}") from None
    if steps < 1 or (steps > 1 and not hi > lo):
        raise UsageError("grid needs steps >= 1 and hi > lo when steps > 1")
    return np.array([lo]) if steps == 1 else np.linspace(lo, hi, steps)


def cmd_bias_probe(args) -> int:
    overrides = dict(n=args.n, p=args.p, censor_at=args.censor_at, noise_sd=args.noise_sd,
                     bias_slope=args.bias_slope, bias_offset=args.bias_offset, master_seed=args.seed)
    cfg = preset(args.setting, **overrides)
    model = build_model(cfg)
    grid = _parse_grid(args.grid)
    if not 0 <= args.coord < model.dim:
        raise UsageError(f"--coord must lie in [0, {model.dim})")
    if np.any(grid < model.box.lower[args.coord]) or np.any(grid > model.box.upper[args.coord]):
        raise UsageError("grid leaves the parameter box")
    res = bias_probe(model, initial_fitter(model.family), np.asarray(cfg.theta0), args.coord, grid,
                     H=args.H, seed=args.seed if args.seed is not None else 0)
    lines = ["theta_i," + ",".join(f"d_star_{j + 1}" for j in range(model.dim))]
    for g, row in zip(res.grid, res.d_star):
        lines.append(repr(float(g)) + "," + ",".join(repr(float(v)) for v in row))
    out = args.out or f"{cfg.setting}-probe.csv"
    side = dict(setting=cfg.setting, coord=res.coord, H=res.H, half_width=res.half_width,
                theta0=list(cfg.theta0), grid=res.grid.tolist())
    atomic_write_text(out, "\n".join(lines) + "\n")
    atomic_write_text(str(Path(out).with_suffix(".json")), _dumps(side))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jini", description="Simulation-based bias correction (BBC / iterative bootstrap).")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def ib_flags(p, default_H=200):
        p.add_argument("--H", type=_pos_int, default=default_H, help="simulated samples per evaluation")
        p.add_argument("--seed", type=_nonneg_int, default=0)
        p.add_argument("--tol", type=float, default=1e-4)
        p.add_argument("--max-iter", dest="max_iter", type=_nonneg_int, default=100)
        p.add_argument("--failure-policy", dest="failure_policy", choices=["abort", "skip-and-average"],
                       default="abort")

    def data_flags(p):
        p.add_argument("--model", required=True, choices=DATA_MODELS)
        p.add_argument("--data", required=True, help="CSV with columns y,x1..xp")
        p.add_argument("--censor-at", dest="censor_at", type=_pos_int)
        p.add_argument("--latents", help="CSV with columns u_fp,u_fn (misclassified logistic)")
        p.add_argument("--out", help="output path (default: stdout)")

    p_fit = sub.add_parser("fit", help="estimate parameters of one dataset")
    data_flags(p_fit)
    p_fit.add_argument("--method", choices=["mle", "benchmark", "bbc", "jini"], default="jini")
    ib_flags(p_fit)

    p_tr = sub.add_parser("trace", help="iterate to the fixed point and dump the trace as CSV")
    data_flags(p_tr)
    ib_flags(p_tr)

    def setting_flags(p):
        p.add_argument("--n", type=_pos_int)
        p.add_argument("--p", type=_pos_int)
        p.add_argument("--censor-at", dest="censor_at", type=_pos_int)
        p.add_argument("--noise-sd", dest="noise_sd", type=float)
        p.add_argument("--bias-slope", dest="bias_slope", type=float)
        p.add_argument("--bias-offset", dest="bias_offset", type=float)

    p_ex = sub.add_parser("experiment", help="run a Monte Carlo study")
    p_ex.add_argument("--setting", help=f"preset: {', '.join(PRESETS)}")
    p_ex.add_argument("--config", help="JSON file with experiment fields")
    p_ex.add_argument("--reps", type=_pos_int)
    p_ex.add_argument("--H", type=_pos_int)
    p_ex.add_argument("--seed", type=_nonneg_int)
    p_ex.add_argument("--workers", type=_pos_int)
    p_ex.add_argument("--methods", help="comma-separated subset of MLE,naive-MLE,benchmark-MLE,BBC,JINI")
    p_ex.add_argument("--tol", type=float)
    p_ex.add_argument("--max-iter", dest="max_iter", type=_nonneg_int)
    p_ex.add_argument("--failure-policy", dest="failure_policy", choices=["abort", "skip-and-average"])
    p_ex.add_argument("--paper-scale", dest="paper_scale", action="store_true",
                      help="reps=1000, H=200 instead of the desk-scale 200/100")
    p_ex.add_argument("--out", help="CSV path (default: <setting>.csv)")
    p_ex.add_argument("--summary", help="JSON path (default: CSV path with .json)")
    setting_flags(p_ex)

    p_bp = sub.add_parser("bias-probe", help="estimated bias along one coordinate")
    p_bp.add_argument("--setting", required=True, help=f"preset: {', '.join(PRESETS)}")
    p_bp.add_argument("--coord", type=int, required=True, help="0-based parameter index")
    p_bp.add_argument("--grid", required=True, help="lo:hi:steps")
    p_bp.add_argument("--H", type=_pos_int, help="default 10000, or 1000 for large binary designs")
    p_bp.add_argument("--seed", type=_nonneg_int)
    p_bp.add_argument("--out", help="CSV path; the JSON sidecar takes the same stem")
    setting_flags(p_bp)
    return parser


COMMANDS = {"fit": cmd_fit, "trace": cmd_trace, "experiment": cmd_experiment, "bias-probe": cmd_bias_probe}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        if args.command == "experiment" and args.setting and args.setting not in PRESETS:
            raise UsageError(f"unknown setting {args.setting!r}; presets: {', '.join(PRESETS)}")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidArgument as exc:
        print(f"error: {_error_name(exc)}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except JiniError as exc:
        print(f"error: {_error_name(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
