"""Command line interface.

Subcommands:
  run           execute a named Monte Carlo experiment, writing CSV + manifest
  fit           fit estimators to a CSV of (x, y, X, Y) observations
  calibrate     print sample-variance calibration factors d(theta)
  matern-table  tabulate the Matern correlation function

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O or
input-format error.  Options for ``run`` may come from a flat key=value
config file; command line flags override config values.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .covariance import MaternSpec, matern
from .errors import DesignError, InputError, NumericalError
from .estimators import FitResult, mixed_fit, ols_fit
from .experiments import DEFAULT_THETA_GRID, EXPERIMENTS, ExperimentSpec, run_experiment
from .fields import LocationSet, calibration_factor
from .splines import (
    SmoothControl,
    build_tps_basis,
    partial_spline_fit,
    regression_spline_basis_dim,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

#: run-config keys and their parsers.
_CONFIG_SCHEMA = {
    "experiment": str,
    "seed": int,
    "n": int,
    "n_sims": int,
    "design": str,
    "nu": float,
    "rho": float,
    "criterion": str,
    "spline_k": int,
    "jobs": int,
    "full": lambda s: s.lower() in ("1", "true", "yes"),
    "theta_grid": lambda s: tuple(float(v) for v in s.split(",")),
    "p_levels": lambda s: tuple(float(v) for v in s.split(",")),
    "p_z_levels": lambda s: tuple(float(v) for v in s.split(",")),
    "edf_levels": lambda s: tuple(float(v) for v in s.split(",")),
}


def _parse_config(path: str) -> dict:
    """Flat key=value file; '#' starts a comment; blank lines ignored."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        if key not in _CONFIG_SCHEMA:
            raise InputError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _CONFIG_SCHEMA[key](val)
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def _csv_floats(text: str):
    return tuple(float(v) for v in text.split(","))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialscale",
        description="Spatial-scale confounding: analytic bias/precision tools and simulations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo experiment grid")
    run.add_argument("--experiment", choices=EXPERIMENTS)
    run.add_argument("--seed", type=int, help="master seed (required)")
    run.add_argument("--config", help="flat key=value config file; flags override")
    run.add_argument("--out", help="output CSV path (default <experiment>.csv)")
    run.add_argument("--manifest", help="manifest JSON path (default <out>.manifest.json)")
    run.add_argument("--n", type=int)
    run.add_argument("--n-sims", type=int, dest="n_sims")
    run.add_argument("--full", action="store_true", default=None,
                     help="full-study replicate counts (default is 1/10 scale)")
    run.add_argument("--design", choices=("uniform", "grid", "cluster"))
    run.add_argument("--nu", type=float)
    run.add_argument("--rho", type=float)
    run.add_argument("--criterion", choices=("ML", "REML"))
    run.add_argument("--theta-grid", type=_csv_floats, dest="theta_grid",
                     metavar="T1,T2,...")
    run.add_argument("--p-levels", type=_csv_floats, dest="p_levels", metavar="P1,P2,...")
    run.add_argument("--p-z-levels", type=_csv_floats, dest="p_z_levels", metavar="P1,P2,...")
    run.add_argument("--edf-levels", type=_csv_floats, dest="edf_levels", metavar="E1,E2,...")
    run.add_argument("--spline-k", type=int, dest="spline_k")
    run.add_argument("--jobs", type=int, default=None)

    fit = sub.add_parser("fit", help="fit estimators to a CSV of x,y,X,Y rows")
    fit.add_argument("data", help="CSV with header x,y,X,Y (coordinates, exposure, outcome)")
    fit.add_argument("--method", default="ML",
                     choices=("OLS", "ML", "REML", "PenSpline", "RegSpline", "FixedEDF"))
    fit.add_argument("--nu", type=float, default=2.0)
    fit.add_argument("--edf", type=_csv_floats, metavar="E1,E2,...",
                     help="e.d.f. ladder for RegSpline/FixedEDF")
    fit.add_argument("--spline-k", type=int, default=60, dest="spline_k")
    fit.add_argument("--out", help="output CSV path (default stdout)")

    cal = sub.add_parser("calibrate", help="sample-variance calibration factors")
    cal.add_argument("--theta", type=_csv_floats, required=True, metavar="T1,T2,...")
    cal.add_argument("--nu", type=float, default=2.0)
    cal.add_argument("--n", type=int, default=100)
    cal.add_argument("--design", default="uniform", choices=("uniform", "grid", "cluster"))
    cal.add_argument("--n-reps", type=int, default=100, dest="n_reps")
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--out", help="output CSV path (default stdout)")

    mat = sub.add_parser("matern-table", help="tabulate the correlation function")
    mat.add_argument("--theta", type=float, required=True)
    mat.add_argument("--nu", type=float, default=2.0)
    mat.add_argument("--d-max", type=float, default=1.0, dest="d_max")
    mat.add_argument("--n-points", type=int, default=21, dest="n_points")
    mat.add_argument("--out", help="output CSV path (default stdout)")
    return parser


def _emit(text: str, out_path) -> None:
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_run(args) -> int:
    opts = _parse_config(args.config) if args.config else {}
    for key in _CONFIG_SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            opts[key] = flag
    if "experiment" not in opts:
        raise DesignError("an experiment name is required (--experiment or config)")
    if "seed" not in opts:
        raise DesignError("--seed is required for run")
    if opts.get("full") is None:
        opts.pop("full", None)
    spec = ExperimentSpec(**opts)
    result = run_experiment(spec)
    out = args.out or f"{spec.experiment}.csv"
    manifest = args.manifest or f"{out}.manifest.json"
    result.write(out, manifest)
    sys.stdout.write(
        f"{spec.experiment}: {len(result.rows)} rows -> {out} "
        f"({result.wall_time:.1f}s)\n"
    )
    return EXIT_OK


def _read_fit_csv(path: str):
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise InputError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if header != ["x", "y", "X", "Y"]:
        raise InputError(f"{path}:1: expected header x,y,X,Y, got {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
    if len(rows) < 3:
        raise InputError(f"{path}: need at least 3 data rows")
    arr = np.array(rows)
    return LocationSet(coords=arr[:, :2]), arr[:, 2], arr[:, 3]


def _cmd_fit(args) -> int:
    locs, x, y = _read_fit_csv(args.data)
    results: list[FitResult] = []
    if args.method == "OLS":
        results.append(ols_fit(x, y))
    elif args.method in ("ML", "REML"):
        results.append(mixed_fit(x, y, locs, nu_fit=args.nu, criterion=args.method))
    elif args.method == "PenSpline":
        basis = build_tps_basis(locs, min(args.spline_k, locs.n))
        results.append(partial_spline_fit(x, y, basis, SmoothControl("GCV")))
    else:
        if not args.edf:
            raise DesignError(f"--edf ladder is required for method {args.method}")
        if args.method == "FixedEDF":
            basis = build_tps_basis(locs, min(args.spline_k, locs.n))
            for edf in args.edf:
                results.append(
                    partial_spline_fit(x, y, basis, SmoothControl("FixedEDF", target_edf=edf))
                )
        else:  # RegSpline
            for edf in args.edf:
                basis = build_tps_basis(locs, regression_spline_basis_dim(edf))
                results.append(partial_spline_fit(x, y, basis, SmoothControl("Unpenalized")))
    text = FitResult.CSV_HEADER + "\n" + "".join(r.to_csv_row() + "\n" for r in results)
    _emit(text, args.out)
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    lines = ["theta,nu,n,design,d"]
    for theta in args.theta:
        d = calibration_factor(
            MaternSpec(theta, args.nu), args.n, design=args.design,
            n_reps=args.n_reps, seed=args.seed,
        )
        lines.append(f"{theta:.10g},{args.nu:.10g},{args.n},{args.design},{d:.10g}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _cmd_matern_table(args) -> int:
    if args.n_points < 2:
        raise DesignError("need at least 2 table points")
    spec = MaternSpec(args.theta, args.nu)
    dists = np.linspace(0.0, args.d_max, args.n_points)
    vals = matern(dists, spec)
    lines = ["d,correlation"]
    lines += [f"{d:.10g},{v:.10g}" for d, v in zip(dists, vals)]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    handlers = {
        "run": _cmd_run,
        "fit": _cmd_fit,
        "calibrate": _cmd_calibrate,
        "matern-table": _cmd_matern_table,
    }
    try:
        return handlers[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DesignError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
