"""Scenario drivers for the Monte Carlo studies, with deterministic seeding.

Every driver consumes an ExperimentSpec and returns a GridResult whose CSV
serialization is byte-identical for identical (spec, seed) regardless of
worker count: cells form an embarrassingly parallel pool keyed by cell
index, every random stream is derived from (master seed, cell, replicate),
and rows are reduced in cell order.

Reported log ratios use the natural log.  Desk-scale replicate counts are
the full-study counts divided by ten; pass full=True (or --full on the
CLI) to restore them.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bias import BiasInputs, bias_multiplier, expected_k_grid, k_of_x
from .errors import DesignError, NumericalError
from .estimators import gls_fit, mixed_fit, ols_fit
from .fields import (
    ScenarioParams,
    sample_confounded_pair,
    sample_design,
    sample_outcome,
)
from .precision import (
    PrecisionInputs,
    expected_gls_precision,
    nonspatial_baseline,
)
from .splines import (
    SmoothControl,
    build_tps_basis,
    partial_spline_fit,
    regression_spline_basis_dim,
)
from .covariance import jittered_cholesky
from scipy import linalg as sla

DEFAULT_THETA_GRID = (0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9)
FULL_STUDY_SIMS = {
    "bias-grid": 1000,
    "estimated-fit-grid": 2000,
    "mse-coverage-grid": 2000,
    "fixed-edf-grid": 2000,
    "precision-grid": 500,
}
EXPERIMENTS = tuple(FULL_STUDY_SIMS)

#: Core generative parameter values of the estimated-parameter studies
#: (effective p_c = 0.5, p_z = 0.2).
CORE_PARAMS = dict(
    sigma_c2=1.0, sigma_u2=1.0, sigma_z2=1.0, beta_z=1.0, tau2=4.0,
    beta_x=0.5, rho=0.3,
)


@dataclass
class ExperimentSpec:
    """Configuration of one experiment run."""

    experiment: str
    seed: int
    theta_grid: Sequence[float] = DEFAULT_THETA_GRID
    n: int = 100
    n_sims: Optional[int] = None      # None -> desk scale (full / 10)
    full: bool = False
    design: str = "uniform"
    nu: float = 2.0
    rho: float = 0.3
    criterion: str = "ML"             # mixed-model criterion
    p_levels: Sequence[float] = (0.1, 0.5, 0.9)
    p_z_levels: Sequence[float] = (0.1, 0.5, 0.9)
    edf_levels: Sequence[float] = (5.0, 15.0, 30.0)
    spline_k: int = 60
    jobs: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise DesignError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.n_sims is None:
            base = FULL_STUDY_SIMS[self.experiment]
            self.n_sims = base if self.full else max(base // 10, 2)
        if self.n_sims < 2:
            raise DesignError("n_sims must be >= 2")
        self.theta_grid = tuple(float(t) for t in self.theta_grid)
        if not self.theta_grid:
            raise DesignError("theta grid must be non-empty")


@dataclass
class GridResult:
    """Per-cell Monte Carlo summaries plus run metadata."""

    experiment: str
    header: list[str]
    rows: list[dict]
    spec: ExperimentSpec
    wall_time: float = 0.0

    def to_csv(self) -> str:
        lines = [",".join(self.header)]
        for row in self.rows:
            lines.append(",".join(_fmt(row.get(col)) for col in self.header))
        return "\n".join(lines) + "\n"

    def write(self, csv_path, manifest_path=None) -> None:
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv())
        if manifest_path is not None:
            manifest = {
                "experiment": self.experiment,
                "spec": asdict(self.spec),
                "version": __version__,
                "wall_time_s": round(self.wall_time, 3),
            }
            with open(manifest_path, "w") as fh:
                json.dump(manifest, fh, indent=2, default=list)
                fh.write("\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def _substream(seed: int, *ids: int) -> int:
    return int(np.random.SeedSequence((int(seed),) + tuple(int(i) for i in ids)).generate_state(1)[0])


def _map_cells(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def run_experiment(spec: ExperimentSpec) -> GridResult:
    """Dispatch to the named experiment driver."""
    driver = {
        "bias-grid": run_bias_grid,
        "estimated-fit-grid": run_estimated_fit_grid,
        "mse-coverage-grid": run_mse_coverage_grid,
        "fixed-edf-grid": run_fixed_edf_grid,
        "precision-grid": run_precision_grid,
    }[spec.experiment]
    start = time.perf_counter()
    result = driver(spec)
    result.wall_time = time.perf_counter() - start
    return result


# ---------------------------------------------------------------------------
# Expected bias-modulation term on a fixed grid
# ---------------------------------------------------------------------------

def _bias_panel(task):
    spec, panel_idx, p_c, p_z = task
    return expected_k_grid(
        spec.theta_grid,
        spec.theta_grid,
        p_c,
        p_z,
        n=spec.n,
        design="grid",
        n_sims=spec.n_sims,
        seed=_substream(spec.seed, panel_idx),
    )


def run_bias_grid(spec: ExperimentSpec) -> GridResult:
    """E_X k(X) over the (theta_c, theta_u) grid for each (p_c, p_z) panel."""
    tasks = []
    idx = 0
    for p_c in spec.p_levels:
        for p_z in spec.p_z_levels:
            tasks.append((spec, idx, float(p_c), float(p_z)))
            idx += 1
    panels = _map_cells(_bias_panel, tasks, spec.jobs)
    rows = [row for panel in panels for row in panel]
    header = ["theta_c", "theta_u", "p_c", "p_z", "mean_k", "se_k", "n_sims"]
    return GridResult("bias-grid", header, rows, spec)


# ---------------------------------------------------------------------------
# Estimated-parameter simulation studies
# ---------------------------------------------------------------------------

def _simulate_replicate(spec: ExperimentSpec, params: ScenarioParams, cell: int, rep: int):
    """Fresh locations + fields + outcome for one replicate."""
    locs = sample_design(spec.design, spec.n, _substream(spec.seed, cell, rep, 0))
    x, z, _, _ = sample_confounded_pair(
        locs, params, _substream(spec.seed, cell, rep, 1)
    )
    y = sample_outcome(x, z, params, _substream(spec.seed, cell, rep, 2), locs=locs)
    return locs, x, y


#: Replicate-level failures that count as exclusions rather than crashing a run.
FIT_ERRORS = (NumericalError, np.linalg.LinAlgError)


def _spline_k(spec: ExperimentSpec, n: int) -> int:
    return min(spec.spline_k, n)


def _core_scenario(spec: ExperimentSpec, theta_c: float, theta_u: float) -> ScenarioParams:
    return ScenarioParams(theta_c=theta_c, theta_u=theta_u, nu=spec.nu,
                          **{**CORE_PARAMS, "rho": spec.rho})


def _summarize(estimates: dict[str, list], params: ScenarioParams, base: dict, n_fail: int,
               n_sims: int, ses: Optional[dict[str, list]] = None) -> list[dict]:
    rows = []
    for method, vals in estimates.items():
        vals = np.asarray(vals)
        m = len(vals)
        if m < 2:
            row = dict(base)
            row.update(method=method, n_used=m, n_excluded=n_fail, n_sims=n_sims)
            rows.append(row)
            continue
        mean = vals.mean()
        sd = vals.std(ddof=1)
        bias = mean - params.beta_x
        row = dict(base)
        row.update(
            method=method,
            rel_bias=bias / params.beta_x,
            rel_bias_se=sd / np.sqrt(m) / abs(params.beta_x),
            var_estimates=sd**2,
            mse=float(np.mean((vals - params.beta_x) ** 2)),
            n_used=m,
            n_excluded=n_fail,
            n_sims=n_sims,
        )
        if ses is not None and method in ses:
            se_arr = np.asarray(ses[method])
            row["mean_sq_se"] = float(np.mean(se_arr**2))
            cover = np.abs(vals - params.beta_x) <= 1.96 * se_arr
            row["coverage"] = float(np.mean(cover))
            row["coverage_se"] = float(np.sqrt(row["coverage"] * (1 - row["coverage"]) / m))
        rows.append(row)
    return rows


def _estimated_fit_cell(task):
    spec, cell, theta_c, theta_u = task
    params = _core_scenario(spec, theta_c, theta_u)
    estimates: dict[str, list] = {
        "GLS-theory": [], "GLS-known": [], "ML": [], "PenSpline": [], "OLS": [],
    }
    n_fail = 0
    for rep in range(spec.n_sims):
        locs, x, y = _simulate_replicate(spec, params, cell, rep)
        try:
            inputs = BiasInputs(locs, params)
            theory = params.beta_x + k_of_x(x, inputs) * bias_multiplier(params)
            # GLS with the generative residual covariance treated as known.
            sigma = (
                params.beta_z**2 * inputs.var_z * inputs.r_c
                + params.tau2 * np.eye(locs.n)
            )
            fit_gls = gls_fit(x, y, sigma)
            fit_ml = mixed_fit(x, y, locs, nu_fit=spec.nu, criterion=spec.criterion)
            basis = build_tps_basis(locs, _spline_k(spec, locs.n))
            fit_sp = partial_spline_fit(x, y, basis, SmoothControl("GCV"))
            fit_ols = ols_fit(x, y)
        except FIT_ERRORS:
            n_fail += 1
            continue
        estimates["GLS-theory"].append(theory)
        estimates["GLS-known"].append(fit_gls.betax_hat)
        estimates["ML"].append(fit_ml.betax_hat)
        estimates["PenSpline"].append(fit_sp.betax_hat)
        estimates["OLS"].append(fit_ols.betax_hat)
    base = dict(theta_c=theta_c, theta_u=theta_u)
    return _summarize(estimates, params, base, n_fail, spec.n_sims)


def run_estimated_fit_grid(spec: ExperimentSpec) -> GridResult:
    """Relative bias of theory/ML/penalized-spline/OLS with redrawn locations."""
    tasks = [
        (spec, i * len(spec.theta_grid) + j, tc, tu)
        for i, tc in enumerate(spec.theta_grid)
        for j, tu in enumerate(spec.theta_grid)
    ]
    cells = _map_cells(_estimated_fit_cell, tasks, spec.jobs)
    rows = [row for cell in cells for row in cell]
    header = [
        "theta_c", "theta_u", "method", "rel_bias", "rel_bias_se",
        "var_estimates", "mse", "n_used", "n_excluded", "n_sims",
    ]
    return GridResult("estimated-fit-grid", header, rows, spec)


def _mse_coverage_cell(task):
    spec, cell, theta_c, theta_u = task
    params = _core_scenario(spec, theta_c, theta_u)
    estimates: dict[str, list] = {spec.criterion: [], "PenSpline": []}
    ses: dict[str, list] = {spec.criterion: [], "PenSpline": []}
    n_fail = 0
    for rep in range(spec.n_sims):
        locs, x, y = _simulate_replicate(spec, params, cell, rep)
        try:
            fit_mm = mixed_fit(x, y, locs, nu_fit=spec.nu, criterion=spec.criterion)
            basis = build_tps_basis(locs, _spline_k(spec, locs.n))
            fit_sp = partial_spline_fit(x, y, basis, SmoothControl("GCV"))
        except FIT_ERRORS:
            n_fail += 1
            continue
        estimates[spec.criterion].append(fit_mm.betax_hat)
        ses[spec.criterion].append(fit_mm.se_betax)
        estimates["PenSpline"].append(fit_sp.betax_hat)
        ses["PenSpline"].append(fit_sp.se_betax)
    base = dict(theta_c=theta_c, theta_u=theta_u)
    return _summarize(estimates, params, base, n_fail, spec.n_sims, ses=ses)


def run_mse_coverage_grid(spec: ExperimentSpec) -> GridResult:
    """MSE, variance, average squared SE, and 95% coverage for mixed model and spline."""
    tasks = [
        (spec, i * len(spec.theta_grid) + j, tc, tu)
        for i, tc in enumerate(spec.theta_grid)
        for j, tu in enumerate(spec.theta_grid)
    ]
    cells = _map_cells(_mse_coverage_cell, tasks, spec.jobs)
    rows = [row for cell in cells for row in cell]
    header = [
        "theta_c", "theta_u", "method", "rel_bias", "rel_bias_se",
        "var_estimates", "mse", "mean_sq_se", "coverage", "coverage_se",
        "n_used", "n_excluded", "n_sims",
    ]
    return GridResult("mse-coverage-grid", header, rows, spec)


def _fixed_edf_cell(task):
    spec, cell, theta_c, theta_u = task
    params = _core_scenario(spec, theta_c, theta_u)
    methods = {}
    for edf in spec.edf_levels:
        methods[f"RegSpline-{edf:g}"] = []
        methods[f"PenSpline-{edf:g}"] = []
    realized: dict[str, list] = {name: [] for name in methods}
    n_fail = 0
    for rep in range(spec.n_sims):
        locs, x, y = _simulate_replicate(spec, params, cell, rep)
        try:
            big_basis = build_tps_basis(locs, _spline_k(spec, locs.n))
            fits = {}
            for edf in spec.edf_levels:
                k_reg = regression_spline_basis_dim(edf)
                reg_basis = build_tps_basis(locs, k_reg)
                fits[f"RegSpline-{edf:g}"] = partial_spline_fit(
                    x, y, reg_basis, SmoothControl("Unpenalized")
                )
                fits[f"PenSpline-{edf:g}"] = partial_spline_fit(
                    x, y, big_basis, SmoothControl("FixedEDF", target_edf=edf)
                )
        except FIT_ERRORS:
            n_fail += 1
            continue
        for name, fit in fits.items():
            methods[name].append(fit.betax_hat)
            realized[name].append(fit.edf)
    base = dict(theta_c=theta_c, theta_u=theta_u)
    rows = _summarize(methods, params, base, n_fail, spec.n_sims)
    for row in rows:
        vals = realized[row["method"]]
        row["mean_edf"] = float(np.mean(vals)) if vals else None
    return rows


def run_fixed_edf_grid(spec: ExperimentSpec) -> GridResult:
    """Regression vs penalized splines at pre-specified effective degrees of freedom."""
    tasks = [
        (spec, i * len(spec.theta_grid) + j, tc, tu)
        for i, tc in enumerate(spec.theta_grid)
        for j, tu in enumerate(spec.theta_grid)
    ]
    cells = _map_cells(_fixed_edf_cell, tasks, spec.jobs)
    rows = [row for cell in cells for row in cell]
    header = [
        "theta_c", "theta_u", "method", "rel_bias", "rel_bias_se",
        "var_estimates", "mse", "mean_edf", "n_used", "n_excluded", "n_sims",
    ]
    return GridResult("fixed-edf-grid", header, rows, spec)


def _precision_cell(task):
    spec, cell, p_g, theta_x, theta_g = task
    n = spec.n
    rel_prec = np.empty(spec.n_sims)
    gls_ols = np.empty(spec.n_sims)
    naive = np.empty(spec.n_sims)
    ones = np.ones(n)
    for rep in range(spec.n_sims):
        locs = sample_design(spec.design, n, _substream(spec.seed, cell, rep, 0))
        inputs = PrecisionInputs(locs, theta_x, theta_g, p_g, nu=spec.nu)
        s_mat = inputs.residual_correlation()
        r_x = inputs.exposure_correlation()
        rel_prec[rep] = expected_gls_precision(inputs) / nonspatial_baseline(inputs)
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((spec.seed, cell, rep, 1)))
        )
        lx, _ = jittered_cholesky(r_x)
        x = lx @ rng.standard_normal(n)
        dm = np.column_stack([ones, x])
        chol_s, _ = jittered_cholesky(s_mat)
        wd = sla.solve_triangular(chol_s, dm, lower=True)
        gls_var = np.linalg.inv(wd.T @ wd)[1, 1]
        bread = np.linalg.inv(dm.T @ dm)
        ols_var = (bread @ (dm.T @ s_mat @ dm) @ bread)[1, 1]
        gls_ols[rep] = ols_var / gls_var
        centered = x - x.mean()
        w = centered / np.sqrt(centered @ centered / n)
        naive[rep] = float(w @ s_mat @ w) / n
    rows = []
    for stat, vals in (
        ("rel_gls_precision", rel_prec),
        ("gls_ols_ratio", gls_ols),
        ("naive_var_ratio", naive),
    ):
        mean = float(vals.mean())
        rows.append(
            {
                "theta_x": theta_x,
                "theta_g": theta_g,
                "p_g": p_g,
                "statistic": stat,
                "mean": mean,
                "se": float(vals.std(ddof=1) / np.sqrt(spec.n_sims)),
                "log_mean": float(np.log(mean)) if mean > 0 else None,
                "n_sims": spec.n_sims,
            }
        )
    return rows


def run_precision_grid(spec: ExperimentSpec) -> GridResult:
    """Expected GLS precision ratio, GLS/OLS ratio, true/naive OLS variance ratio."""
    tasks = []
    cell = 0
    for p_g in spec.p_levels:
        for theta_x in spec.theta_grid:
            for theta_g in spec.theta_grid:
                tasks.append((spec, cell, float(p_g), theta_x, theta_g))
                cell += 1
    cells = _map_cells(_precision_cell, tasks, spec.jobs)
    rows = [row for cell_rows in cells for row in cell_rows]
    header = ["theta_x", "theta_g", "p_g", "statistic", "mean", "se", "log_mean", "n_sims"]
    return GridResult("precision-grid", header, rows, spec)
