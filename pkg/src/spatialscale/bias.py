"""Analytic spatial-confounding bias quantities.

Same-scale bias (exposure and confounder sharing one range) is the
nonspatial value rho (sigma_z / sigma_x) beta_z.  In the two-scale
setting the conditional bias of the known-parameter GLS fit is
k(X) * rho (sigma_z / sigma_c) beta_z with

    k(X) = [(X'S*^-1 X)^-1 X' S*^-1 M (X - mu_x 1)]_2 * p_c,

where S* is the normalized residual correlation (1-p_z) I + p_z R(theta_c)
and M = (p_c I + (1-p_c) R(theta_u) R(theta_c)^-1)^-1.  All variance
ratios entering S*, M, and the leading p_c use the calibrated marginal
variances (d_c^2 sigma_c^2 etc.), which is what makes the diagonal
identity E_X k(X) = p_c exact when theta_c = theta_u.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg as sla

from .covariance import MaternSpec, correlation_matrix_from_distances, jittered_cholesky
from .errors import NumericalError
from .fields import (
    LocationSet,
    ScenarioParams,
    calibration_factor,
    rng_stream,
    sample_design,
    scenario_calibration,
)


@dataclass
class BiasInputs:
    """Everything k(X) needs: locations, scenario, calibration factors.

    Precomputes the matrices that do not depend on X so replicate loops
    only pay two triangular solves per draw.
    """

    locs: LocationSet
    params: ScenarioParams
    calibration: Optional[tuple[float, float]] = None
    multiscale: bool = False

    def __post_init__(self):
        p = self.params
        if self.calibration is None:
            self.calibration = scenario_calibration(p, self.locs)
        d_c, d_u = self.calibration
        self.r_c = correlation_matrix_from_distances(
            self.locs.distances, MaternSpec(p.theta_c, p.nu)
        )
        self.r_u = correlation_matrix_from_distances(
            self.locs.distances, MaternSpec(p.theta_u, p.nu)
        )
        # Calibrated marginal variances.
        self.var_c = d_c**2 * p.sigma_c2
        self.var_u = d_u**2 * p.sigma_u2
        self.var_z = d_c**2 * p.sigma_z2
        self.p_c_marginal = self.var_c / (self.var_c + self.var_u)
        bz2vz = p.beta_z**2 * self.var_z
        resid_extra = 0.0
        self.sigma_star = None  # set below
        if self.multiscale and p.sigma_h2 > 0:
            # Known-variance multiscale residual: fold sigma_h^2 R(theta_h)
            # into the residual covariance the GLS fit treats as known.
            theta_h = p.theta_h if p.theta_h is not None else p.theta_u
            r_h = correlation_matrix_from_distances(
                self.locs.distances, MaternSpec(theta_h, p.nu)
            )
            d_h = calibration_factor_of(r_h)
            var_h = d_h**2 * p.sigma_h2
            resid = bz2vz * self.r_c + var_h * r_h + p.tau2 * np.eye(self.locs.n)
            self.sigma_star = resid / (bz2vz + var_h + p.tau2)
        else:
            p_z = bz2vz / (bz2vz + p.tau2)
            self.sigma_star = (1.0 - p_z) * np.eye(self.locs.n) + p_z * self.r_c
        self.p_z_marginal = bz2vz / (bz2vz + p.tau2)
        try:
            m_inv = self.p_c_marginal * self.r_c + (1.0 - self.p_c_marginal) * self.r_u
            # M R(theta_c)^... : k(X) needs M = (p_c I + (1-p_c) R_u R_c^-1)^-1
            # = R_c (p_c R_c + (1-p_c) R_u)^-1.
            self.m_mat = self.r_c @ np.linalg.solve(m_inv, np.eye(self.locs.n))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular M construction") from exc
        self.star_chol, _ = jittered_cholesky(self.sigma_star)


def calibration_factor_of(corr: np.ndarray) -> float:
    n = corr.shape[0]
    shrink = 1.0 - float(np.sum(corr)) / n**2
    if shrink <= 0:
        raise NumericalError("degenerate calibration")
    return 1.0 / np.sqrt(shrink)


def same_scale_bias(params: ScenarioParams) -> float:
    """Bias rho (sigma_z / sigma_x) beta_z of the single-scale scenario."""
    if params.sigma_u2 != 0:
        raise ValueError("same-scale bias applies only when sigma_u2 = 0")
    if params.sigma_c2 <= 0:
        raise ValueError("sigma_x must be > 0")
    return params.rho * np.sqrt(params.sigma_z2 / params.sigma_c2) * params.beta_z


def _k_quadratic(x: np.ndarray, inputs: BiasInputs, whiten: bool) -> float:
    """Shared [.]_2 projection; whiten=True uses S*, False the identity (OLS)."""
    n = inputs.locs.n
    dm = np.column_stack([np.ones(n), x])
    target = inputs.m_mat @ (x - inputs.params.mu_x)
    if whiten:
        wd = sla.solve_triangular(inputs.star_chol, dm, lower=True)
        wt = sla.solve_triangular(inputs.star_chol, target, lower=True)
    else:
        wd, wt = dm, target
    coef = np.linalg.solve(wd.T @ wd, wd.T @ wt)
    return float(coef[1]) * inputs.p_c_marginal


def k_of_x(x: np.ndarray, inputs: BiasInputs) -> float:
    """Bias-modulation term k(X); conditional bias is k(X) rho (sigma_z/sigma_c) beta_z."""
    return _k_quadratic(np.asarray(x, dtype=float), inputs, whiten=True)


def ols_k_of_x(x: np.ndarray, inputs: BiasInputs) -> float:
    """Same projection with S* replaced by the identity: the OLS analogue."""
    return _k_quadratic(np.asarray(x, dtype=float), inputs, whiten=False)


def bias_multiplier(params: ScenarioParams) -> float:
    """rho (sigma_z / sigma_c) beta_z: converts k(X) into conditional bias."""
    return params.rho * np.sqrt(params.sigma_z2 / params.sigma_c2) * params.beta_z


def sample_x_draw(inputs: BiasInputs, rng: np.random.Generator) -> np.ndarray:
    """One calibrated two-scale exposure draw X = mu_x + X_c + X_u."""
    lc, _ = jittered_cholesky(inputs.r_c)
    lu, _ = jittered_cholesky(inputs.r_u)
    x_c = np.sqrt(inputs.var_c) * (lc @ rng.standard_normal(inputs.locs.n))
    x_u = np.sqrt(inputs.var_u) * (lu @ rng.standard_normal(inputs.locs.n))
    return inputs.params.mu_x + x_c + x_u


def mean_k(
    inputs: BiasInputs,
    n_sims: int,
    seed: int,
    use_ols: bool = False,
) -> tuple[float, float]:
    """Monte Carlo mean and SE of k(X) over fresh X draws at fixed locations."""
    lc, _ = jittered_cholesky(inputs.r_c)
    lu, _ = jittered_cholesky(inputs.r_u)
    n = inputs.locs.n
    vals = np.empty(n_sims)
    for rep in range(n_sims):
        rng = rng_stream(seed, rep)
        x = (
            inputs.params.mu_x
            + np.sqrt(inputs.var_c) * (lc @ rng.standard_normal(n))
            + np.sqrt(inputs.var_u) * (lu @ rng.standard_normal(n))
        )
        vals[rep] = _k_quadratic(x, inputs, whiten=not use_ols)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_sims))


def scenario_for_ratios(
    theta_c: float, theta_u: float, p_c: float, p_z: float, nu: float = 2.0
) -> ScenarioParams:
    """ScenarioParams whose target variance ratios hit the requested (p_c, p_z)."""
    return ScenarioParams(
        sigma_c2=p_c,
        sigma_u2=1.0 - p_c,
        sigma_z2=p_z,
        beta_z=1.0,
        tau2=1.0 - p_z,
        theta_c=theta_c,
        theta_u=theta_u,
        nu=nu,
    )


def expected_k_grid(
    theta_c_grid: Sequence[float],
    theta_u_grid: Sequence[float],
    p_c: float,
    p_z: float,
    n: int = 100,
    design: str = "grid",
    n_sims: int = 1000,
    seed: int = 0,
    use_ols: bool = False,
    multiscale_sigma_h2: float = 0.0,
) -> list[dict]:
    """Per-cell Monte Carlo mean/SE of k(X) over the (theta_c, theta_u) grid.

    With the (default) fixed grid design the locations are held fixed and
    only the fields are redrawn; other designs redraw locations per cell.
    """
    rows = []
    for i, theta_c in enumerate(theta_c_grid):
        for j, theta_u in enumerate(theta_u_grid):
            cell_seed = int(np.random.SeedSequence((seed, i, j)).generate_state(1)[0])
            locs = sample_design(design, n, cell_seed)
            params = scenario_for_ratios(theta_c, theta_u, p_c, p_z)
            if multiscale_sigma_h2 > 0:
                params = ScenarioParams(
                    **{**params.__dict__, "sigma_h2": multiscale_sigma_h2}
                )
            inputs = BiasInputs(
                locs, params, multiscale=multiscale_sigma_h2 > 0
            )
            mean, se = mean_k(inputs, n_sims, cell_seed, use_ols=use_ols)
            rows.append(
                {
                    "theta_c": theta_c,
                    "theta_u": theta_u,
                    "p_c": p_c,
                    "p_z": p_z,
                    "mean_k": mean,
                    "se_k": se,
                    "n_sims": n_sims,
                }
            )
    return rows
