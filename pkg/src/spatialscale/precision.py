"""Precision of GLS and OLS slope estimators under spatially correlated residuals.

Covers the closed-form expected GLS precision (with its effective sample
size), its ratio to the nonspatial baseline, the Monte Carlo GLS/OLS
precision ratio, and the true/naive OLS variance ratio (1/n) W' S W for
standardized exposure W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .covariance import MaternSpec, correlation_matrix_from_distances, jittered_cholesky
from .errors import DesignError
from .estimators import ols_true_variance
from .fields import LocationSet, rng_stream, sample_uniform


@dataclass(frozen=True)
class PrecisionInputs:
    """Ranges, spatial residual fraction, and scale factors for the precision formulas."""

    locs: LocationSet
    theta_x: float
    theta_g: float
    p_g: float
    sigma_x2: float = 1.0
    total_resid: float = 1.0
    nu: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.p_g <= 1.0:
            raise ValueError("p_g must lie in [0, 1]")
        if self.sigma_x2 < 0 or self.total_resid < 0:
            raise ValueError("variances must be >= 0")

    def residual_correlation(self) -> np.ndarray:
        """S = (1 - p_g) I + p_g R(theta_g)."""
        r_g = correlation_matrix_from_distances(
            self.locs.distances, MaternSpec(self.theta_g, self.nu)
        )
        return (1.0 - self.p_g) * np.eye(self.locs.n) + self.p_g * r_g

    def exposure_correlation(self) -> np.ndarray:
        return correlation_matrix_from_distances(
            self.locs.distances, MaternSpec(self.theta_x, self.nu)
        )


def effective_sample_size(inputs: PrecisionInputs) -> float:
    """tr(S^-1 R_x) - 1'S^-1 R_x S^-1 1 / 1'S^-1 1: the spatial analogue of n-1."""
    s_mat = inputs.residual_correlation()
    r_x = inputs.exposure_correlation()
    chol, _ = jittered_cholesky(s_mat)
    ones = np.ones(inputs.locs.n)
    w_rx = sla.cho_solve((chol, True), r_x)        # S^-1 R_x
    w_ones = sla.cho_solve((chol, True), ones)     # S^-1 1
    trace = float(np.trace(w_rx))
    correction = float(w_ones @ r_x @ w_ones) / float(ones @ w_ones)
    return trace - correction


def expected_gls_precision(inputs: PrecisionInputs) -> float:
    """Expected precision of the GLS slope over the sampling distribution of X."""
    return inputs.sigma_x2 / inputs.total_resid * effective_sample_size(inputs)


def nonspatial_baseline(inputs: PrecisionInputs) -> float:
    """sigma_x^2 (n - 1) / total residual variance."""
    return inputs.sigma_x2 * (inputs.locs.n - 1) / inputs.total_resid


def relative_gls_precision(
    theta_x: float,
    theta_g: float,
    p_g: float,
    n: int = 100,
    n_location_reps: int = 500,
    seed: int = 0,
    nu: float = 2.0,
) -> tuple[float, float]:
    """Mean and SE over location replicates of expected precision / nonspatial baseline."""
    if n < 3:
        raise DesignError("need n >= 3")
    ratios = np.empty(n_location_reps)
    for rep in range(n_location_reps):
        locs = sample_uniform(n, int(np.random.SeedSequence((seed, rep)).generate_state(1)[0]))
        inputs = PrecisionInputs(locs, theta_x, theta_g, p_g, nu=nu)
        ratios[rep] = expected_gls_precision(inputs) / nonspatial_baseline(inputs)
    return float(ratios.mean()), float(ratios.std(ddof=1) / np.sqrt(n_location_reps))


def gls_ols_precision_ratio(
    locs: LocationSet,
    theta_x: float,
    theta_g: float,
    p_g: float,
    n_sims: int = 500,
    seed: int = 0,
    nu: float = 2.0,
) -> tuple[float, float]:
    """Monte Carlo mean/SE over X draws of true-OLS variance / GLS variance.

    Both variances use the known residual correlation S; overall variance
    scales cancel from the ratio.
    """
    if locs.n < 3:
        raise DesignError("need n >= 3")
    inputs = PrecisionInputs(locs, theta_x, theta_g, p_g, nu=nu)
    s_mat = inputs.residual_correlation()
    r_x = inputs.exposure_correlation()
    lx, _ = jittered_cholesky(r_x)
    chol_s, _ = jittered_cholesky(s_mat)
    ones = np.ones(locs.n)
    ratios = np.empty(n_sims)
    for rep in range(n_sims):
        rng = rng_stream(seed, rep)
        x = lx @ rng.standard_normal(locs.n)
        dm = np.column_stack([ones, x])
        wd = sla.solve_triangular(chol_s, dm, lower=True)
        gls_var = np.linalg.inv(wd.T @ wd)[1, 1]
        ols_var = ols_true_variance(x, s_mat)
        ratios[rep] = ols_var / gls_var
    return float(ratios.mean()), float(ratios.std(ddof=1) / np.sqrt(n_sims))


def naive_ols_variance_ratio(x: np.ndarray, inputs: PrecisionInputs) -> float:
    """(1/n) W' S W with W = (X - Xbar 1)/s, s^2 the divide-by-n sample variance."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    centered = x - x.mean()
    s2 = float(centered @ centered) / n
    if s2 == 0:
        raise DesignError("X is constant")
    w = centered / np.sqrt(s2)
    return float(w @ inputs.residual_correlation() @ w) / n


def mean_naive_ols_variance_ratio(
    locs: LocationSet,
    theta_x: float,
    theta_g: float,
    p_g: float,
    n_sims: int = 500,
    seed: int = 0,
    nu: float = 2.0,
) -> tuple[float, float]:
    """Monte Carlo mean/SE of the true/naive OLS variance ratio over X draws."""
    inputs = PrecisionInputs(locs, theta_x, theta_g, p_g, nu=nu)
    s_mat = inputs.residual_correlation()
    r_x = inputs.exposure_correlation()
    lx, _ = jittered_cholesky(r_x)
    n = locs.n
    vals = np.empty(n_sims)
    for rep in range(n_sims):
        rng = rng_stream(seed, rep)
        x = lx @ rng.standard_normal(n)
        centered = x - x.mean()
        s2 = float(centered @ centered) / n
        w = centered / np.sqrt(s2)
        vals[rep] = float(w @ s_mat @ w) / n
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_sims))
