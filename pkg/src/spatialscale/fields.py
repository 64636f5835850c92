"""Location designs and Gaussian random field generation.

All sampling is a pure function of (inputs, seed).  Randomness flows
through numpy's Philox counter-based generator; independent streams are
derived with ``np.random.SeedSequence(master_seed, *stream_ids)`` so that
replicates can run in parallel with no ordering effect on results.

Calibration: the within-domain sample variance of a large-range field
underestimates its marginal variance.  The inflation factor d(theta)
uses the exact identity E[s^2] = sigma^2 (1 - 1'R1/n^2) for a mean-zero
GP, where s^2 is the divide-by-n sample variance; d is applied uniformly
to every GP component (exposure pieces, confounder, and the optional
extra residual field).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .covariance import (
    MaternSpec,
    correlation_matrix_from_distances,
    jittered_cholesky,
    pairwise_distances,
)
from .errors import DesignError, NumericalError


def rng_stream(seed: int, *stream_ids: int) -> np.random.Generator:
    """Philox generator for the stream identified by (seed, *stream_ids)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed),) + tuple(int(i) for i in stream_ids))))


@dataclass(frozen=True)
class LocationSet:
    """n planar coordinates on the unit square, with cached pairwise distances."""

    coords: np.ndarray

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def distances(self) -> np.ndarray:
        cached = getattr(self, "_distances", None)
        if cached is None:
            cached = pairwise_distances(self.coords)
            object.__setattr__(self, "_distances", cached)
        return cached

    def to_csv(self, values: Optional[np.ndarray] = None) -> str:
        """Serialize as CSV with columns x, y[, value] for debugging."""
        buf = io.StringIO()
        if values is None:
            buf.write("x,y\n")
            for x, y in self.coords:
                buf.write(f"{x:.17g},{y:.17g}\n")
        else:
            buf.write("x,y,value\n")
            for (x, y), v in zip(self.coords, values):
                buf.write(f"{x:.17g},{y:.17g},{v:.17g}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class FieldSpec:
    """One Gaussian field: mean, variance, Matern correlation, calibration flag.

    With ``calibrated=True`` the variance is inflated by d^2 computed on the
    location set at hand, so the expected sample variance matches ``variance``.
    """

    mean: float
    variance: float
    matern: MaternSpec
    calibrated: bool = False

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be >= 0")


@dataclass(frozen=True)
class ScenarioParams:
    """Full generative parameterization for the confounded-outcome scenarios.

    sigma_c2/sigma_u2/sigma_z2 are post-calibration targets (expected
    sample variances); tau2 is white-noise variance; rho the
    confounder-exposure correlation; theta_c/theta_u the spatial ranges of
    the confounded and unconfounded exposure components.  sigma_h2/theta_h
    configure the optional extra residual field of the multiscale-residual
    data-generating model.
    """

    beta0: float = 0.0
    beta_x: float = 0.5
    beta_z: float = 1.0
    sigma_c2: float = 1.0
    sigma_u2: float = 1.0
    sigma_z2: float = 1.0
    tau2: float = 4.0
    rho: float = 0.3
    theta_c: float = 0.5
    theta_u: float = 0.5
    nu: float = 2.0
    sigma_h2: float = 0.0
    theta_h: Optional[float] = None
    mu_x: float = 0.0
    mu_z: float = 0.0

    def __post_init__(self):
        for name in ("sigma_c2", "sigma_u2", "sigma_z2", "tau2", "sigma_h2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must be <= 1")
        if self.theta_c <= 0 or self.theta_u <= 0:
            raise ValueError("spatial ranges must be > 0")

    @property
    def p_c(self) -> float:
        """Confounded share of exposure sample variance."""
        return self.sigma_c2 / (self.sigma_c2 + self.sigma_u2)

    @property
    def p_z(self) -> float:
        """Confounder share of residual variance."""
        bz2sz2 = self.beta_z**2 * self.sigma_z2
        return bz2sz2 / (bz2sz2 + self.tau2)


def sample_uniform(n: int, seed: int) -> LocationSet:
    """n i.i.d. uniform points on the unit square."""
    if n < 1:
        raise DesignError("uniform design requires n >= 1")
    rng = rng_stream(seed)
    return LocationSet(coords=rng.random((n, 2)))


def sample_grid(n: int) -> LocationSet:
    """sqrt(n) x sqrt(n) endpoint-inclusive lattice covering the unit square."""
    side = round(n**0.5)
    if side * side != n:
        raise DesignError(f"grid design requires a perfect square, got n={n}")
    ticks = np.linspace(0.0, 1.0, side) if side > 1 else np.array([0.0])
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    return LocationSet(coords=np.column_stack([xx.ravel(), yy.ravel()]))


def sample_poisson_cluster(
    n: int, mean_children: float = 7.0, kernel_sd: float = 0.03, seed: int = 0
) -> LocationSet:
    """Poisson cluster (Thomas) process on the unit square, truncated to n points.

    Parents are uniform; each parent gets Poisson(mean_children) offspring
    displaced by an isotropic Gaussian(kernel_sd).  Parents are generated
    until at least n offspring exist; the first n are kept, clipped to
    [0,1]^2.
    """
    if n < 1:
        raise DesignError("cluster design requires n >= 1")
    if mean_children <= 0 or kernel_sd <= 0:
        raise DesignError("mean_children and kernel_sd must be > 0")
    rng = rng_stream(seed)
    pts = []
    total = 0
    while total < n:
        parent = rng.random(2)
        count = rng.poisson(mean_children)
        if count == 0:
            continue
        children = parent + kernel_sd * rng.standard_normal((count, 2))
        pts.append(children)
        total += count
    coords = np.vstack(pts)[:n]
    return LocationSet(coords=np.clip(coords, 0.0, 1.0))


def sample_design(design: str, n: int, seed: int) -> LocationSet:
    """Dispatch on design name: uniform, grid, or cluster."""
    if design == "uniform":
        return sample_uniform(n, seed)
    if design == "grid":
        return sample_grid(n)
    if design == "cluster":
        return sample_poisson_cluster(n, seed=seed)
    raise DesignError(f"unknown design '{design}'")


def calibration_factor_exact(corr: np.ndarray) -> float:
    """d >= 1 with d^2 = 1/(1 - 1'R1/n^2) for a single correlation matrix."""
    n = corr.shape[0]
    shrink = 1.0 - float(np.sum(corr)) / n**2
    if shrink <= 0:
        raise NumericalError("calibration degenerate: expected sample variance is 0")
    return 1.0 / np.sqrt(shrink)


def calibration_factor(
    matern_spec: MaternSpec,
    n: int,
    design: str = "uniform",
    n_reps: int = 100,
    seed: int = 0,
) -> float:
    """Sample-variance calibration factor d(theta) for a sampling design.

    Averages the exact shrinkage 1 - 1'R1/n^2 over n_reps location draws
    (a single draw for the deterministic grid design) and returns
    d = 1/sqrt(mean shrinkage).
    """
    if n < 2:
        raise DesignError("calibration requires n >= 2")
    if design == "grid":
        n_reps = 1
    shrinks = []
    for rep in range(n_reps):
        locs = sample_design(design, n, seed=seed + rep if design != "grid" else seed)
        corr = correlation_matrix_from_distances(locs.distances, matern_spec)
        shrinks.append(1.0 - float(np.sum(corr)) / n**2)
    mean_shrink = float(np.mean(shrinks))
    if mean_shrink <= 0:
        raise NumericalError("calibration degenerate: expected sample variance is 0")
    return 1.0 / np.sqrt(mean_shrink)


def sample_gp(locs: LocationSet, spec: FieldSpec, seed: int) -> np.ndarray:
    """One field draw: mean + sqrt(variance) * L w with L the jittered Cholesky factor."""
    rng = rng_stream(seed)
    return _sample_gp_rng(locs, spec, rng)


def _sample_gp_rng(locs: LocationSet, spec: FieldSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.variance == 0.0:
        rng.standard_normal(locs.n)  # keep stream advancement uniform
        return np.full(locs.n, spec.mean)
    corr = correlation_matrix_from_distances(locs.distances, spec.matern)
    var = spec.variance
    if spec.calibrated:
        var = var * calibration_factor_exact(corr) ** 2
    chol, _ = jittered_cholesky(corr)
    return spec.mean + np.sqrt(var) * (chol @ rng.standard_normal(locs.n))


def scenario_calibration(params: ScenarioParams, locs: LocationSet) -> tuple[float, float]:
    """(d_c, d_u) computed exactly on the given location set."""
    rc = correlation_matrix_from_distances(locs.distances, MaternSpec(params.theta_c, params.nu))
    ru = correlation_matrix_from_distances(locs.distances, MaternSpec(params.theta_u, params.nu))
    return calibration_factor_exact(rc), calibration_factor_exact(ru)


def sample_confounded_pair(
    locs: LocationSet,
    params: ScenarioParams,
    seed: int,
    calibration: Optional[tuple[float, float]] = None,
):
    """Draw (X, Z, X_c, X_u) with the exact joint covariance of the two-scale scenario.

    X_c ~ GP(0, d_c^2 sigma_c^2 R(theta_c)), X_u ~ GP(0, d_u^2 sigma_u^2 R(theta_u))
    independent, and Z = mu_z + rho (sigma_z/sigma_c) X_c
    + sigma_z sqrt(1-rho^2) d_c W with W ~ GP(0, R(theta_c)) independent,
    which realizes Cov(X, Z) = rho sigma_c sigma_z d_c^2 R(theta_c) without a
    2n x 2n factorization.  calibration overrides the exact per-location-set
    (d_c, d_u) when the design-averaged factors are wanted instead.
    """
    rng = rng_stream(seed)
    rc = correlation_matrix_from_distances(locs.distances, MaternSpec(params.theta_c, params.nu))
    ru = correlation_matrix_from_distances(locs.distances, MaternSpec(params.theta_u, params.nu))
    if calibration is None:
        d_c = calibration_factor_exact(rc)
        d_u = calibration_factor_exact(ru)
    else:
        d_c, d_u = calibration
    lc, _ = jittered_cholesky(rc)
    lu, _ = jittered_cholesky(ru)
    sigma_c = np.sqrt(params.sigma_c2)
    sigma_z = np.sqrt(params.sigma_z2)
    x_c = d_c * sigma_c * (lc @ rng.standard_normal(locs.n))
    x_u = d_u * np.sqrt(params.sigma_u2) * (lu @ rng.standard_normal(locs.n))
    w = d_c * (lc @ rng.standard_normal(locs.n))
    if sigma_c > 0:
        z = params.mu_z + params.rho * (sigma_z / sigma_c) * x_c + sigma_z * np.sqrt(1.0 - params.rho**2) * w
    else:
        z = params.mu_z + sigma_z * w
    x = params.mu_x + x_c + x_u
    return x, z, x_c, x_u


def sample_outcome(
    x: np.ndarray,
    z: np.ndarray,
    params: ScenarioParams,
    seed: int,
    locs: Optional[LocationSet] = None,
    multiscale: bool = False,
) -> np.ndarray:
    """Y = beta0 + beta_x X + beta_z Z + eps, optionally plus the extra residual field h."""
    rng = rng_stream(seed)
    y = params.beta0 + params.beta_x * x + params.beta_z * z
    y = y + np.sqrt(params.tau2) * rng.standard_normal(len(x))
    if multiscale and params.sigma_h2 > 0:
        if locs is None:
            raise DesignError("multiscale outcome requires the location set")
        theta_h = params.theta_h if params.theta_h is not None else params.theta_u
        spec = FieldSpec(0.0, params.sigma_h2, MaternSpec(theta_h, params.nu), calibrated=True)
        y = y + _sample_gp_rng(locs, spec, rng)
    return y
