"""Low-rank 2-D thin plate spline spatial term for partial-linear fits.

The smooth g(s) uses the radial basis eta(r) = r^2 log(r) at knots chosen
by a greedy max-min (farthest point) subset of the observed locations,
with the side conditions T'delta = 0 (T spanning constants and linear
coordinates at the knots) absorbed by a null-space reparameterization.
That leaves a strictly PSD wiggliness penalty on the radial coefficients
and an unpenalized [x, y] pair; constants live in the model intercept and
all smooth columns are centered against it.

Fitting uses a Demmler-Reinsch decomposition so that the effective
degrees of freedom, RSS, and coefficient covariance are O(basis dim) per
smoothing parameter, which makes the GCV grid search and the fixed-e.d.f.
inversion cheap.

e.d.f. accounting: every e.d.f. reported here is the trace of the full
hat matrix, i.e. it counts the intercept and the exposure column (2) plus
the smooth term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import DesignError, NumericalError
from .estimators import FitResult
from .fields import LocationSet

LAMBDA_GRID = np.geomspace(1e-8, 1e8, 49)


@dataclass(frozen=True)
class SplineBasis:
    """Design columns and PSD penalty for the spatial smooth."""

    basis_matrix: np.ndarray    # n x (k - 4): [x_c, y_c, radial block]
    penalty_matrix: np.ndarray  # matching PSD penalty (zero on the linear pair)
    k: int                      # nominal basis dimension (k - 3 radial knots)
    knots: np.ndarray


@dataclass(frozen=True)
class SmoothControl:
    """Smoothing-parameter policy: GCV search, fixed e.d.f., or unpenalized."""

    mode: str = "GCV"
    target_edf: Optional[float] = None
    lam: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("GCV", "FixedEDF", "Unpenalized", "FixedLambda"):
            raise ValueError(f"unknown smoothing mode {self.mode!r}")
        if self.mode == "FixedEDF" and (self.target_edf is None or self.target_edf <= 0):
            raise ValueError("FixedEDF requires target_edf > 0")
        if self.mode == "FixedLambda" and (self.lam is None or self.lam < 0):
            raise ValueError("FixedLambda requires lam >= 0")


def tps_eta(r):
    """Thin plate radial function r^2 log(r), continuously extended to 0 at r=0."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos])
    return out


def farthest_point_knots(coords: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min subset of m rows: deterministic space-filling knots."""
    n = coords.shape[0]
    if m > n:
        raise DesignError(f"cannot pick {m} knots from {n} locations")
    center = coords.mean(axis=0)
    first = int(np.argmin(np.sum((coords - center) ** 2, axis=1)))
    chosen = [first]
    mind = np.sum((coords - coords[first]) ** 2, axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.sum((coords - coords[nxt]) ** 2, axis=1))
    return coords[np.array(chosen)]


def build_tps_basis(locs: LocationSet, k: int) -> SplineBasis:
    """Thin plate basis of nominal dimension k over the given locations.

    Uses k' = k - 3 radial knots; the constrained radial block contributes
    k' - 3 columns and the linear pair two more.
    """
    n = locs.n
    if k > n:
        raise DesignError(f"basis dimension k={k} exceeds n={n}")
    if k < 7:
        raise DesignError("need k >= 7 for at least one constrained radial column")
    kk = k - 3
    knots = farthest_point_knots(locs.coords, kk)
    t_mat = np.column_stack([np.ones(kk), knots])
    # Orthonormal basis of null(T'): the admissible radial coefficients.
    _, _, vt = np.linalg.svd(t_mat.T, full_matrices=True)
    z_mat = vt[3:].T
    dist_sk = np.sqrt(
        np.sum((locs.coords[:, None, :] - knots[None, :, :]) ** 2, axis=-1)
    )
    dist_kk = np.sqrt(np.sum((knots[:, None, :] - knots[None, :, :]) ** 2, axis=-1))
    f_mat = tps_eta(dist_sk)
    e_mat = tps_eta(dist_kk)
    radial = f_mat @ z_mat
    pen_radial = z_mat.T @ e_mat @ z_mat
    pen_radial = 0.5 * (pen_radial + pen_radial.T)
    cols = np.column_stack([locs.coords, radial])
    cols = cols - cols.mean(axis=0)  # orthogonal to the intercept
    penalty = np.zeros((cols.shape[1], cols.shape[1]))
    penalty[2:, 2:] = pen_radial
    return SplineBasis(basis_matrix=cols, penalty_matrix=penalty, k=k, knots=knots)


class _PenalizedSolver:
    """Demmler-Reinsch machinery for [1, X, B] with penalty on B's radial block."""

    def __init__(self, x, y, basis: SplineBasis):
        y = np.asarray(y, dtype=float)
        n = len(y)
        dm = np.column_stack([np.ones(n), np.asarray(x, dtype=float), basis.basis_matrix])
        m = dm.shape[1]
        pen = np.zeros((m, m))
        pen[2:, 2:] = basis.penalty_matrix
        gram = dm.T @ dm
        try:
            r_fac = np.linalg.cholesky(gram).T  # upper triangular
        except np.linalg.LinAlgError as exc:
            raise DesignError("augmented design is rank deficient") from exc
        r_inv = np.linalg.inv(r_fac)
        s_mat = r_inv.T @ pen @ r_inv
        vals, u_mat = np.linalg.eigh(0.5 * (s_mat + s_mat.T))
        self.vals = np.clip(vals, 0.0, None)
        self.proj = r_inv @ u_mat              # maps rotated coords to coefficients
        self.b = u_mat.T @ (r_inv.T @ (dm.T @ y))
        self.yty = float(y @ y)
        self.n = n
        self.m = m
        self.dm = dm
        self.y = y

    def edf(self, lam: float) -> float:
        return float(np.sum(1.0 / (1.0 + lam * self.vals)))

    def rss(self, lam: float) -> float:
        shrink = 1.0 / (1.0 + lam * self.vals)
        gamma = shrink * self.b
        return max(self.yty - 2.0 * float(self.b @ gamma) + float(gamma @ gamma), 0.0)

    def gcv(self, lam: float) -> float:
        return self.n * self.rss(lam) / (self.n - self.edf(lam)) ** 2

    def fit(self, lam: float, method: str, converged: bool = True) -> FitResult:
        shrink = 1.0 / (1.0 + lam * self.vals)
        gamma = shrink * self.b
        coef = self.proj @ gamma
        rss = self.rss(lam)
        edf = self.edf(lam)
        sigma2 = rss / max(self.n - edf, 1e-8)
        # Cov = sigma^2 A M A with A = (M + lam P)^-1; in rotated coordinates
        # A M A = proj diag(shrink^2) proj'.
        var_bx = sigma2 * float((self.proj[1] * shrink**2) @ self.proj[1])
        return FitResult(
            method=method,
            beta0_hat=float(coef[0]),
            betax_hat=float(coef[1]),
            se_betax=float(np.sqrt(max(var_bx, 0.0))),
            edf=edf,
            converged=converged,
        )


def partial_spline_fit(x, y, basis: SplineBasis, control: SmoothControl) -> FitResult:
    """Fit Y = beta0 + beta_x X + g(s) + eps with the requested smoothing policy."""
    solver = _PenalizedSolver(x, y, basis)
    if control.mode == "Unpenalized":
        return solver.fit(0.0, "RegSpline")
    if control.mode == "FixedLambda":
        return solver.fit(control.lam, "PenSpline")
    if control.mode == "FixedEDF":
        lam = _invert_edf(solver, control.target_edf)
        return solver.fit(lam, "PenSpline")
    # GCV: coarse log-spaced grid, then golden-section refinement.
    scores = np.array([solver.gcv(l) for l in LAMBDA_GRID])
    idx = int(np.argmin(scores))
    at_boundary = idx in (0, len(LAMBDA_GRID) - 1)
    lo = LAMBDA_GRID[max(idx - 1, 0)]
    hi = LAMBDA_GRID[min(idx + 1, len(LAMBDA_GRID) - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(
            lambda u: solver.gcv(np.exp(u)),
            bounds=(np.log(lo), np.log(hi)),
            method="bounded",
            options={"xatol": 1e-4},
        )
        lam = float(np.exp(res.x)) if res.fun <= scores[idx] else float(LAMBDA_GRID[idx])
    else:
        lam = float(LAMBDA_GRID[idx])
    return solver.fit(lam, "PenSpline", converged=not at_boundary)


def _invert_edf(solver: _PenalizedSolver, target: float) -> float:
    """Invert the monotone lam -> edf map by bisection on log lam."""
    lo, hi = 1e-12, 1e12
    edf_max, edf_min = solver.edf(lo), solver.edf(hi)
    if not (edf_min - 1e-6 <= target <= edf_max + 1e-6):
        raise DesignError(
            f"target_edf={target} outside attainable range [{edf_min:.2f}, {edf_max:.2f}]"
        )
    target = min(max(target, edf_min), edf_max)
    try:
        log_lam = optimize.brentq(
            lambda u: solver.edf(np.exp(u)) - target, np.log(lo), np.log(hi), xtol=1e-10
        )
    except ValueError as exc:
        raise NumericalError("fixed-e.d.f. inversion failed to bracket") from exc
    return float(np.exp(log_lam))


def regression_spline_basis_dim(target_edf: float) -> int:
    """Nominal k whose unpenalized fit has exactly target_edf trace e.d.f.

    The full design [1, X, x, y, radial] has k - 2 columns, so k = edf + 2.
    """
    k = int(round(target_edf)) + 2
    if k < 7:
        raise DesignError("target_edf too small for the thin plate construction")
    return k
