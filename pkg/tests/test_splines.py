"""Thin plate spline basis and penalized partial-linear fit behaviour."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialscale.errors import DesignError
from spatialscale.fields import rng_stream, sample_uniform
from spatialscale.splines import (
    SmoothControl,
    _PenalizedSolver,
    build_tps_basis,
    farthest_point_knots,
    partial_spline_fit,
    regression_spline_basis_dim,
    tps_eta,
)


@pytest.fixture(scope="module")
def setup100():
    locs = sample_uniform(100, seed=17)
    rng = rng_stream(18)
    x = rng.standard_normal(100)
    # smooth spatial surface + linear effect + noise
    s = locs.coords
    y = 0.5 * x + np.sin(3 * s[:, 0]) + s[:, 1] ** 2 + 0.3 * rng.standard_normal(100)
    return locs, x, y


def test_tps_eta_zero_limit_and_values():
    assert tps_eta(0.0) == 0.0
    assert tps_eta(1.0) == 0.0
    assert tps_eta(np.e) == pytest.approx(np.e**2)
    # continuous near zero
    assert abs(tps_eta(1e-9)) < 1e-15


def test_farthest_point_knots_spread():
    rng = rng_stream(7)
    coords = rng.random((200, 2))
    knots = farthest_point_knots(coords, 20)
    assert knots.shape == (20, 2)
    assert len(np.unique(knots, axis=0)) == 20
    # max-min design: smallest inter-knot distance should beat random picks
    def min_dist(pts):
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        return (d + np.eye(len(pts)) * 9).min()
    random_pick = coords[rng.choice(200, 20, replace=False)]
    assert min_dist(knots) > min_dist(random_pick)


def test_farthest_point_knots_cap():
    with pytest.raises(DesignError):
        farthest_point_knots(np.zeros((5, 2)), 6)


def test_penalty_is_psd_and_zero_on_linear_block():
    locs = sample_uniform(80, seed=3)
    basis = build_tps_basis(locs, 40)
    pen = basis.penalty_matrix
    np.testing.assert_allclose(pen, pen.T)
    assert np.linalg.eigvalsh(pen).min() > -1e-9
    np.testing.assert_allclose(pen[:2, :], 0.0)


def test_basis_columns_centered():
    locs = sample_uniform(60, seed=4)
    basis = build_tps_basis(locs, 30)
    np.testing.assert_allclose(basis.basis_matrix.mean(axis=0), 0.0, atol=1e-12)


def test_basis_dimension_bookkeeping():
    locs = sample_uniform(70, seed=5)
    basis = build_tps_basis(locs, 25)
    # 2 linear columns + (k - 3 knots - 3 constraints) radial columns
    assert basis.basis_matrix.shape == (70, 25 - 4)
    with pytest.raises(DesignError):
        build_tps_basis(locs, 6)
    with pytest.raises(DesignError):
        build_tps_basis(locs, 71)


def test_unpenalized_edf_counts_all_columns(setup100):
    locs, x, y = setup100
    fit = partial_spline_fit(x, y, build_tps_basis(locs, 40), SmoothControl("Unpenalized"))
    assert fit.edf == pytest.approx(40 - 2, abs=1e-8)


def test_lambda_zero_equals_unpenalized(setup100):
    locs, x, y = setup100
    basis = build_tps_basis(locs, 40)
    a = partial_spline_fit(x, y, basis, SmoothControl("Unpenalized"))
    b = partial_spline_fit(x, y, basis, SmoothControl("FixedLambda", lam=0.0))
    assert b.betax_hat == pytest.approx(a.betax_hat, abs=1e-8)


def test_infinite_smoothing_leaves_linear_model(setup100):
    # lam -> inf kills the penalized radial block; the unpenalized part is
    # intercept + X + the two linear coordinates: 4 e.d.f.
    locs, x, y = setup100
    basis = build_tps_basis(locs, 40)
    fit = partial_spline_fit(x, y, basis, SmoothControl("FixedLambda", lam=1e14))
    assert fit.edf == pytest.approx(4.0, abs=1e-3)


def test_fixed_edf_hits_target(setup100):
    locs, x, y = setup100
    basis = build_tps_basis(locs, 60)
    for target in (5.0, 12.5, 30.0):
        fit = partial_spline_fit(x, y, basis, SmoothControl("FixedEDF", target_edf=target))
        assert fit.edf == pytest.approx(target, abs=1e-6)


def test_fixed_edf_out_of_range(setup100):
    locs, x, y = setup100
    basis = build_tps_basis(locs, 20)
    with pytest.raises(DesignError):
        partial_spline_fit(x, y, basis, SmoothControl("FixedEDF", target_edf=50.0))


def test_edf_monotone_in_lambda(setup100):
    locs, x, y = setup100
    solver = _PenalizedSolver(x, y, build_tps_basis(locs, 50))
    lams = np.geomspace(1e-10, 1e10, 25)
    edfs = [solver.edf(l) for l in lams]
    assert all(a >= b - 1e-10 for a, b in zip(edfs, edfs[1:]))


def test_gcv_picks_interior_competitive_lambda(setup100):
    locs, x, y = setup100
    basis = build_tps_basis(locs, 50)
    fit = partial_spline_fit(x, y, basis, SmoothControl("GCV"))
    assert 4.0 < fit.edf < 48.0
    assert abs(fit.betax_hat - 0.5) < 5 * fit.se_betax


def test_interpolates_in_span_surface():
    # A noiseless response built from the basis itself must be recovered
    # exactly by the unpenalized fit.
    locs = sample_uniform(50, seed=9)
    basis = build_tps_basis(locs, 20)
    rng = rng_stream(10)
    coef = rng.standard_normal(basis.basis_matrix.shape[1])
    x = rng.standard_normal(50)
    y = 2.0 + 0.7 * x + basis.basis_matrix @ coef
    fit = partial_spline_fit(x, y, basis, SmoothControl("Unpenalized"))
    assert fit.betax_hat == pytest.approx(0.7, abs=1e-8)
    assert fit.beta0_hat == pytest.approx(2.0, abs=1e-8)


def test_smooth_control_validation():
    with pytest.raises(ValueError):
        SmoothControl("banana")
    with pytest.raises(ValueError):
        SmoothControl("FixedEDF")
    with pytest.raises(ValueError):
        SmoothControl("FixedLambda", lam=-1.0)


@settings(max_examples=10, deadline=None)
@given(edf=st.floats(min_value=5.0, max_value=40.0))
def test_regression_basis_dim_inverts_edf(edf):
    k = regression_spline_basis_dim(edf)
    assert k - 2 == round(edf)


def test_regression_basis_dim_floor():
    with pytest.raises(DesignError):
        regression_spline_basis_dim(3.0)
