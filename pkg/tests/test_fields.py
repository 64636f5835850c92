"""Designs, field draws, calibration, and the joint exposure/confounder law."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialscale.covariance import MaternSpec, correlation_matrix_from_distances
from spatialscale.errors import DesignError
from spatialscale.fields import (
    FieldSpec,
    ScenarioParams,
    calibration_factor,
    calibration_factor_exact,
    rng_stream,
    sample_confounded_pair,
    sample_design,
    sample_gp,
    sample_grid,
    sample_outcome,
    sample_poisson_cluster,
    sample_uniform,
    scenario_calibration,
)


def test_rng_stream_deterministic_and_distinct():
    a = rng_stream(42, 1, 2).standard_normal(5)
    b = rng_stream(42, 1, 2).standard_normal(5)
    c = rng_stream(42, 1, 3).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_uniform_design_in_unit_square():
    locs = sample_uniform(200, seed=1)
    assert locs.coords.shape == (200, 2)
    assert locs.coords.min() >= 0.0 and locs.coords.max() <= 1.0


def test_grid_design_lattice():
    locs = sample_grid(100)
    assert locs.n == 100
    xs = np.unique(locs.coords[:, 0])
    np.testing.assert_allclose(xs, np.linspace(0, 1, 10))
    with pytest.raises(DesignError):
        sample_grid(50)  # not a perfect square


def test_cluster_design_clipped_and_sized():
    locs = sample_poisson_cluster(150, seed=3)
    assert locs.n == 150
    assert locs.coords.min() >= 0.0 and locs.coords.max() <= 1.0
    # Thomas process should be visibly clustered: mean nearest-neighbour
    # distance well below the uniform expectation ~ 0.5/sqrt(n).
    d = locs.distances + np.eye(150) * 10
    assert d.min(axis=1).mean() < 0.5 / np.sqrt(150)


def test_sample_design_dispatch():
    assert sample_design("uniform", 10, 0).n == 10
    assert sample_design("grid", 9, 0).n == 9
    assert sample_design("cluster", 12, 0).n == 12
    with pytest.raises(DesignError):
        sample_design("hexagonal", 10, 0)


def test_location_csv_roundtrip():
    locs = sample_uniform(4, seed=9)
    text = locs.to_csv()
    rows = text.strip().splitlines()
    assert rows[0] == "x,y"
    parsed = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    np.testing.assert_allclose(parsed, locs.coords)


def test_calibration_factor_exact_identity():
    # d^2 (1 - 1'R1/n^2) = 1 by construction.
    locs = sample_grid(49)
    corr = correlation_matrix_from_distances(locs.distances, MaternSpec(0.9, 2.0))
    d = calibration_factor_exact(corr)
    n = locs.n
    assert d**2 * (1.0 - corr.sum() / n**2) == pytest.approx(1.0, rel=1e-12)
    assert d > 1.0


def test_calibration_factor_grows_with_range():
    ds = [
        calibration_factor(MaternSpec(theta, 2.0), 49, design="grid")
        for theta in (0.05, 0.2, 0.5, 0.9)
    ]
    assert ds == sorted(ds)
    assert ds[0] == pytest.approx(1.0, abs=0.02)


def test_calibrated_field_hits_target_sample_variance():
    # Simulation oracle for the calibration identity: the mean sample
    # variance of calibrated draws should match the target variance.
    locs = sample_grid(49)
    spec = FieldSpec(0.0, 2.0, MaternSpec(0.9, 2.0), calibrated=True)
    n_reps = 3000
    s2 = np.empty(n_reps)
    for rep in range(n_reps):
        f = sample_gp(locs, spec, seed=rep)
        s2[rep] = f.var()  # divide-by-n convention
    se = s2.std(ddof=1) / np.sqrt(n_reps)
    assert abs(s2.mean() - 2.0) < 3 * se


def test_zero_variance_field_is_constant_mean():
    locs = sample_uniform(20, seed=0)
    f = sample_gp(locs, FieldSpec(1.5, 0.0, MaternSpec(0.3)), seed=7)
    np.testing.assert_array_equal(f, np.full(20, 1.5))


def test_scenario_params_validation():
    with pytest.raises(ValueError):
        ScenarioParams(sigma_c2=-1.0)
    with pytest.raises(ValueError):
        ScenarioParams(rho=1.5)
    with pytest.raises(ValueError):
        ScenarioParams(theta_c=0.0)


def test_variance_fraction_properties():
    p = ScenarioParams(sigma_c2=1.0, sigma_u2=3.0, sigma_z2=1.0, beta_z=2.0, tau2=4.0)
    assert p.p_c == pytest.approx(0.25)
    assert p.p_z == pytest.approx(0.5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_confounded_pair_decomposition(seed):
    locs = sample_grid(25)
    params = ScenarioParams(theta_c=0.5, theta_u=0.1)
    x, z, x_c, x_u = sample_confounded_pair(locs, params, seed)
    np.testing.assert_allclose(x, params.mu_x + x_c + x_u, atol=1e-12)
    assert np.isfinite(z).all()


def test_confounded_pair_joint_moments():
    """Monte Carlo check of the implied covariances of (X, Z)."""
    locs = sample_grid(16)
    params = ScenarioParams(
        sigma_c2=1.0, sigma_u2=0.5, sigma_z2=2.0, rho=0.6,
        theta_c=0.7, theta_u=0.1, mu_z=1.0,
    )
    d_c, d_u = scenario_calibration(params, locs)
    n_reps = 4000
    xs = np.empty((n_reps, 16))
    zs = np.empty((n_reps, 16))
    for rep in range(n_reps):
        x, z, _, _ = sample_confounded_pair(locs, params, rep)
        xs[rep], zs[rep] = x, z
    # Marginal variances carry the calibration inflation.
    var_x = d_c**2 * params.sigma_c2 + d_u**2 * params.sigma_u2
    assert xs.var(axis=0).mean() == pytest.approx(var_x, rel=0.1)
    assert zs.var(axis=0).mean() == pytest.approx(d_c**2 * params.sigma_z2, rel=0.1)
    assert zs.mean() == pytest.approx(1.0, abs=0.05)
    # Pointwise correlation of X and Z: rho * sd_c-share of X.
    cov_xz = np.mean([np.cov(xs[:, i], zs[:, i])[0, 1] for i in range(16)])
    want = params.rho * np.sqrt(params.sigma_c2 * params.sigma_z2) * d_c**2
    assert cov_xz == pytest.approx(want, rel=0.1)


def test_outcome_regression_structure():
    locs = sample_uniform(50, seed=1)
    params = ScenarioParams(beta0=2.0, beta_x=0.5, beta_z=1.5, tau2=0.0)
    x, z, _, _ = sample_confounded_pair(locs, params, 11)
    y = sample_outcome(x, z, params, 12)
    np.testing.assert_allclose(y, 2.0 + 0.5 * x + 1.5 * z, atol=1e-12)


def test_multiscale_outcome_needs_locations():
    params = ScenarioParams(sigma_h2=1.0)
    x = np.zeros(10)
    with pytest.raises(DesignError):
        sample_outcome(x, x, params, 0, locs=None, multiscale=True)


def test_outcome_stream_invariant_to_multiscale_flag_noise():
    # The white-noise component must be identical whether or not the extra
    # field is added, so scenarios stay coupled across variants.
    locs = sample_uniform(30, seed=4)
    params_a = ScenarioParams(sigma_h2=0.0)
    params_b = ScenarioParams(sigma_h2=1.0, theta_h=0.3)
    x = np.zeros(30)
    y_a = sample_outcome(x, x, params_a, 99, locs=locs, multiscale=True)
    y_b = sample_outcome(x, x, params_b, 99, locs=locs, multiscale=True)
    # Same seed: the difference is exactly the extra field, not reshuffled noise.
    assert not np.allclose(y_a, y_b)
    y_a2 = sample_outcome(x, x, params_a, 99, locs=locs, multiscale=False)
    np.testing.assert_allclose(y_a, y_a2)
