"""The bias-modulation term k(X): exactness, oracles, invariances."""

import numpy as np
import pytest

from spatialscale.bias import (
    BiasInputs,
    bias_multiplier,
    expected_k_grid,
    k_of_x,
    mean_k,
    ols_k_of_x,
    same_scale_bias,
    sample_x_draw,
    scenario_for_ratios,
)
from spatialscale.fields import (
    ScenarioParams,
    rng_stream,
    sample_grid,
    sample_uniform,
)


@pytest.fixture(scope="module")
def grid49():
    return sample_grid(49)


def test_same_scale_bias_value():
    params = ScenarioParams(sigma_c2=4.0, sigma_u2=0.0, sigma_z2=1.0, rho=0.3, beta_z=2.0)
    assert same_scale_bias(params) == pytest.approx(0.3 * 0.5 * 2.0)
    with pytest.raises(ValueError):
        same_scale_bias(ScenarioParams(sigma_u2=1.0))


def test_bias_multiplier_matches_same_scale_limit():
    params = ScenarioParams(sigma_c2=2.0, sigma_u2=0.0, sigma_z2=0.5, rho=-0.4, beta_z=3.0)
    assert bias_multiplier(params) == pytest.approx(same_scale_bias(params))


def test_k_constant_when_scales_equal(grid49):
    # theta_c = theta_u makes the scale filter the identity, so k(X) = p_c
    # for every draw, not just on average.
    params = scenario_for_ratios(0.5, 0.5, p_c=0.3, p_z=0.5)
    inputs = BiasInputs(grid49, params)
    rng = rng_stream(0)
    for _ in range(5):
        x = sample_x_draw(inputs, rng)
        assert k_of_x(x, inputs) == pytest.approx(0.3, abs=1e-8)


def test_k_brute_force_small_n():
    """Dense-algebra recomputation of k(X) from its defining pieces at n=5."""
    locs = sample_uniform(5, seed=13)
    params = scenario_for_ratios(0.7, 0.1, p_c=0.4, p_z=0.6)
    inputs = BiasInputs(locs, params)
    rng = rng_stream(14)
    x = sample_x_draw(inputs, rng)
    dm = np.column_stack([np.ones(5), x])
    m_mat = inputs.r_c @ np.linalg.inv(
        inputs.p_c_marginal * inputs.r_c + (1 - inputs.p_c_marginal) * inputs.r_u
    )
    si = np.linalg.inv(inputs.sigma_star)
    coef = np.linalg.inv(dm.T @ si @ dm) @ dm.T @ si @ m_mat @ (x - params.mu_x)
    assert k_of_x(x, inputs) == pytest.approx(coef[1] * inputs.p_c_marginal, abs=1e-8)


def test_k_invariant_to_location_shift(grid49):
    # Shifting X and mu_x together leaves the slope functional unchanged.
    params_a = scenario_for_ratios(0.9, 0.1, p_c=0.5, p_z=0.5)
    inputs_a = BiasInputs(grid49, params_a)
    rng = rng_stream(15)
    x = sample_x_draw(inputs_a, rng)
    shift = 2.7
    params_b = ScenarioParams(**{**params_a.__dict__, "mu_x": params_a.mu_x + shift})
    inputs_b = BiasInputs(grid49, params_b, calibration=inputs_a.calibration)
    assert k_of_x(x + shift, inputs_b) == pytest.approx(k_of_x(x, inputs_a), abs=1e-10)


def test_mean_k_diagonal_identity(grid49):
    for p_c in (0.2, 0.8):
        params = scenario_for_ratios(0.9, 0.9, p_c=p_c, p_z=0.5)
        inputs = BiasInputs(grid49, params)
        mean, se = mean_k(inputs, n_sims=50, seed=5)
        assert mean == pytest.approx(p_c, abs=max(3 * se, 1e-8))


def test_mean_k_below_pc_when_confounder_coarser(grid49):
    # Coarse confounded scale, fine unconfounded scale: spatial adjustment
    # absorbs part of the confounding, k < p_c.
    params = scenario_for_ratios(0.9, 0.1, p_c=0.5, p_z=0.5)
    inputs = BiasInputs(grid49, params)
    mean, se = mean_k(inputs, n_sims=200, seed=6)
    assert mean < 0.5 - 3 * se


def test_mean_k_above_pc_when_confounder_finer(grid49):
    params = scenario_for_ratios(0.1, 0.9, p_c=0.5, p_z=0.5)
    inputs = BiasInputs(grid49, params)
    mean, se = mean_k(inputs, n_sims=200, seed=7)
    assert mean > 0.5 + 3 * se


def test_ols_k_no_whitening_differs(grid49):
    params = scenario_for_ratios(0.9, 0.1, p_c=0.5, p_z=0.5)
    inputs = BiasInputs(grid49, params)
    rng = rng_stream(16)
    x = sample_x_draw(inputs, rng)
    assert ols_k_of_x(x, inputs) != pytest.approx(k_of_x(x, inputs), abs=1e-6)


def test_conditional_simulation_oracle(grid49):
    """k(X) predicts the actual conditional GLS bias.

    Draw X once, then repeatedly draw Z | X and the outcome noise, fit GLS
    with the true residual covariance, and compare the mean slope error
    against k(X) times the bias multiplier.
    """
    from spatialscale.covariance import jittered_cholesky
    from spatialscale.estimators import gls_fit

    params = scenario_for_ratios(0.9, 0.1, p_c=0.5, p_z=0.5)
    params = ScenarioParams(**{**params.__dict__, "rho": 0.3})
    inputs = BiasInputs(grid49, params)
    rng = rng_stream(77)
    x = sample_x_draw(inputs, rng)
    predicted = params.beta_x + k_of_x(x, inputs) * bias_multiplier(params)

    # Z | X_c: mean rho (sigma_z/sigma_c) X_c, covariance (1-rho^2) var_z R_c.
    # Conditioning on X alone mixes in X_u, handled by regression on the
    # joint Gaussian: E[Z|X] = rho sqrt(var_z var_c)/var_x-weighted solve.
    n = grid49.n
    cov_x = inputs.var_c * inputs.r_c + inputs.var_u * inputs.r_u
    cov_zx = params.rho * np.sqrt(params.sigma_z2 / params.sigma_c2) * inputs.var_c * inputs.r_c
    kalman = cov_zx @ np.linalg.inv(cov_x)
    mean_z = kalman @ x
    cov_z_given_x = inputs.var_z * inputs.r_c - kalman @ cov_zx.T
    lz, _ = jittered_cholesky(0.5 * (cov_z_given_x + cov_z_given_x.T))
    sigma = params.beta_z**2 * inputs.var_z * inputs.r_c + params.tau2 * np.eye(n)

    n_reps = 600
    slopes = np.empty(n_reps)
    for rep in range(n_reps):
        r = rng_stream(78, rep)
        z = mean_z + lz @ r.standard_normal(n)
        y = params.beta_x * x + params.beta_z * z + np.sqrt(params.tau2) * r.standard_normal(n)
        slopes[rep] = gls_fit(x, y, sigma).betax_hat
    se = slopes.std(ddof=1) / np.sqrt(n_reps)
    assert slopes.mean() == pytest.approx(predicted, abs=4 * se)


def test_expected_k_grid_rows_and_determinism():
    rows_a = expected_k_grid((0.1, 0.9), (0.1, 0.9), 0.5, 0.5, n=49, n_sims=5, seed=3)
    rows_b = expected_k_grid((0.1, 0.9), (0.1, 0.9), 0.5, 0.5, n=49, n_sims=5, seed=3)
    assert rows_a == rows_b
    assert len(rows_a) == 4
    assert {r["theta_c"] for r in rows_a} == {0.1, 0.9}


def test_multiscale_residual_shrinks_k(grid49):
    # Extra fine-scale residual structure in the known covariance gives the
    # GLS fit more to separate on; k should move, and the machinery accept it.
    base = expected_k_grid((0.9,), (0.1,), 0.5, 0.5, n=49, n_sims=30, seed=4)
    multi = expected_k_grid(
        (0.9,), (0.1,), 0.5, 0.5, n=49, n_sims=30, seed=4, multiscale_sigma_h2=1.0
    )
    assert base[0]["mean_k"] != pytest.approx(multi[0]["mean_k"], abs=1e-6)
