"""
Tests for REML fitting, checked against dense-matrix computations.
"""

import numpy as np
import pytest
from scipy.linalg import block_diag

from app.covariance import cov2_derivatives, marginal_cov_domain
from app.models import FitOptions, ParameterRow, SampleData, VarianceComponents
from app.reml import (
    FitError,
    blup_random_effects,
    fit_reml,
    gls_beta,
    moment_init,
    parameter_table,
    reml_loglik,
    reml_score_information,
    standardized_residuals,
)

from tests.conftest import TRUE_PARAMS, TRUE_THETA, simulate_sample


THETA = VarianceComponents(
    sigma2_u1=0.07, sigma2_u2=0.05, rho_u=-0.2,
    sigma2_e1=0.12, sigma2_e2=0.09, rho_e=0.5,
)


def _dense(theta: VarianceComponents, sample: SampleData):
    """Stacked design, response and block-diagonal covariance of the sample."""
    used = [d for d in range(sample.D) if sample.n_d[d] > 0]
    X = np.vstack([sample.domain_design(d) for d in used])
    y = np.concatenate([sample.domain_response(d) for d in used])
    V = block_diag(*[marginal_cov_domain(theta, int(sample.n_d[d])) for d in used])
    return X, y, V


def _dense_reml(theta: VarianceComponents, sample: SampleData):
    X, y, V = _dense(theta, sample)
    V_inv = np.linalg.inv(V)
    xvx = X.T @ V_inv @ X
    C = np.linalg.inv(xvx)
    beta = C @ X.T @ V_inv @ y
    r = y - X @ beta
    loglik = -0.5 * (
        np.linalg.slogdet(V)[1] + np.linalg.slogdet(xvx)[1] + r @ V_inv @ r
    ) - 0.5 * (X.shape[0] - X.shape[1]) * np.log(2 * np.pi)
    return loglik, beta, C


def _dense_information(theta: VarianceComponents, sample: SampleData) -> np.ndarray:
    X, _, V = _dense(theta, sample)
    V_inv = np.linalg.inv(V)
    P = V_inv - V_inv @ X @ np.linalg.inv(X.T @ V_inv @ X) @ X.T @ V_inv
    used = [int(n) for n in sample.n_d if n > 0]
    values = theta.as_array()
    dV = []
    for dU in cov2_derivatives(*values[:3]):
        dV.append(block_diag(*[np.kron(np.ones((n, n)), dU) for n in used]))
    for dE in cov2_derivatives(*values[3:]):
        dV.append(block_diag(*[np.kron(np.eye(n), dE) for n in used]))
    return np.array([[0.5 * np.trace(P @ a @ P @ b) for b in dV] for a in dV])


def test_loglik_and_gls_match_dense(small_world):
    sample, _ = small_world
    loglik, beta, C = _dense_reml(THETA, sample)
    assert reml_loglik(THETA, sample) == pytest.approx(loglik, rel=1e-10)
    coef, cov = gls_beta(THETA, sample)
    np.testing.assert_allclose(coef.as_array(), beta, rtol=1e-9)
    np.testing.assert_allclose(cov, C, rtol=1e-8)


def test_score_matches_finite_differences(small_world):
    sample, _ = small_world
    _, score, _ = reml_score_information(THETA, sample)
    point = THETA.as_array()
    for k in range(6):
        h = 1e-6 * max(1.0, abs(point[k]))
        up, down = point.copy(), point.copy()
        up[k] += h
        down[k] -= h
        numeric = (
            reml_loglik(VarianceComponents.from_array(up), sample)
            - reml_loglik(VarianceComponents.from_array(down), sample)
        ) / (2 * h)
        assert score[k] == pytest.approx(numeric, rel=1e-5, abs=1e-4)


def test_information_matches_dense(small_world):
    sample, _ = small_world
    _, _, info = reml_score_information(THETA, sample)
    dense = _dense_information(THETA, sample)
    np.testing.assert_allclose(info, dense, rtol=1e-8, atol=1e-10 * np.abs(dense).max())
    np.testing.assert_allclose(info, info.T)


def test_blup_matches_dense(small_world):
    sample, _ = small_world
    blups = blup_random_effects(TRUE_PARAMS, sample)
    beta = TRUE_PARAMS.beta.as_array()
    for d in range(sample.D):
        n = int(sample.n_d[d])
        if n == 0:
            np.testing.assert_array_equal(blups[d], 0.0)
            continue
        V = marginal_cov_domain(TRUE_THETA, n)
        Z = np.kron(np.ones((n, 1)), np.eye(2))
        r = sample.domain_response(d) - sample.domain_design(d) @ beta
        expected = TRUE_THETA.v_u @ Z.T @ np.linalg.solve(V, r)
        np.testing.assert_allclose(blups[d], expected, rtol=1e-10, atol=1e-14)


def test_fit_recovers_parameters(large_fit):
    assert large_fit.converged
    assert large_fit.boundary == ()
    assert large_fit.n_domains_used == 60
    np.testing.assert_allclose(large_fit.params.beta.as_array(), TRUE_PARAMS.beta.as_array(), atol=0.15)
    theta = large_fit.params.theta
    assert theta.sigma2_e1 == pytest.approx(TRUE_THETA.sigma2_e1, rel=0.25)
    assert theta.sigma2_e2 == pytest.approx(TRUE_THETA.sigma2_e2, rel=0.25)
    assert theta.rho_e == pytest.approx(TRUE_THETA.rho_e, abs=0.15)
    assert np.linalg.norm(large_fit.score) <= 1e-6 * (1 + abs(large_fit.reml_loglik))


def test_fit_is_a_local_maximum(large_world, large_fit):
    sample, _ = large_world
    best = large_fit.reml_loglik
    point = large_fit.params.theta.as_array()
    for k in range(6):
        moved = point.copy()
        moved[k] *= 1.05
        assert reml_loglik(VarianceComponents.from_array(moved), sample) <= best


def test_fit_from_given_start(large_world, large_fit):
    sample, _ = large_world
    refit = fit_reml(sample, FitOptions(init=TRUE_THETA))
    assert refit.converged
    np.testing.assert_allclose(
        refit.params.theta.as_array(), large_fit.params.theta.as_array(), rtol=1e-4, atol=1e-6
    )


def test_moment_init_is_feasible(small_world):
    sample, _ = small_world
    theta = moment_init(sample)
    assert abs(theta.rho_u) <= 0.9 and abs(theta.rho_e) <= 0.9
    assert theta.sigma2_u1 > 0 and theta.sigma2_e2 > 0


def test_too_few_observations():
    sample = SampleData(domain_ids=["a"], domain_index=[0], x1=[[1.0, 2.0]], x2=[[1.0]], y=[[0.5, 0.7]])
    with pytest.raises(FitError):
        fit_reml(sample)


def test_rank_deficient_design():
    sample, _ = simulate_sample(TRUE_PARAMS, [5] * 6, seed=4)
    doubled = SampleData(
        domain_ids=sample.domain_ids,
        domain_index=sample.domain_index,
        x1=np.column_stack([sample.x1, 2.0 * sample.x1[:, 1]]),
        x2=sample.x2,
        y=sample.y,
    )
    with pytest.raises(FitError, match="rank deficient"):
        fit_reml(doubled)


def test_identical_responses_are_not_converged():
    sample, _ = simulate_sample(TRUE_PARAMS, [6] * 10, seed=5)
    twin = SampleData(
        domain_ids=sample.domain_ids,
        domain_index=sample.domain_index,
        x1=sample.x1,
        x2=sample.x1,
        y=np.column_stack([sample.y[:, 0], sample.y[:, 0]]),
    )
    fitted = fit_reml(twin, FitOptions(max_iterations=50))
    assert not fitted.converged


def test_parameter_table(large_fit):
    rows = parameter_table(large_fit)
    assert all(isinstance(r, ParameterRow) for r in rows)
    names = [r.parameter for r in rows]
    assert names[:4] == ["beta1_1", "beta1_2", "beta2_1", "beta2_2"]
    assert names[4:] == ["sigma2_u1", "sigma2_u2", "rho_u", "sigma2_e1", "sigma2_e2", "rho_e"]
    intercept = rows[0]
    assert intercept.std_error > 0
    assert intercept.z_value == pytest.approx(intercept.estimate / intercept.std_error)
    assert intercept.p_value < 1e-6
    assert intercept.lower_95 < intercept.estimate < intercept.upper_95
    assert rows[4].z_value is None


def test_standardized_residuals(small_world, small_fit):
    sample, _ = small_world
    units, effects = standardized_residuals(small_fit, sample)
    assert list(units.columns) == ["domain_id", "e1", "e2", "std_e1", "std_e2"]
    assert len(units) == sample.n
    assert len(effects) == 12
    assert units["std_e1"].mean() == pytest.approx(0.0, abs=1e-12)
    assert units["std_e2"].std() == pytest.approx(1.0)


@pytest.fixture(scope="module")
def ten_domains():
    sample, _ = simulate_sample(TRUE_PARAMS, [5] * 10, seed=17)
    return sample


@pytest.mark.parametrize("seed", range(50))
def test_score_matches_finite_differences_at_random_points(ten_domains, seed):
    rng = np.random.default_rng(seed)
    theta = VarianceComponents(
        sigma2_u1=rng.uniform(0.02, 0.5), sigma2_u2=rng.uniform(0.02, 0.5), rho_u=rng.uniform(-0.8, 0.8),
        sigma2_e1=rng.uniform(0.02, 0.5), sigma2_e2=rng.uniform(0.02, 0.5), rho_e=rng.uniform(-0.8, 0.8),
    )
    _, score, _ = reml_score_information(theta, ten_domains)
    point = theta.as_array()
    for k in range(6):
        h = 1e-6 * max(1.0, abs(point[k]))
        up, down = point.copy(), point.copy()
        up[k] += h
        down[k] -= h
        numeric = (
            reml_loglik(VarianceComponents.from_array(up), ten_domains)
            - reml_loglik(VarianceComponents.from_array(down), ten_domains)
        ) / (2 * h)
        assert score[k] == pytest.approx(numeric, rel=1e-5, abs=1e-4)


def test_information_is_psd_at_optimum(large_fit):
    info = large_fit.theta_fisher_info
    np.testing.assert_allclose(info, info.T)
    eigenvalues = np.linalg.eigvalsh(info)
    assert eigenvalues.min() >= -1e-8 * np.abs(eigenvalues).max()


def test_fit_ignores_unit_order_and_domain_labels(small_world, small_fit):
    sample, _ = small_world
    rng = np.random.default_rng(5)
    order = rng.permutation(sample.n)
    relabel = rng.permutation(sample.D)
    shuffled = SampleData(
        domain_ids=[f"area-{relabel[d]}" for d in range(sample.D)][::-1],
        domain_index=(sample.D - 1 - sample.domain_index)[order],
        x1=sample.x1[order],
        x2=sample.x2[order],
        y=sample.y[order],
    )
    np.testing.assert_array_equal(np.sort(shuffled.n_d), np.sort(sample.n_d))
    assert reml_loglik(THETA, shuffled) == pytest.approx(reml_loglik(THETA, sample), rel=1e-10)
    refit = fit_reml(shuffled)
    assert refit.converged == small_fit.converged
    np.testing.assert_allclose(
        refit.params.theta.as_array(), small_fit.params.theta.as_array(), rtol=1e-6, atol=1e-9
    )
    np.testing.assert_allclose(
        refit.params.beta.as_array(), small_fit.params.beta.as_array(), rtol=1e-6, atol=1e-9
    )
