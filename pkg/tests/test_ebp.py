"""
Tests for the conditional law and the Monte Carlo EBPs.
"""

import numpy as np
import pytest

from app.covariance import marginal_cov_domain
from app.ebp import (
    PredictionError,
    conditional_moments,
    direct_estimates,
    direct_mse,
    draw_nonsample,
    ebp_additive,
    ebp_nonadditive,
    ebp_ratio,
    log_share_range,
    predict_domains,
)
from app.models import AuxCounts, McOptions, ModelParams, RegressionCoefficients, VarianceComponents
from app.rng import substream
from app.targets import MEAN1, MEAN2, MEAN_OF_RATIOS, RATIO_OF_MEANS, nonadditive_target
from app.transforms import IDENTITY, LOG

from tests.conftest import TRUE_PARAMS, TRUE_THETA, simulate_sample


def test_conditional_moments_match_dense(small_world):
    sample, aux = small_world
    law = conditional_moments(TRUE_PARAMS, sample, aux)
    beta = TRUE_PARAMS.beta.as_array()
    fixed = aux.pattern_design @ beta
    for d in (0, 5, 11):
        n = int(sample.n_d[d])
        V = marginal_cov_domain(TRUE_THETA, n)
        cross = np.kron(np.ones((1, n)), TRUE_THETA.v_u)          # Cov(y_new, y_s)
        r = sample.domain_response(d) - sample.domain_design(d) @ beta
        cov = TRUE_THETA.v_u + TRUE_THETA.v_e - cross @ np.linalg.solve(V, cross.T)
        np.testing.assert_allclose(law.cond_cov[d], cov, rtol=1e-10, atol=1e-14)
        for t in range(aux.T):
            mean = fixed[t] + cross @ np.linalg.solve(V, r)
            np.testing.assert_allclose(law.cond_mean[d, t], mean, rtol=1e-10)
        L = law.cond_factor[d]
        np.testing.assert_allclose(L @ L.T, law.cond_cov[d], rtol=1e-12)


def test_unsampled_domain_uses_marginal_law(small_world):
    sample, aux = small_world
    law = conditional_moments(TRUE_PARAMS, sample, aux)
    d = aux.D - 1
    np.testing.assert_allclose(law.cond_cov[d], TRUE_THETA.v_u + TRUE_THETA.v_e)
    np.testing.assert_allclose(law.cond_mean[d], aux.pattern_design @ TRUE_PARAMS.beta.as_array())


def test_draw_nonsample(small_world):
    sample, aux = small_world
    law = conditional_moments(TRUE_PARAMS, sample, aux)
    draws = draw_nonsample(law, 2, 1, 20000, substream(0, 9))
    assert draws.shape == (20000, 2)
    np.testing.assert_allclose(draws.mean(axis=0), law.cond_mean[2, 1], atol=0.02)
    np.testing.assert_allclose(np.cov(draws.T), law.cond_cov[2], atol=0.01)
    with pytest.raises(PredictionError):
        draw_nonsample(law, 2, 1, 0, substream(0, 9))


def test_antithetic_identity_mean_is_exact(small_world):
    """Paired draws cancel, leaving the exact conditional expectation."""
    sample, aux = small_world
    law = conditional_moments(TRUE_PARAMS, sample, aux)
    alignment = aux.match_sample(sample)
    mc = McOptions(L=10, seed=3, antithetic=True)
    estimates = ebp_additive(MEAN1, IDENTITY, TRUE_PARAMS, sample, aux, mc)
    aligned = alignment.sample
    for d in range(aux.D):
        sampled = aligned.y[aligned.domain_rows(d), 0].sum()
        rest = (alignment.remaining[d] * law.cond_mean[d, :, 0]).sum()
        assert estimates[d] == pytest.approx((sampled + rest) / aux.N_d[d], rel=1e-12)


def test_log_mean_close_to_closed_form(small_world):
    sample, aux = small_world
    law = conditional_moments(TRUE_PARAMS, sample, aux)
    alignment = aux.match_sample(sample)
    estimates = ebp_additive(MEAN2, LOG, TRUE_PARAMS, sample, aux, McOptions(L=4000, seed=1))
    aligned = alignment.sample
    for d in range(aux.D):
        sampled = np.exp(aligned.y[aligned.domain_rows(d), 1]).sum()
        lognormal = np.exp(law.cond_mean[d, :, 1] + 0.5 * law.cond_cov[d, 1, 1])
        exact = (sampled + (alignment.remaining[d] * lognormal).sum()) / aux.N_d[d]
        assert estimates[d] == pytest.approx(exact, rel=0.01)


def test_same_seed_same_result_across_threads_and_chunks(small_world, small_fit):
    sample, aux = small_world
    base = McOptions(L=64, seed=42)
    one = predict_domains(small_fit, sample, aux, LOG, base, threads=1)
    many = predict_domains(small_fit, sample, aux, LOG, base, threads=4)
    chunked = predict_domains(
        small_fit, sample, aux, LOG, base.model_copy(update={"chunk_elements": 50}), threads=3
    )
    for name in one.ebp:
        np.testing.assert_array_equal(one.ebp[name], many.ebp[name])
        np.testing.assert_array_equal(one.ebp[name], chunked.ebp[name])
    other = predict_domains(small_fit, sample, aux, LOG, McOptions(L=64, seed=43))
    assert not np.array_equal(one.ebp["mean1"], other.ebp["mean1"])


def test_saturated_domain_returns_direct_estimate():
    sample, aux = simulate_sample(TRUE_PARAMS, [6, 5, 7, 4, 6], seed=8)
    counts = np.array(aux.counts)
    counts[2] = aux.match_sample(sample).n_dt[2]
    saturated = AuxCounts(
        domain_ids=aux.domain_ids,
        pattern_ids=aux.pattern_ids,
        pattern_x1=aux.pattern_x1,
        pattern_x2=aux.pattern_x2,
        counts=counts,
    )
    direct = direct_estimates(sample, LOG)
    mc = McOptions(L=20, seed=5)
    for target in (MEAN1, MEAN_OF_RATIOS):
        assert ebp_additive(target, LOG, TRUE_PARAMS, sample, saturated, mc)[2] == direct[target.name][2]
    assert ebp_ratio(TRUE_PARAMS, LOG, sample, saturated, mc)[2] == direct["ratio_of_means"][2]


def test_ratio_ebp_is_a_share(small_world):
    sample, aux = small_world
    ratio = ebp_nonadditive(RATIO_OF_MEANS, TRUE_PARAMS, LOG, sample, aux, McOptions(L=30))
    share = ebp_additive(MEAN_OF_RATIOS, LOG, TRUE_PARAMS, sample, aux, McOptions(L=30))
    assert np.all((ratio > 0) & (ratio < 1))
    assert np.all((share > 0) & (share < 1))
    np.testing.assert_array_equal(ratio, ebp_ratio(TRUE_PARAMS, LOG, sample, aux, McOptions(L=30)))


def test_ebp_additive_rejects_nonadditive(small_world):
    sample, aux = small_world
    with pytest.raises(PredictionError):
        ebp_additive(RATIO_OF_MEANS, LOG, TRUE_PARAMS, sample, aux)


def test_domain_without_population_units():
    sample, aux = simulate_sample(TRUE_PARAMS, [5, 5, 5], seed=2, unsampled=1)
    counts = np.array(aux.counts)
    counts[3] = 0
    empty = AuxCounts(
        domain_ids=aux.domain_ids,
        pattern_ids=aux.pattern_ids,
        pattern_x1=aux.pattern_x1,
        pattern_x2=aux.pattern_x2,
        counts=counts,
    )
    with pytest.raises(PredictionError, match="no population units"):
        ebp_additive(MEAN1, LOG, TRUE_PARAMS, sample, empty, McOptions(L=5))


def test_direct_estimates_and_variance():
    sample, _ = simulate_sample(TRUE_PARAMS, [4, 1], seed=6, unsampled=1)
    z = np.exp(sample.y)
    direct = direct_estimates(sample, LOG, allow_empty=True)
    assert direct["mean1"][0] == pytest.approx(z[:4, 0].mean())
    assert direct["ratio_of_means"][0] == pytest.approx(z[:4, 0].sum() / z[:4].sum())
    assert np.isnan(direct["mean2"][2])
    with pytest.raises(PredictionError):
        direct_estimates(sample, LOG)

    N_d = np.array([40, 10, 10])
    variance = direct_mse(sample, LOG, N_d)
    expected = z[:4, 1].var(ddof=1) / 4 * (1 - 4 / 40)
    assert variance["mean2"][0] == pytest.approx(expected)
    assert np.isnan(variance["mean1"][1])


def test_predict_domains_frame(small_world, small_fit):
    sample, aux = small_world
    estimates = predict_domains(small_fit, sample, aux, LOG, McOptions(L=20))
    frame = estimates.to_frame()
    assert list(frame.columns[:11]) == [
        "domain_id", "n_d", "N_d", "dir1", "ebp1", "dir2", "ebp2", "Rdir", "Rebp", "Addir", "Adebp",
    ]
    assert len(frame) == aux.D
    assert frame["n_d"].tolist()[-2:] == [0, 0]
    assert frame["dir1"].isna().sum() == 2
    assert frame["ebp1"].notna().all()
    assert "dir1_mse" in frame.columns


def _random_params(rng: np.random.Generator) -> ModelParams:
    theta = VarianceComponents(
        sigma2_u1=rng.uniform(0.02, 1.0), sigma2_u2=rng.uniform(0.02, 1.0), rho_u=rng.uniform(-0.9, 0.9),
        sigma2_e1=rng.uniform(0.02, 1.0), sigma2_e2=rng.uniform(0.02, 1.0), rho_e=rng.uniform(-0.9, 0.9),
    )
    beta = RegressionCoefficients(beta1=rng.normal(size=2).tolist(), beta2=rng.normal(size=2).tolist())
    return ModelParams(beta=beta, theta=theta)


@pytest.mark.parametrize("seed", range(20))
def test_conditional_moments_random_instances(seed):
    rng = np.random.default_rng(seed)
    params = _random_params(rng)
    n_d = [6] + list(rng.integers(0, 7, size=7))
    sample, aux = simulate_sample(params, n_d, seed=seed, unsampled=1)
    law = conditional_moments(params, sample, aux)
    theta = params.theta
    beta = params.beta.as_array()
    fixed = aux.pattern_design @ beta
    for d in range(aux.D):
        n = int(sample.n_d[d])
        if n == 0:
            np.testing.assert_allclose(law.cond_cov[d], theta.v_u + theta.v_e, rtol=1e-12)
            np.testing.assert_allclose(law.cond_mean[d], fixed, rtol=1e-12, atol=1e-12)
            continue
        V = marginal_cov_domain(theta, n)
        cross = np.kron(np.ones((1, n)), theta.v_u)
        r = sample.domain_response(d) - sample.domain_design(d) @ beta
        cov = theta.v_u + theta.v_e - cross @ np.linalg.solve(V, cross.T)
        np.testing.assert_allclose(law.cond_cov[d], cov, rtol=1e-9, atol=1e-12)
        shift = cross @ np.linalg.solve(V, r)
        np.testing.assert_allclose(law.cond_mean[d], fixed + shift, rtol=1e-9, atol=1e-12)


def test_custom_mean_matches_additive_path(small_world):
    """A domain mean written as a block function gives the additive EBP."""
    sample, aux = small_world
    block_mean = nonadditive_target("block_mean1", lambda z: z[..., 0].mean(axis=-1))
    mc = McOptions(L=40, seed=12)
    via_blocks = ebp_nonadditive(block_mean, TRUE_PARAMS, LOG, sample, aux, mc)
    additive = ebp_additive(MEAN1, LOG, TRUE_PARAMS, sample, aux, mc)
    np.testing.assert_allclose(via_blocks, additive, rtol=1e-10)


def test_custom_max_covers_sample_maximum(small_world):
    sample, aux = small_world
    block_max = nonadditive_target("max1", lambda z: z[..., 0].max(axis=-1))
    estimates = ebp_nonadditive(block_max, TRUE_PARAMS, LOG, sample, aux, McOptions(L=25, seed=4))
    z = np.exp(sample.y[:, 0])
    for d in range(aux.D):
        rows = z[sample.domain_rows(d)]
        if rows.size:
            assert estimates[d] >= rows.max()
        assert estimates[d] > 0


def test_share_range_is_logged(caplog):
    table = np.array([[0.4, 0.5, 3.0], [1.2, -0.1, 0.2]])
    targets = [MEAN_OF_RATIOS, RATIO_OF_MEANS, MEAN1]
    with caplog.at_level("DEBUG", logger="app.ebp"):
        flagged = log_share_range(table, targets, ["a", "b"])
    assert flagged == 2
    messages = [r.getMessage() for r in caplog.records]
    assert any("mean_of_ratios for domain b" in m for m in messages)
    assert any("ratio_of_means for domain b" in m for m in messages)
    assert not any("mean1" in m for m in messages)


def test_predicted_shares_inside_unit_interval(small_world, small_fit, caplog):
    sample, aux = small_world
    with caplog.at_level("DEBUG", logger="app.ebp"):
        predict_domains(small_fit, sample, aux, LOG, McOptions(L=20, seed=1))
    assert not any("outside (0, 1)" in r.getMessage() for r in caplog.records)


@pytest.mark.slow
def test_monte_carlo_error_shrinks_like_root_L(small_world):
    """RMS error against the closed-form lognormal mean falls with slope about -1/2 in log L."""
    sample, aux = small_world
    law = conditional_moments(TRUE_PARAMS, sample, aux)
    alignment = aux.match_sample(sample)
    aligned = alignment.sample
    exact = np.empty(aux.D)
    for d in range(aux.D):
        sampled = np.exp(aligned.y[aligned.domain_rows(d), 0]).sum()
        lognormal = np.exp(law.cond_mean[d, :, 0] + 0.5 * law.cond_cov[d, 0, 0])
        exact[d] = (sampled + (alignment.remaining[d] * lognormal).sum()) / aux.N_d[d]

    sizes = [25, 100, 400, 1600]
    rmse = []
    for L in sizes:
        errors = [
            ebp_additive(MEAN1, LOG, TRUE_PARAMS, sample, aux, McOptions(L=L, seed=s)) - exact
            for s in range(30)
        ]
        rmse.append(np.sqrt(np.mean(np.square(errors))))
    slope = np.polyfit(np.log(sizes), np.log(rmse), 1)[0]
    assert -0.65 <= slope <= -0.35
