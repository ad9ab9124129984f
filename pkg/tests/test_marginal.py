import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ordinal_summary.marginal import (
    MarginalDraws,
    breakpoint_summary,
    interval,
    marginalize_adjusted,
    marginalize_unadjusted,
    mean_weights,
    significant,
    summarize_draws,
)
from ordinal_summary.ppo import ModelConfig, PpoModel, PpoParams, TrialDataset, marginal_probs_unadjusted
from ordinal_summary.sampler import PosteriorDraws, SamplerConfig, sample
from ordinal_summary.simulate import generate_trial, get_scenario

FAST = SamplerConfig(chains=2, warmup=200, draws_per_chain=200, seed=3)


@pytest.fixture(scope="module")
def covariate_fit():
    rng = np.random.default_rng(0)
    base = generate_trial(get_scenario("Setting1/LowPO"), 300, rng=rng)
    X = rng.integers(0, 3, (base.n, 1)).astype(float)
    ds = TrialDataset(base.treated, base.y, 5, X)
    model = PpoModel.from_dataset(ds, ModelConfig("PO", 5, n_covariates=1))
    return ds, sample(model, FAST)


def test_null_draws_give_identical_arms():
    cfg = ModelConfig("PPO", 4)
    model = PpoModel.from_arm_counts(np.ones((1, 2, 4)), cfg, parameterization="baseline")
    theta = np.zeros((1, 1, 5, model.n_params))
    theta[..., :3] = np.random.default_rng(1).normal(size=(5, 3))
    draws = PosteriorDraws(model, theta, np.zeros((1, 1, 5)), np.zeros(1), FAST)
    m = marginalize_unadjusted(draws)
    assert_allclose(m.control, m.treatment)
    assert m.control.shape == (1, 5, 4)


def test_single_draw_output_length():
    model = PpoModel.from_arm_counts(np.ones((1, 2, 3)), ModelConfig("PO", 3))
    draws = PosteriorDraws(model, np.zeros((1, 1, 1, 3)), np.zeros((1, 1, 1)), np.zeros(1), FAST)
    assert marginalize_unadjusted(draws)[0].n_draws == 1


def test_unadjusted_means_match_empirical():
    sc = get_scenario("Setting1/HighPO")
    ds = generate_trial(sc, 20_000, rng=5)
    d = sample(PpoModel.from_dataset(ds, ModelConfig("PO", 5)), FAST)
    c, t = marginalize_unadjusted(d)[0].mean()
    emp = ds.arm_counts() / ds.arm_counts().sum(axis=1, keepdims=True)
    assert_allclose(c, emp[0], atol=0.01)
    assert_allclose(t, emp[1], atol=0.01)


def test_unadjusted_rejects_covariates(covariate_fit):
    _, draws = covariate_fit
    with pytest.raises(ValueError):
        marginalize_unadjusted(draws)


def _copy(draws):
    return PosteriorDraws(draws.model, draws.theta.copy(), draws.log_post, draws.acceptance_rate, draws.config)


def test_gamma_zero_makes_adjusted_equal_unadjusted(covariate_fit):
    ds, draws = covariate_fit
    draws = _copy(draws)
    draws.theta[..., draws.model.blocks["gamma"]] = 0.0
    adj = marginalize_adjusted(draws, ds, seed=1)
    alpha, beta, _, _ = (a[0] for a in draws.model.natural(draws.flat()))
    for s in (0, 17, 399):
        c, t = marginal_probs_unadjusted(PpoParams(alpha=alpha[s], beta=beta[s]))
        assert_allclose(adj.control[s], c, atol=1e-12)
        assert_allclose(adj.treatment[s], t, atol=1e-12)


def test_adjusted_is_reproducible_and_sums_to_one(covariate_fit):
    ds, draws = covariate_fit
    a = marginalize_adjusted(draws, ds, seed=4)
    b = marginalize_adjusted(draws, ds, seed=4)
    c = marginalize_adjusted(draws, ds, seed=5)
    assert np.array_equal(a.control, b.control)
    assert not np.array_equal(a.control, c.control)
    assert_allclose(a.control.sum(axis=-1), 1.0, atol=1e-10)
    assert a.n_draws == draws.n_draws


def test_bootstrap_weights_differ_between_draws(covariate_fit):
    # identical parameter draws must still give different marginals
    ds, draws = covariate_fit
    draws = _copy(draws)
    draws.theta[:] = draws.theta[:, :1, :1]
    m = marginalize_adjusted(draws, ds, seed=2)
    assert np.ptp(m.control[:, 0]) > 0


def test_equal_weights_is_plain_g_computation(covariate_fit):
    ds, draws = covariate_fit
    m = marginalize_adjusted(draws, ds, equal_weights=True)
    alpha, beta, _, gamma = (a[0] for a in draws.model.natural(draws.flat()))
    s = 0
    eta = alpha[s] - 0.5 * beta[s] + (ds.X @ gamma[s])[:, None]
    F = 1 / (1 + np.exp(-eta))
    p = np.diff(np.column_stack([np.zeros(ds.n), F, np.ones(ds.n)]), axis=1)
    assert_allclose(m.control[s], p.mean(axis=0), atol=1e-12)


def test_adjusted_validates_dataset(covariate_fit):
    ds, draws = covariate_fit
    with pytest.raises(ValueError):
        marginalize_adjusted(draws, TrialDataset(ds.treated, ds.y, 5))


def test_truncation_counted_and_warned():
    model = PpoModel.from_arm_counts(np.ones((1, 2, 3)), ModelConfig("PPO", 3), parameterization="baseline")
    theta = np.zeros((1, 1, 10, 4))
    theta[..., 3] = -8.0  # tau large and negative: treatment curves cross
    draws = PosteriorDraws(model, theta, np.zeros((1, 1, 10)), np.zeros(1), FAST)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        m = marginalize_unadjusted(draws)
    assert int(m.truncation_count[0]) == 10
    assert m.truncation_warning()
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)
    assert np.all(m.treatment >= 0)
    assert_allclose(m.treatment.sum(axis=-1), 1.0, atol=1e-12)


# ----------------------------------------------------------------------
# summaries


def _constant_marginals(S=50):
    c = np.tile([0.4, 0.3, 0.3], (S, 1))
    t = np.tile([0.5, 0.3, 0.2], (S, 1))
    return MarginalDraws(c, t, 0)


def test_constant_draws_collapse_interval():
    s = summarize_draws(_constant_marginals(), "control", ("wOR", "wRD"))
    assert s["wOR"].log_lower == pytest.approx(s["wOR"].log_point)
    assert s["wOR"].log_upper == pytest.approx(s["wOR"].log_point)
    assert s["wOR"].significant
    assert s["wRD"].point == pytest.approx(s["wRD"].log_point)
    d = s["wOR"].to_dict()
    assert d["scale"] == "ratio" and d["point"] == pytest.approx(np.exp(d["log_point"]))


def test_symmetric_draws_straddle_null(rng):
    v = rng.normal(size=4000)
    v = np.concatenate([v, -v])
    mid, lo, hi = interval(v)
    assert lo < 0 < hi and abs(mid) < 1e-12
    assert not significant(v)


def test_summarize_requires_single_target():
    m = MarginalDraws(np.ones((2, 3, 3)) / 3, np.ones((2, 3, 3)) / 3, np.zeros(2))
    with pytest.raises(ValueError):
        summarize_draws(m)
    assert m[1].control.shape == (3, 3)


def test_breakpoint_summary_and_weights():
    m = _constant_marginals()
    bp = breakpoint_summary(m)
    assert bp["log_or"][0].shape == (2,)
    w = mean_weights(m, "control")
    assert w.sum() == pytest.approx(1.0)
