import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit, logit

from ordinal_summary.measures import cumulative
from ordinal_summary.ppo import (
    ModelConfig,
    PpoModel,
    PpoParams,
    TrialDataset,
    cell_probs,
    default_dirichlet_concentration,
    fit_map,
    fit_mle,
    linear_predictor,
    log_likelihood,
    log_posterior_and_gradient,
    log_prior,
    marginal_probs_unadjusted,
    pointwise_log_likelihood,
    truncate_rescale,
)


def _random_dataset(rng, n, K, p=0):
    return TrialDataset(rng.random(n) < 0.5, rng.integers(1, K + 1, n), K, rng.integers(0, 2, (n, p)).astype(float))


def _fd_grad(model, theta, h=1e-5):
    eye = np.eye(theta.shape[-1])
    cols = [(model.log_posterior(theta + h * e) - model.log_posterior(theta - h * e)) / (2 * h) for e in eye]
    return np.stack(cols, axis=-1)


# ----------------------------------------------------------------------
# transforms


def test_linear_predictor_examples():
    p = PpoParams(alpha=[0.0, 1.0], beta=0.0, tau=[0.0])
    assert linear_predictor(p, "c", k=1) == 0.0
    p = PpoParams(alpha=[0.0, 1.0], beta=2.0, tau=[1.0])
    assert linear_predictor(p, "t", k=2) == pytest.approx(2.5)
    p = PpoParams(alpha=[0.0, 1.0], beta=2.0, tau=[0.0])
    assert linear_predictor(p, "t", k=1) - linear_predictor(p, "c", k=1) == pytest.approx(2.0)
    with pytest.raises(IndexError):
        linear_predictor(p, "t", k=3)


def test_linear_predictor_covariates():
    p = PpoParams(alpha=[0.0, 1.0], beta=1.0, gamma=[0.5, -1.0])
    assert linear_predictor(p, "c", x=[2.0, 1.0], k=1) == pytest.approx(-0.5 + 1.0 - 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        PpoParams(alpha=[1.0, 0.5])
    with pytest.raises(ValueError):
        PpoParams(alpha=[0.0, 1.0], beta=np.inf)
    with pytest.raises(ValueError):
        PpoParams(alpha=[0.0, 1.0], tau=[1.0, 2.0])


def test_cell_probs_infeasible_example():
    p = PpoParams(alpha=[0.0, 0.1], beta=0.0, tau=[-3.0])
    probs, feasible = cell_probs(p, "t")
    assert not feasible
    assert expit(-1.4) == pytest.approx(0.1978, abs=1e-4)
    assert probs[1] < 0


def test_cell_probs_round_trip_uniform():
    u = np.full(5, 0.2)
    p = PpoParams(alpha=logit(cumulative(u)) + 0.5 * 0.0)
    probs, feasible = cell_probs(p, "c")
    assert feasible
    assert_allclose(probs, u, atol=1e-10)


def test_po_family_always_feasible(rng):
    for _ in range(200):
        alpha = np.sort(rng.normal(0, 3, 4))
        p = PpoParams(alpha=alpha, beta=rng.normal(0, 5), gamma=rng.normal(0, 3, 2))
        for arm in ("c", "t"):
            probs, feasible = cell_probs(p, arm, rng.normal(size=2))
            assert feasible
            assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_marginal_probs_unadjusted():
    p = PpoParams(alpha=[-1.0, 0.0, 2.0], beta=0.0, tau=[0.0, 0.0])
    c, t = marginal_probs_unadjusted(p)
    assert_allclose(c, t)
    p = PpoParams(alpha=[0.3], beta=1.2)
    c, t = marginal_probs_unadjusted(p)
    assert c[0] == pytest.approx(expit(0.3 - 0.6))
    assert t[0] == pytest.approx(expit(0.3 + 0.6))


def test_marginal_probs_truncates_infeasible_states():
    p = PpoParams(alpha=[0.0, 0.1], beta=0.0, tau=[-3.0])
    _, t = marginal_probs_unadjusted(p)
    assert np.all(t >= 0) and t.sum() == pytest.approx(1.0, abs=1e-12)
    assert t[1] == 0.0


def test_truncate_rescale():
    p, fired = truncate_rescale([[0.6, -0.1, 0.5], [0.2, 0.3, 0.5]])
    assert list(fired) == [True, False]
    assert_allclose(p[0], [6 / 11, 0, 5 / 11])


def test_mle_recovers_large_ppo_data(rng):
    truth = PpoParams(alpha=[-0.5, 0.4, 1.5], beta=0.6, tau=[0.3, -0.4])
    c, t = marginal_probs_unadjusted(truth)
    n = 200_000
    counts = np.stack([rng.multinomial(n, c), rng.multinomial(n, t)])[None].astype(float)
    cfg = ModelConfig("PPO", 4, prior_sd_beta=np.inf, prior_sd_tau=np.inf)
    params, _ = fit_mle(PpoModel.from_arm_counts(counts, cfg, parameterization="baseline"))
    fc, ft = marginal_probs_unadjusted(params)
    assert_allclose(fc, c, atol=0.01)
    assert_allclose(ft, t, atol=0.01)


# ----------------------------------------------------------------------
# likelihood and prior


def test_log_likelihood_examples(rng):
    ds = TrialDataset([False], [1], 2)
    assert log_likelihood(PpoParams(alpha=[0.0]), ds) == pytest.approx(np.log(0.5))

    ds = _random_dataset(rng, 20, 3)
    p = PpoParams(alpha=[-0.3, 0.8], beta=0.4, tau=[0.7])
    brute = sum(np.log(cell_probs(p, "t" if a else "c")[0][y - 1]) for a, y in zip(ds.treated, ds.y))
    assert log_likelihood(p, ds) == pytest.approx(brute, abs=1e-10)

    doubled = TrialDataset(np.r_[ds.treated, ds.treated], np.r_[ds.y, ds.y], 3)
    assert log_likelihood(p, doubled) == pytest.approx(2 * log_likelihood(p, ds), abs=1e-10)

    order = rng.permutation(ds.n)
    assert log_likelihood(p, ds.subset(order)) == pytest.approx(log_likelihood(p, ds), abs=1e-10)


def test_log_likelihood_infeasible_is_minus_inf():
    ds = TrialDataset([True], [2], 3)
    p = PpoParams(alpha=[0.0, 0.1], beta=0.0, tau=[-3.0])
    assert log_likelihood(p, ds) == -np.inf


def test_pointwise_log_likelihood_sums(rng):
    ds = _random_dataset(rng, 30, 4, p=1)
    p = PpoParams(alpha=[-1.0, 0.0, 1.0], beta=0.5, tau=[0.2, 0.1], gamma=[0.3])
    assert pointwise_log_likelihood(p, ds).sum() == pytest.approx(log_likelihood(p, ds), abs=1e-10)


def test_dirichlet_concentration():
    assert default_dirichlet_concentration(5) == pytest.approx(0.392157, abs=1e-6)
    assert default_dirichlet_concentration(2) == pytest.approx(0.540540, abs=1e-6)
    assert ModelConfig("PO", 5).dirichlet_conc == pytest.approx(1 / 2.55)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig("XX", 5)
    with pytest.raises(ValueError):
        ModelConfig("PPO", 5, prior_sd_tau=0.0)
    assert ModelConfig("po", 5).n_tau == 0
    assert ModelConfig("PPO", 5).n_tau == 3


def test_prior_symmetric_under_cell_relabeling():
    cfg = ModelConfig("PO", 4)
    q = np.array([0.1, 0.2, 0.3, 0.4])
    lp = []
    for perm in ([0, 1, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]):
        qp = q[perm]
        a = logit(np.cumsum(qp)[:-1])
        # remove the cumulative-logit Jacobian to compare the simplex density itself
        f = expit(a)
        lp.append(log_prior(PpoParams(alpha=a), cfg) - np.sum(np.log(f * (1 - f))))
    assert_allclose(lp, lp[0], atol=1e-12)


def test_prior_integrates_to_one_k2():
    # the alpha-space density of a Beta(c, c) variable pushed through logit
    from scipy import integrate

    cfg = ModelConfig("PO", 2, include_treatment=False)
    total, _ = integrate.quad(lambda a: np.exp(log_prior(PpoParams(alpha=[a]), cfg)), -40, 40, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


# ----------------------------------------------------------------------
# model object


@pytest.mark.parametrize(
    "family,param,K,p",
    [("PPO", "arm", 5, 0), ("PPO", "arm", 4, 2), ("PPO", "baseline", 5, 1), ("PO", "baseline", 5, 2), ("PPO", "arm", 2, 0)],
)
def test_gradient_matches_finite_differences(rng, family, param, K, p):
    cfg = ModelConfig(family, K, n_covariates=p, prior_sd_beta=3, prior_sd_tau=2, prior_sd_gamma=1.5)
    ds = _random_dataset(rng, 60, K, p)
    m = PpoModel.from_dataset(ds, cfg, parameterization=param)
    theta = m.initial_theta()[:, None] + rng.normal(0, 0.3, (1, 10, m.n_params))
    lp, g = m.log_posterior_and_grad(theta)
    ok = np.isfinite(lp)
    assert ok.any()
    fd = _fd_grad(m, theta)
    assert np.max(np.abs(fd - g)[ok] / np.maximum(np.abs(g[ok]), 1.0)) < 1e-5


def test_round_trip_between_coordinates(rng):
    cfg = ModelConfig("PPO", 5, n_covariates=1)
    ds = _random_dataset(rng, 80, 5, 1)
    arm = PpoModel.from_dataset(ds, cfg)
    base = PpoModel.from_dataset(ds, cfg, parameterization="baseline")
    theta = arm.initial_theta()[0] + rng.normal(0, 0.2, arm.n_params)
    params = arm.to_params(theta)
    assert_allclose(arm.to_theta(params), theta, atol=1e-10)
    tb = base.to_theta(params)
    assert arm.log_likelihood(theta[None, None])[0, 0] == pytest.approx(base.log_likelihood(tb[None, None])[0, 0])


def test_arm_and_baseline_posteriors_differ_by_jacobian_only(rng):
    # log p_arm(theta) - log p_base(theta(params)) must not depend on the state
    cfg = ModelConfig("PPO", 4, prior_sd_beta=2, prior_sd_tau=2)
    ds = _random_dataset(rng, 50, 4)
    arm = PpoModel.from_dataset(ds, cfg, pivot="last")
    base = PpoModel.from_dataset(ds, cfg, parameterization="baseline", pivot="last")
    diffs = []
    for _ in range(5):
        theta = arm.initial_theta()[0] + rng.normal(0, 0.2, arm.n_params)
        params = arm.to_params(theta)
        # move both sides to natural coordinates with their own log-Jacobians
        a = arm.log_posterior(theta[None, None])[0, 0] - _log_jac_arm(arm, theta)
        b = base.log_posterior(base.to_theta(params)[None, None])[0, 0] - _log_jac_base(base, base.to_theta(params))
        diffs.append(a - b)
    assert np.ptp(diffs) < 1e-8


def _log_jac_base(model, theta):
    alpha = model.natural(theta[None, None])[0][0, 0]
    f = expit(alpha)
    q = np.diff(np.concatenate([[0.0], f, [1.0]]))
    return np.sum(np.log(q)) - np.sum(np.log(f * (1 - f)))


def _log_jac_arm(model, theta):
    alpha, beta, tau, _ = model.natural(theta[None, None])
    delta = beta[0, 0] + tau[0, 0]
    total = 0.0
    for eta in (alpha[0, 0] - 0.5 * delta, alpha[0, 0] + 0.5 * delta):
        f = expit(eta)
        q = np.diff(np.concatenate([[0.0], f, [1.0]]))
        total += np.sum(np.log(q)) - np.sum(np.log(f * (1 - f)))
    return total


def test_symmetric_data_has_zero_beta_gradient():
    cfg = ModelConfig("PO", 3)
    ds = TrialDataset([False, False, True, True], [1, 3, 3, 1], 3)
    m = PpoModel.from_dataset(ds, cfg)
    theta = m.initial_theta()[0].copy()
    theta[m.blocks["beta"]] = 0.0
    _, g = log_posterior_and_gradient(theta, ds, cfg)
    assert g[m.blocks["beta"][0]] == pytest.approx(0.0, abs=1e-12)


def test_empty_dataset_gradient_is_prior_gradient(rng):
    cfg = ModelConfig("PO", 4, prior_sd_beta=2.0)
    empty = TrialDataset(np.zeros(0, bool), np.zeros(0, int), 4)
    m = PpoModel.from_dataset(empty, cfg)
    theta = rng.normal(size=m.n_params)
    lp, g = log_posterior_and_gradient(theta, empty, cfg)
    assert lp == pytest.approx(m.log_prior(theta[None, None])[0, 0])
    h = 1e-6
    fd = [(m.log_prior((theta + h * e)[None, None]) - m.log_prior((theta - h * e)[None, None]))[0, 0] / (2 * h)
          for e in np.eye(m.n_params)]
    assert_allclose(g, fd, atol=1e-6)


def test_map_approaches_mle_with_vague_priors(rng):
    n = 5000
    truth = PpoParams(alpha=[-1.0, 0.0, 1.0], beta=0.5)
    c, t = marginal_probs_unadjusted(truth)
    counts = np.stack([rng.multinomial(n // 2, c), rng.multinomial(n // 2, t)]).astype(float)[None]
    vague = ModelConfig("PO", 4, prior_sd_beta=1e4)
    theta, _ = fit_map(PpoModel.from_arm_counts(counts, vague))
    mle, _ = fit_mle(PpoModel.from_arm_counts(counts, ModelConfig("PO", 4, prior_sd_beta=np.inf)))
    beta_map = PpoModel.from_arm_counts(counts, vague).to_params(theta).beta
    assert beta_map == pytest.approx(mle.beta, abs=0.02)


def test_batched_model_matches_single_models(rng):
    cfg = ModelConfig("PPO", 5)
    counts = rng.integers(1, 30, (3, 2, 5)).astype(float)
    batch = PpoModel.from_arm_counts(counts, cfg)
    theta = batch.initial_theta()
    lp = batch.log_posterior(theta[:, None])[:, 0]
    for b in range(3):
        single = batch.select(b)
        assert lp[b] == pytest.approx(single.log_posterior(theta[b][None, None])[0, 0])


def test_model_shape_validation():
    cfg = ModelConfig("PO", 3)
    with pytest.raises(ValueError):
        PpoModel(np.array([-0.5, 0.5]), np.zeros((2, 0)), np.ones((2, 4)), cfg)
    with pytest.raises(ValueError):
        PpoModel.from_arm_counts(np.ones((1, 2, 3)), cfg, parameterization="arm")


def test_dataset_validation():
    with pytest.raises(ValueError):
        TrialDataset([True], [4], 3)
    with pytest.raises(ValueError):
        TrialDataset([True, False], [1], 3)
    ds = TrialDataset([True, False, True], [1, 2, 2], 2)
    assert_allclose(ds.arm_counts(), [[0, 1], [1, 1]])
