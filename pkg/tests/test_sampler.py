import numpy as np
import pytest

from ordinal_summary.ppo import ModelConfig, PpoModel, TrialDataset
from ordinal_summary.sampler import (
    SamplerConfig,
    SamplerError,
    adaptation_windows,
    effective_sample_size,
    sample,
    split_rhat,
)
from ordinal_summary.simulate import generate_trial, get_scenario

FAST = SamplerConfig(chains=4, warmup=300, draws_per_chain=300, seed=7)


def _k2_model():
    ds = TrialDataset(np.zeros(10, bool), [1] * 7 + [2] * 3, 2)
    return PpoModel.from_dataset(ds, ModelConfig("PO", 2, include_treatment=False))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(warmup=50)
    with pytest.raises(ValueError):
        SamplerConfig(chains=0)
    with pytest.raises(ValueError):
        SamplerConfig(algorithm="gibbs")
    assert SamplerConfig().target_accept == 0.3
    assert SamplerConfig(algorithm="hmc").target_accept == 0.8


def test_adaptation_windows_cover_warmup():
    for warmup in (100, 300, 1000, 2345):
        start, points = adaptation_windows(warmup)
        assert 0 < start < points[0]
        assert points[-1] == warmup - int(0.1 * warmup)
        assert np.all(np.diff(points) > 0)


def test_k2_beta_conjugate():
    model = _k2_model()
    draws = sample(model, SamplerConfig(chains=4, warmup=500, draws_per_chain=1000, seed=3))
    p1 = draws.params()["alpha"][0, :, 0]
    p1 = 1 / (1 + np.exp(-p1))
    c = model.config.dirichlet_conc
    assert p1.mean() == pytest.approx((7 + c) / (10 + 2 * c), abs=0.02)


def test_hmc_k2_beta_conjugate():
    model = _k2_model()
    draws = sample(model, SamplerConfig(algorithm="hmc", chains=4, warmup=300, draws_per_chain=500, seed=3))
    p1 = 1 / (1 + np.exp(-draws.params()["alpha"][0, :, 0]))
    c = model.config.dirichlet_conc
    assert p1.mean() == pytest.approx((7 + c) / (10 + 2 * c), abs=0.02)


def test_hmc_rejects_ppo():
    ds = generate_trial(get_scenario("Setting1/LowPO"), 100, rng=1)
    model = PpoModel.from_dataset(ds, ModelConfig("PPO", 5))
    with pytest.raises(ValueError):
        sample(model, SamplerConfig(algorithm="hmc", chains=1, warmup=100, draws_per_chain=10))


def test_determinism():
    ds = generate_trial(get_scenario("Setting2/NP6"), 300, rng=2)
    model = PpoModel.from_dataset(ds, ModelConfig("PPO", 5))
    a = sample(model, FAST)
    b = sample(model, FAST)
    assert np.array_equal(a.theta, b.theta)
    c = sample(model, SamplerConfig(chains=4, warmup=300, draws_per_chain=300, seed=8))
    assert not np.array_equal(a.theta, c.theta)


def test_batch_results_do_not_depend_on_batch_companions():
    sc = get_scenario("Setting1/LowPO")
    counts = np.stack([generate_trial(sc, 200, rng=i).arm_counts() for i in range(3)])
    cfg = ModelConfig("PO", 5)
    seeds = [np.random.SeedSequence([1, i]) for i in range(3)]
    full = sample(PpoModel.from_arm_counts(counts, cfg), FAST, seeds=seeds)
    one = sample(PpoModel.from_arm_counts(counts[1:2], cfg), FAST, seeds=seeds[1:2])
    assert np.array_equal(full.theta[1], one.theta[0])


def test_independent_seeds_agree():
    ds = generate_trial(get_scenario("Setting1/LowPO"), 500, rng=4)
    model = PpoModel.from_dataset(ds, ModelConfig("PO", 5))
    means, ses = [], []
    for seed in (11, 12):
        d = sample(model, SamplerConfig(chains=4, warmup=500, draws_per_chain=1000, seed=seed))
        beta = d.params()["beta"][0]
        ess = d.diagnostics()["ess"][0, model.blocks["beta"][0]]
        means.append(beta.mean())
        ses.append(beta.std() / np.sqrt(ess))
    assert abs(means[0] - means[1]) < 3 * np.hypot(*ses)


def test_draws_are_feasible_and_counted():
    ds = generate_trial(get_scenario("Setting2/NP6"), 400, rng=5)
    model = PpoModel.from_dataset(ds, ModelConfig("PPO", 5))
    d = sample(model, FAST)
    assert d.theta.shape == (1, 4, 300, model.n_params)
    assert np.all(np.isfinite(d.log_post))
    assert np.all(np.isfinite(model.log_likelihood(d.flat())))
    assert 0 < d.acceptance_rate[0] < 1
    s = d.summary()
    assert s["draws"] == 1200 and set(s["parameters"]) == set(model.parameter_names())
    assert d[0].theta.shape == d.theta.shape


def test_empty_dataset_rejected():
    model = PpoModel.from_arm_counts(np.zeros((1, 2, 3)), ModelConfig("PO", 3))
    with pytest.raises(SamplerError):
        sample(model, FAST)


# ----------------------------------------------------------------------
# diagnostics


def test_white_noise_diagnostics(rng):
    x = rng.normal(size=(4, 1000))
    assert 0.99 <= split_rhat(x) <= 1.01
    assert effective_sample_size(x) == pytest.approx(4000, rel=0.2)


def test_offset_chains_detected(rng):
    x = rng.normal(size=(4, 500)) + np.arange(4)[:, None] * 3.0
    assert split_rhat(x) > 1.1


def test_constant_chain_is_degenerate():
    x = np.ones((2, 100))
    assert np.isnan(effective_sample_size(x))
    assert np.isnan(split_rhat(x))


def test_single_chain_has_ess_only(rng):
    model = _k2_model()
    d = sample(model, SamplerConfig(chains=1, warmup=200, draws_per_chain=400, seed=1))
    diag = d.diagnostics()
    assert np.all(np.isnan(diag["rhat"]))
    assert np.all(diag["ess"] > 0)
    assert d.summary()["max_rhat"] is None


def test_autocorrelated_chain_has_smaller_ess(rng):
    e = rng.normal(size=(2, 4000))
    x = np.empty_like(e)
    x[:, 0] = e[:, 0]
    for i in range(1, e.shape[1]):
        x[:, i] = 0.9 * x[:, i - 1] + e[:, i]
    # AR(1) with phi = 0.9 has ESS about n (1 - phi) / (1 + phi)
    assert effective_sample_size(x) == pytest.approx(8000 * 0.1 / 1.9, rel=0.3)
