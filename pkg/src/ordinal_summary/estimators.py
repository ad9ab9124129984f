"""scikit-learn style front end: fit a Bayesian PO/PPO model, report summaries."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .marginal import (
    breakpoint_summary,
    marginalize_adjusted,
    marginalize_unadjusted,
    mean_weights,
    summarize_draws,
)
from .measures import MEASURE_KINDS
from .ppo import ModelConfig, PpoModel, TrialDataset
from .sampler import SamplerConfig, sample


def _check_treatment(treatment, n):
    if treatment is None:
        raise ValueError("treatment indicators are required")
    t = np.asarray(treatment).reshape(-1)
    if t.size != n:
        raise ValueError(f"treatment has {t.size} entries but X has {n} rows")
    if t.dtype != bool:
        if not np.all(np.isin(t, (0, 1))):
            raise ValueError("treatment must be boolean or 0/1")
        t = t.astype(bool)
    return t


class OrdinalEffectEstimator(BaseEstimator):
    """Bayesian cumulative-logit fit with weighted summary measures.

    Parameters
    ----------
    family : {"PPO", "PO"}
    weight_kind : str
        Breakpoint weights for the weighted measures.
    measures : tuple of str
        Summary measures to report.
    n_levels : int or None
        Number of outcome levels; inferred from ``y`` when None.
    prior_sd_beta, prior_sd_tau, prior_sd_gamma : float
    chains, warmup, draws_per_chain : int
    algorithm : {"adaptive-rw", "hmc"}
    random_state : int
        Seeds the sampler and the Bayesian bootstrap.
    level : float
        Interval probability.

    Attributes
    ----------
    summary_ : dict
        ``{measure: MeasureSummary}``.
    breakpoints_ : dict
        Per-breakpoint effects with intervals.
    weights_ : ndarray
        Posterior-mean normalized weights.
    draws_ : PosteriorDraws
    marginals_ : MarginalDraws
    diagnostics_ : dict
    """

    def __init__(
        self,
        family="PPO",
        weight_kind="control",
        measures=("wOR", "AOR"),
        n_levels=None,
        prior_sd_beta=100.0,
        prior_sd_tau=100.0,
        prior_sd_gamma=100.0,
        chains=4,
        warmup=1000,
        draws_per_chain=1000,
        algorithm="adaptive-rw",
        random_state=0,
        level=0.95,
    ):
        self.family = family
        self.weight_kind = weight_kind
        self.measures = measures
        self.n_levels = n_levels
        self.prior_sd_beta = prior_sd_beta
        self.prior_sd_tau = prior_sd_tau
        self.prior_sd_gamma = prior_sd_gamma
        self.chains = chains
        self.warmup = warmup
        self.draws_per_chain = draws_per_chain
        self.algorithm = algorithm
        self.random_state = random_state
        self.level = level

    def _validate(self, X, y=None, treatment=None, reset=True):
        if X is None:
            ref = y if y is not None else treatment
            if ref is None:
                raise ValueError("X is required when neither y nor treatment is given")
            X = np.zeros((len(ref), 0))
        X = check_array(X, ensure_min_features=0, ensure_min_samples=1, dtype=float)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features but the model was fit with {self.n_features_in_}")
        return X, _check_treatment(treatment, X.shape[0])

    def fit(self, X, y, treatment=None):
        """Fit to covariates ``X`` (may have zero columns), levels ``y`` and arms."""
        X, t = self._validate(X, y, treatment)
        y = np.asarray(y).reshape(-1)
        if y.size != X.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        for kind in self.measures:
            if kind not in MEASURE_KINDS:
                raise ValueError(f"unknown measure {kind!r}")
        K = int(self.n_levels or y.max())
        data = TrialDataset(t, y, K, X)
        if not data.has_both_arms():
            raise ValueError("both arms must be present")
        config = ModelConfig(
            family=self.family,
            n_levels=K,
            n_covariates=X.shape[1],
            prior_sd_beta=self.prior_sd_beta,
            prior_sd_tau=self.prior_sd_tau,
            prior_sd_gamma=self.prior_sd_gamma,
        )
        sampler = SamplerConfig(
            algorithm=self.algorithm,
            chains=self.chains,
            warmup=self.warmup,
            draws_per_chain=self.draws_per_chain,
            seed=self.random_state,
        )
        self.model_ = PpoModel.from_dataset(data, config)
        self.draws_ = sample(self.model_, sampler)
        if X.shape[1]:
            marg = marginalize_adjusted(self.draws_, data, seed=self.random_state)
        else:
            marg = marginalize_unadjusted(self.draws_)[0]
        self.marginals_ = marg
        self.summary_ = summarize_draws(marg, self.weight_kind, tuple(self.measures), self.level)
        self.breakpoints_ = breakpoint_summary(marg, self.level)
        self.weights_ = mean_weights(marg, self.weight_kind)
        self.diagnostics_ = self.draws_.summary(0)
        self.diagnostics_["passed"] = bool(self.draws_.passes()[0])
        self.n_levels_ = K
        self.dataset_ = data
        return self

    def predict_proba(self, X, treatment):
        """Posterior-mean outcome distribution of each record, shape (n, K)."""
        check_is_fitted(self, "draws_")
        X, t = self._validate(X, treatment=treatment, reset=False)
        alpha, beta, tau, gamma = (a[0] for a in self.model_.natural(self.draws_.flat()))
        delta = beta[:, None] + tau
        eta = alpha[:, None, :] + delta[:, None, :] * (t - 0.5)[None, :, None] + (gamma @ X.T)[..., None]
        F = 1.0 / (1.0 + np.exp(-eta))
        lead = F.shape[:-1] + (1,)
        p = np.diff(np.concatenate([np.zeros(lead), F, np.ones(lead)], axis=-1), axis=-1)
        p = np.clip(p, 0.0, None)
        p /= p.sum(axis=-1, keepdims=True)
        return p.mean(axis=0)

    def predict(self, X, treatment):
        """Most probable outcome level (1-based) of each record."""
        return np.argmax(self.predict_proba(X, treatment), axis=-1) + 1

    def summary_frame(self):
        """Rows of ``MeasureSummary.to_dict()`` for every requested measure."""
        check_is_fitted(self, "summary_")
        return [s.to_dict() for s in self.summary_.values()]
