"""Marginal arm-wise outcome distributions from posterior draws.

Unadjusted models map each draw straight to the two arm distributions.
Covariate-adjusted models use Bayesian g-computation: every posterior draw is
paired with its own Bayesian-bootstrap weight vector over the observed
covariates, and the conditional distributions of both arms are averaged
under those weights.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .measures import (
    MEASURE_KINDS,
    RATIO_KINDS,
    breakpoint_effects,
    summary_log_values,
    weights,
)

TRUNCATION_WARN_FRACTION = 0.05
_CHUNK = 256


def _cells(eta):
    """Cell probabilities from cumulative logits, truncated and rescaled.

    Returns ``(probs, fired)`` where ``fired`` flags rows that had a
    negative cell before truncation.
    """
    F = expit(eta)
    lead = F.shape[:-1] + (1,)
    p = np.diff(np.concatenate([np.zeros(lead), F, np.ones(lead)], axis=-1), axis=-1)
    fired = np.any(p < 0, axis=-1)
    if fired.any():
        p = np.clip(p, 0.0, None)
        p = p / p.sum(axis=-1, keepdims=True)
    return p, fired


@dataclass
class MarginalDraws:
    """Per-draw control and treatment distributions, shape (S, K) or (B, S, K)."""

    control: np.ndarray
    treatment: np.ndarray
    truncation_count: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.control = np.asarray(self.control, dtype=float)
        self.treatment = np.asarray(self.treatment, dtype=float)
        self.truncation_count = np.asarray(self.truncation_count)
        if self.control.shape != self.treatment.shape:
            raise ValueError("control and treatment draws have different shapes")

    @property
    def n_draws(self):
        return self.control.shape[-2]

    @property
    def n_levels(self):
        return self.control.shape[-1]

    def __len__(self):
        return self.n_draws

    def __getitem__(self, b):
        """Single-target view of a batched object."""
        if self.control.ndim != 3:
            raise IndexError("these draws are not batched")
        return MarginalDraws(self.control[b], self.treatment[b], self.truncation_count[b], dict(self.metadata))

    def truncation_fraction(self):
        return self.truncation_count / self.n_draws

    def truncation_warning(self):
        return bool(np.any(self.truncation_fraction() > TRUNCATION_WARN_FRACTION))

    def mean(self):
        return self.control.mean(axis=-2), self.treatment.mean(axis=-2)


def _arm_etas(draws, target=None):
    alpha, beta, tau, gamma = draws.model.natural(draws.flat())
    delta = beta[..., None] + tau
    if target is not None:
        alpha, delta, gamma = alpha[target], delta[target], gamma[target]
    return alpha - 0.5 * delta, alpha + 0.5 * delta, gamma


def marginalize_unadjusted(draws):
    """Arm distributions of every draw of a covariate-free model, (B, S, K)."""
    if draws.model.config.n_covariates:
        raise ValueError("the model has covariates; use marginalize_adjusted")
    eta_c, eta_t, _ = _arm_etas(draws)
    pc, fc = _cells(eta_c)
    pt, ft = _cells(eta_t)
    count = (fc | ft).sum(axis=-1)
    out = MarginalDraws(pc, pt, count, {"adjusted": False})
    _warn_truncation(out)
    return out


def _draw_stream(key, s):
    # the draw index occupies the top counter word, so streams never overlap
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, s]))


def marginalize_adjusted(draws, dataset, seed=0, target=0, equal_weights=False):
    """Bayesian g-computation over the covariates of ``dataset``.

    Each posterior draw ``s`` gets its own Dirichlet(1, ..., 1) weight
    vector over the ``n`` observations.  Observations sharing a covariate
    row are pooled, whose total weight is then Dirichlet with the row
    multiplicities as parameters, so the weights are generated as
    normalized Gamma(multiplicity) variates.  The stream for draw ``s``
    depends only on ``(seed, s)``.

    Parameters
    ----------
    draws : PosteriorDraws
    dataset : TrialDataset
        The analysis dataset; only its covariates are used.
    seed : int
    target : int
        Batch index of ``draws`` to marginalize.
    equal_weights : bool
        Use weights ``1/n`` instead of the Bayesian bootstrap (plain
        g-computation).

    Returns
    -------
    MarginalDraws
        Single-target draws of shape (S, K).
    """
    cfg = draws.model.config
    if dataset.p != cfg.n_covariates:
        raise ValueError(f"dataset has {dataset.p} covariates but the model has {cfg.n_covariates}")
    if dataset.n == 0:
        raise ValueError("the dataset is empty")
    eta_c, eta_t, gamma = _arm_etas(draws, target)
    S = eta_c.shape[0]
    if dataset.p:
        xs, mult = np.unique(dataset.X, axis=0, return_counts=True)
    else:
        xs, mult = np.zeros((1, 0)), np.array([dataset.n])
    key = np.random.SeedSequence(seed).generate_state(2, np.uint64)

    control = np.empty((S, cfg.n_levels))
    treatment = np.empty((S, cfg.n_levels))
    fired = np.zeros(S, dtype=bool)
    for lo in range(0, S, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, S))
        if equal_weights:
            w = np.broadcast_to(mult / mult.sum(), (sl.stop - lo, mult.size))
        else:
            w = np.stack([_draw_stream(key, s).standard_gamma(mult.astype(float)) for s in range(lo, sl.stop)])
            w = w / w.sum(axis=-1, keepdims=True)
        shift = (gamma[sl] @ xs.T)[..., None]  # (s, n_x, 1)
        for eta, out in ((eta_c, control), (eta_t, treatment)):
            p, bad = _cells(eta[sl, None, :] + shift)
            out[sl] = np.einsum("sx,sxk->sk", w, p)
            fired[sl] |= bad.any(axis=-1)
    # guard the sums against rounding drift
    control /= control.sum(axis=-1, keepdims=True)
    treatment /= treatment.sum(axis=-1, keepdims=True)
    out = MarginalDraws(
        control,
        treatment,
        np.asarray(int(fired.sum())),
        {"adjusted": True, "bootstrap": not equal_weights, "seed": int(seed)},
    )
    _warn_truncation(out)
    return out


def _warn_truncation(marginals):
    if marginals.truncation_warning():
        frac = float(np.max(marginals.truncation_fraction()))
        marginals.metadata["truncation_warning"] = True
        warnings.warn(
            f"truncate-and-rescale fired in {frac:.1%} of posterior draws",
            RuntimeWarning,
            stacklevel=3,
        )


# ----------------------------------------------------------------------
# posterior summaries


@dataclass
class MeasureSummary:
    """Posterior summary of one measure.

    ``log_*`` fields are on the log scale for ratio measures and equal the
    plain fields otherwise.  ``draws`` holds the per-draw log-scale values.
    """

    kind: str
    log_point: float
    log_lower: float
    log_upper: float
    significant: bool
    n_undefined: int
    draws: np.ndarray = field(repr=False)

    @property
    def is_ratio(self):
        return self.kind in RATIO_KINDS

    def _scale(self, v):
        return float(np.exp(v)) if self.is_ratio else float(v)

    @property
    def point(self):
        return self._scale(self.log_point)

    @property
    def interval(self):
        return self._scale(self.log_lower), self._scale(self.log_upper)

    def to_dict(self):
        lo, hi = self.interval
        return {
            "measure": self.kind,
            "scale": "ratio" if self.is_ratio else "difference",
            "point": self.point,
            "lower": lo,
            "upper": hi,
            "log_point": self.log_point,
            "log_lower": self.log_lower,
            "log_upper": self.log_upper,
            "significant": self.significant,
            "n_undefined": self.n_undefined,
        }


def measure_log_draws(marginals, weight_kind="control", measure_kinds=MEASURE_KINDS):
    """Per-draw log-scale values of each measure, arrays of shape (..., S)."""
    eff = breakpoint_effects(marginals.control, marginals.treatment)
    w = weights(marginals.control, marginals.treatment, weight_kind, check=False)
    out = {}
    for kind in measure_kinds:
        out[kind] = summary_log_values(eff, w, kind)
    return out


def interval(log_draws, level=0.95):
    """Median and equal-tailed interval over the last axis, ignoring NaN."""
    tail = 50.0 * (1.0 - level)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        q = np.nanpercentile(log_draws, [50.0, tail, 100.0 - tail], axis=-1)
    return q[0], q[1], q[2]


def significant(log_draws, level=0.95):
    """Whether the equal-tailed interval excludes 0 (log scale), per target."""
    _, lo, hi = interval(log_draws, level)
    return (lo > 0) | (hi < 0)


def summarize_draws(marginals, weight_kind="control", measure_kinds=("wOR",), level=0.95):
    """Point (posterior median), interval and significance for each measure.

    Weights are recomputed from every draw's own control distribution (or
    the arm average for the ``*-overall`` kinds).  Draws in which a
    positively weighted breakpoint is undefined are dropped and counted.

    Returns
    -------
    dict
        ``{kind: MeasureSummary}``.
    """
    if marginals.control.ndim != 2:
        raise ValueError("summarize_draws takes single-target draws; index the batch first")
    if marginals.n_draws == 0:
        raise ValueError("no draws to summarize")
    out = {}
    for kind, v in measure_log_draws(marginals, weight_kind, measure_kinds).items():
        undefined = int(np.isnan(v).sum())
        if undefined == v.size:
            raise ValueError(f"{kind} is undefined in every posterior draw")
        mid, lo, hi = interval(v, level)
        out[kind] = MeasureSummary(
            kind=kind,
            log_point=float(mid),
            log_lower=float(lo),
            log_upper=float(hi),
            significant=bool(lo > 0 or hi < 0),
            n_undefined=undefined,
            draws=v,
        )
    return out


def breakpoint_summary(marginals, level=0.95):
    """Median and interval of every cumulative effect at every breakpoint.

    Returns a dict keyed by effect name with ``(point, lower, upper)``
    arrays of length K-1 on the log scale for ratio effects.
    """
    eff = breakpoint_effects(marginals.control, marginals.treatment)
    out = {}
    for name in ("log_or", "rd", "log_rr_plus", "log_rr_minus"):
        values = np.moveaxis(getattr(eff, name), -1, 0)  # (K-1, S)
        out[name] = interval(values, level)
    return out


def mean_weights(marginals, weight_kind="control"):
    """Posterior mean of the normalized breakpoint weights."""
    w = weights(marginals.control, marginals.treatment, weight_kind, check=False).values
    with np.errstate(invalid="ignore"):
        w = w / w.sum(axis=-1, keepdims=True)
    return np.nanmean(w, axis=-2)
