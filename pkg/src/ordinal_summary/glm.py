"""Frequentist comparators: dichotomized logistic regression and net benefit."""

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit, log_expit

Z975 = stats.norm.ppf(0.975)
IRLS_TOL = 1e-10
IRLS_MAX_ITER = 50
RIDGE = 1e-8


@dataclass
class BinaryFit:
    """Treatment log-OR of P(Y <= k) from a logistic fit."""

    k: int
    log_or: float
    se: float
    ci95: tuple
    converged: bool
    message: str = ""
    n_iter: int = 0

    @property
    def odds_ratio(self):
        return float(np.exp(self.log_or))

    @property
    def significant(self):
        lo, hi = self.ci95
        return bool(self.converged and (lo > 1.0 or hi < 1.0))


def irls(design, events, trials, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER):
    """Binomial logistic MLE on grouped rows.

    Returns ``(coef, cov, converged, n_iter)``.  A tiny ridge is added when
    the weighted cross-product is singular.
    """
    design = np.asarray(design, dtype=float)
    events = np.asarray(events, dtype=float)
    trials = np.asarray(trials, dtype=float)
    coef = np.zeros(design.shape[1])
    ll_old = -np.inf
    converged = False
    info = None
    it = 0
    for it in range(1, max_iter + 1):
        eta = design @ coef
        mu = expit(eta)
        w = trials * mu * (1.0 - mu)
        info = design.T @ (w[:, None] * design)
        score = design.T @ (events - trials * mu)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            info = info + RIDGE * np.eye(info.shape[0])
            step = np.linalg.solve(info, score)
        coef = coef + step
        eta = design @ coef
        ll = float(np.sum(events * log_expit(eta) + (trials - events) * log_expit(-eta)))
        if np.isfinite(ll_old) and abs(ll - ll_old) <= tol * (abs(ll) + tol):
            converged = True
            break
        ll_old = ll
    mu = expit(design @ coef)
    w = trials * mu * (1.0 - mu)
    info = design.T @ (w[:, None] * design)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.inv(info + RIDGE * np.eye(info.shape[0]))
    return coef, cov, converged, it


def _separated(design, events, trials, coef):
    # an arm with no events or only events is separated whatever the covariates
    for arm in (0.0, 1.0):
        rows = design[:, 1] == arm
        e, t = events[rows].sum(), trials[rows].sum()
        if e == 0 or e == t:
            return True
    mu = expit(design @ coef)
    used = trials > 0
    return bool(np.any(mu[used] < 1e-8) or np.any(mu[used] > 1 - 1e-8))


def fit_binary_logistic(dataset, k, covariates=True):
    """Logistic regression of ``Y <= k`` on treatment (and covariates).

    The treatment coefficient is the log odds ratio of the better outcome
    ``Y <= k``, so values above zero favour treatment.  Separation and
    non-convergence are reported through ``converged`` and ``message``.
    """
    K = dataset.n_levels
    if not 1 <= k <= K - 1:
        raise ValueError(f"breakpoint k must be in 1..{K - 1}")
    if not dataset.has_both_arms():
        raise ValueError("both arms must be present")
    X = dataset.X if covariates else np.zeros((dataset.n, 0))
    keys = np.column_stack([dataset.treated.astype(float), X])
    rows, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    trials = np.bincount(inverse, minlength=rows.shape[0]).astype(float)
    events = np.bincount(inverse, weights=(dataset.y <= k).astype(float), minlength=rows.shape[0])
    design = np.column_stack([np.ones(rows.shape[0]), rows])
    # drop covariate columns that are constant (absorbed by the intercept)
    keep = np.r_[True, True, np.ptp(rows[:, 1:], axis=0) > 0] if rows.shape[1] > 1 else np.ones(2, bool)
    design = design[:, keep]

    coef, cov, converged, n_iter = irls(design, events, trials)
    message = ""
    if _separated(design, events, trials, coef) or not np.all(np.isfinite(coef)):
        converged = False
        message = "separation: fitted probabilities reach 0 or 1"
    elif not converged:
        message = f"IRLS did not converge in {IRLS_MAX_ITER} iterations"
    log_or = float(coef[1])
    se = float(np.sqrt(cov[1, 1])) if np.isfinite(cov[1, 1]) and cov[1, 1] > 0 else float("nan")
    with np.errstate(over="ignore"):
        ci = (float(np.exp(log_or - Z975 * se)), float(np.exp(log_or + Z975 * se)))
    return BinaryFit(k=k, log_or=log_or, se=se, ci95=ci, converged=converged, message=message, n_iter=n_iter)


# ----------------------------------------------------------------------
# net benefit


@dataclass
class NetBenefit:
    estimate: float
    se: float
    ci95: tuple

    @property
    def significant(self):
        lo, hi = self.ci95
        return bool(lo > 0 or hi < 0)


def population_net_benefit(control, treatment):
    """P(Y_t < Y_c) - P(Y_t > Y_c) for independent draws (lower is better)."""
    pc = np.asarray(control, dtype=float)
    pt = np.asarray(treatment, dtype=float)
    # P(Y_c > j) and P(Y_c < j) for every level j
    above = np.cumsum(pc[..., ::-1], axis=-1)[..., ::-1] - pc
    below = np.cumsum(pc, axis=-1) - pc
    return np.sum(pt * (above - below), axis=-1)


def net_benefit_from_counts(control_counts, treatment_counts):
    """Net benefit with the two-sample U-statistic variance, from arm counts.

    Accepts arrays of shape (..., K) so a batch of trials is handled at once.
    """
    nc_k = np.asarray(control_counts, dtype=float)
    nt_k = np.asarray(treatment_counts, dtype=float)
    nc = nc_k.sum(axis=-1, keepdims=True)
    nt = nt_k.sum(axis=-1, keepdims=True)
    pc, pt = nc_k / nc, nt_k / nt
    # placement scores: each treated level vs the control arm, and vice versa
    score_t = (np.cumsum(pc[..., ::-1], axis=-1)[..., ::-1] - pc) - (np.cumsum(pc, axis=-1) - pc)
    score_c = (np.cumsum(pt, axis=-1) - pt) - (np.cumsum(pt[..., ::-1], axis=-1)[..., ::-1] - pt)
    est = np.sum(pt * score_t, axis=-1)
    nc, nt = nc[..., 0], nt[..., 0]
    var_t = (np.sum(nt_k * score_t**2, axis=-1) - nt * est**2) / np.maximum(nt - 1, 1)
    var_c = (np.sum(nc_k * score_c**2, axis=-1) - nc * est**2) / np.maximum(nc - 1, 1)
    se = np.sqrt(np.maximum(var_t / nt + var_c / nc, 0.0))
    return est, se


def net_benefit(dataset):
    """Net benefit of treatment with a 95% normal-approximation interval."""
    if not dataset.has_both_arms():
        raise ValueError("both arms must be nonempty")
    counts = dataset.arm_counts()
    est, se = net_benefit_from_counts(counts[0], counts[1])
    est, se = float(est), float(se)
    return NetBenefit(estimate=est, se=se, ci95=(float(est - Z975 * se), float(est + Z975 * se)))
