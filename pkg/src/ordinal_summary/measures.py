"""Breakpoint effects, weighting schemes and weighted summary measures.

Every function here accepts probability vectors with arbitrary leading batch
dimensions (shape ``(..., K)``), so the same code serves a single pair of
outcome distributions and a stack of posterior draws.  Ratio measures are kept
on the log scale internally.
"""

from dataclasses import dataclass

import numpy as np

PROB_TOL = 1e-12

RATIO_KINDS = ("wOR", "wRRplus", "wRRminus", "AOR", "ARRplus", "ARRminus")
DIFFERENCE_KINDS = ("wRD", "ARD")
MEASURE_KINDS = ("wOR", "wRD", "wRRplus", "wRRminus", "AOR", "ARD", "ARRplus", "ARRminus")

# which breakpoint effect each summary aggregates, and whether it ignores weights
_MEASURE_EFFECT = {
    "wOR": ("log_or", False),
    "wRD": ("rd", False),
    "wRRplus": ("log_rr_plus", False),
    "wRRminus": ("log_rr_minus", False),
    "AOR": ("log_or", True),
    "ARD": ("rd", True),
    "ARRplus": ("log_rr_plus", True),
    "ARRminus": ("log_rr_minus", True),
}

WEIGHT_KINDS = (
    "control",
    "clayton",
    "sum",
    "cumulative",
    "uniform",
    "sum-overall",
    "cumulative-overall",
)
_WEIGHT_ALIASES = {"clayton-overall": "clayton", "sum-only": "sum", "cumulative-only": "cumulative"}
_NEEDS_TREATMENT = ("clayton", "sum-overall", "cumulative-overall")


class UndefinedEffectError(ValueError):
    """A positively weighted breakpoint has an infinite or undefined effect."""


def check_dist(probs, tol=PROB_TOL):
    """Validate an outcome distribution and renormalize it exactly.

    Parameters
    ----------
    probs : array_like, shape (..., K)
        Cell probabilities over ``K >= 2`` ordered levels.
    tol : float
        Allowed deviation of each row sum from one.

    Returns
    -------
    ndarray
        A float copy whose rows sum to one.
    """
    p = np.array(probs, dtype=float)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise ValueError("an outcome distribution needs at least two levels")
    if not np.all(np.isfinite(p)):
        raise ValueError("outcome probabilities must be finite")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("outcome probabilities must lie in [0, 1]")
    total = p.sum(axis=-1, keepdims=True)
    if np.any(np.abs(total - 1.0) > tol):
        raise ValueError(f"outcome probabilities must sum to 1 (got {np.ravel(total)[:3]})")
    return p / total


def cumulative(probs):
    """Cumulative probabilities P(Y <= k) for k = 1..K-1."""
    p = np.asarray(probs, dtype=float)
    return np.cumsum(p, axis=-1)[..., :-1]


def _upper_tail(p):
    # P(Y > k) summed from the top so it stays accurate near 1
    return np.cumsum(p[..., ::-1], axis=-1)[..., ::-1][..., 1:]


def reverse(probs):
    """Distribution of the same outcome encoded worst-to-best."""
    return np.asarray(probs, dtype=float)[..., ::-1].copy()


def insert_level(probs, position):
    """Insert a zero-probability level so it becomes level ``position + 1``."""
    p = np.asarray(probs, dtype=float)
    return np.insert(p, position, 0.0, axis=-1)


@dataclass(frozen=True)
class BreakpointEffects:
    """Treatment-versus-control effects at each of the K-1 breakpoints.

    Ratio effects are stored on the log scale.  Entries that would be
    infinite or indeterminate are NaN.
    """

    log_or: np.ndarray
    rd: np.ndarray
    log_rr_plus: np.ndarray
    log_rr_minus: np.ndarray

    @property
    def odds_ratio(self):
        return np.exp(self.log_or)

    @property
    def rr_plus(self):
        return np.exp(self.log_rr_plus)

    @property
    def rr_minus(self):
        return np.exp(self.log_rr_minus)

    def defined(self, effect="log_or"):
        return ~np.isnan(getattr(self, effect))

    def __len__(self):
        return self.rd.shape[-1]


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def breakpoint_effects(control, treatment):
    """Cumulative OR, RD, RR+ and RR- at every breakpoint.

    ``RR+`` compares P(Y <= k) between arms and ``RR-`` is
    (1 - P_c(Y <= k)) / (1 - P_t(Y <= k)), so values above one favour the
    treatment arm for both.
    """
    pc = np.asarray(control, dtype=float)
    pt = np.asarray(treatment, dtype=float)
    if pc.shape[-1] != pt.shape[-1]:
        raise ValueError(
            f"control has {pc.shape[-1]} levels but treatment has {pt.shape[-1]}"
        )
    fc, ft = cumulative(pc), cumulative(pt)
    sc, st = _upper_tail(pc), _upper_tail(pt)
    log_fc, log_ft = _safe_log(fc), _safe_log(ft)
    log_sc, log_st = _safe_log(sc), _safe_log(st)

    lower_zero = (fc <= 0) | (ft <= 0)
    upper_zero = (sc <= 0) | (st <= 0)
    with np.errstate(invalid="ignore"):
        log_or = np.where(lower_zero | upper_zero, np.nan, (log_ft - log_st) - (log_fc - log_sc))
        log_rr_plus = np.where(lower_zero, np.nan, log_ft - log_fc)
        log_rr_minus = np.where(upper_zero, np.nan, log_sc - log_st)
    return BreakpointEffects(log_or=log_or, rd=ft - fc, log_rr_plus=log_rr_plus, log_rr_minus=log_rr_minus)


@dataclass(frozen=True)
class WeightScheme:
    kind: str
    values: np.ndarray

    def normalized(self):
        return self.values / self.values.sum(axis=-1, keepdims=True)


def _resolve_weight_kind(kind):
    kind = _WEIGHT_ALIASES.get(kind, kind)
    if kind not in WEIGHT_KINDS:
        raise ValueError(f"unknown weight kind {kind!r}; choose from {WEIGHT_KINDS}")
    return kind


def _weight_values(p, kind):
    f = cumulative(p)
    s = _upper_tail(p)
    adjacent = p[..., :-1] + p[..., 1:]
    spread = f * s
    if kind in ("control", "clayton"):
        return adjacent * spread
    if kind in ("sum", "sum-overall"):
        return adjacent
    if kind in ("cumulative", "cumulative-overall"):
        return spread
    return np.ones_like(f)


def weights(control, treatment=None, kind="control", check=True):
    """Breakpoint weights for the weighted summary measures.

    ``control``, ``sum``, ``cumulative`` and ``uniform`` use only the control
    distribution.  ``clayton`` and the ``*-overall`` variants evaluate the same
    formulas at the average of the two arm distributions and therefore need
    ``treatment``.
    """
    kind = _resolve_weight_kind(kind)
    pc = np.asarray(control, dtype=float)
    if kind in _NEEDS_TREATMENT:
        if treatment is None:
            raise ValueError(f"weight kind {kind!r} needs the treatment distribution")
        basis = 0.5 * (pc + np.asarray(treatment, dtype=float))
    else:
        basis = pc
    values = _weight_values(basis, kind)
    if check and np.any(values.sum(axis=-1) <= 0):
        raise ValueError("weights are all zero; the distribution is degenerate")
    return WeightScheme(kind=kind, values=values)


@dataclass(frozen=True)
class SummaryMeasure:
    """A population summary; ``estimate`` is on the log scale for ratio kinds."""

    kind: str
    estimate: float

    @property
    def is_ratio(self):
        return self.kind in RATIO_KINDS

    @property
    def null_value(self):
        return 1.0 if self.is_ratio else 0.0

    @property
    def value(self):
        return float(np.exp(self.estimate)) if self.is_ratio else float(self.estimate)


def weighted_mean(values, w):
    """Weighted mean over the last axis; zero-weight entries never contribute.

    Returns NaN where a positively weighted entry is NaN.
    """
    values = np.asarray(values, dtype=float)
    w = np.broadcast_to(np.asarray(w, dtype=float), values.shape)
    active = w > 0
    bad = np.any(active & np.isnan(values), axis=-1)
    terms = np.where(active, w * np.where(np.isnan(values), 0.0, values), 0.0)
    total = w.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = terms.sum(axis=-1) / total
    return np.where(bad | (total <= 0), np.nan, out)


def summary_log_values(effects, w, kind):
    """Vectorized core of :func:`summarize` (NaN marks undefined measures)."""
    if kind not in _MEASURE_EFFECT:
        raise ValueError(f"unknown measure {kind!r}; choose from {MEASURE_KINDS}")
    attr, unweighted = _MEASURE_EFFECT[kind]
    values = getattr(effects, attr)
    if unweighted:
        w = np.ones(values.shape[-1])
    elif isinstance(w, WeightScheme):
        w = w.values
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != values.shape[-1]:
        raise ValueError("weights and effects have different numbers of breakpoints")
    return weighted_mean(values, w)


def summarize(effects, w, kind):
    """Aggregate breakpoint effects into one weighted summary measure.

    ``AOR``, ``ARD``, ``ARRplus`` and ``ARRminus`` use uniform weights and
    ignore ``w``.
    """
    est = summary_log_values(effects, w, kind)
    if np.ndim(est) == 0:
        if np.isnan(est):
            raise UndefinedEffectError(
                f"{kind} is undefined: a positively weighted breakpoint has an infinite effect"
            )
        return SummaryMeasure(kind=kind, estimate=float(est))
    return est


def true_log_summary(scenario, kind="wOR", weight_kind="control"):
    """Population value (log scale for ratios) of a measure for a scenario."""
    control = check_dist(scenario.control)
    treatment = check_dist(scenario.treatment)
    w = weights(control, treatment, weight_kind)
    return summarize(breakpoint_effects(control, treatment), w, kind).estimate


def apply_constant_odds_ratio(control, odds_ratio):
    """Treatment distribution with the same cumulative OR at every breakpoint."""
    pc = check_dist(control)
    f = cumulative(pc)
    with np.errstate(divide="ignore"):
        logit = np.log(f) - np.log1p(-f)
    ft = 1.0 / (1.0 + np.exp(-(logit + np.log(odds_ratio))))
    return np.diff(np.concatenate([[0.0], ft, [1.0]]))
