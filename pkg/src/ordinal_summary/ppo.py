"""Bayesian proportional-odds (PO) and partial-proportional-odds (PPO) models.

The cumulative-logit model is

    P(Y <= k | A, X) = expit(alpha_k + (beta + tau_{k-1} [k >= 2]) * s_A + gamma . X),

with centred treatment coding ``s_A = I(A = t) - 0.5``.  The PO family fixes
``tau = 0``.

Sampling happens on an unconstrained vector

    theta = (z_1..z_{K-1}, beta, tau_1..tau_{K-2}, gamma_1..gamma_p)

where ``z`` is the additive log-ratio transform of the baseline cell
probabilities ``q = softmax(z, 0)`` and ``alpha_k = logit(q_1 + ... + q_k)``.
The intercepts are therefore increasing by construction and the symmetric
Dirichlet prior on ``q`` applies directly.

Data are collapsed into covariate patterns (unique ``(arm, x)`` rows with a
vector of outcome counts).  :class:`PpoModel` evaluates the log posterior for a
batch of independent datasets sharing one pattern layout, which is what lets
the simulation harness run hundreds of replicate fits in one vectorized pass.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, gammaln

FAMILIES = ("PO", "PPO")
_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def default_dirichlet_concentration(n_levels):
    return 1.0 / (0.8 + 0.35 * max(n_levels, 3))


@dataclass
class ModelConfig:
    """Model family, dimensions and prior hyperparameters.

    ``prior_sd_*`` may be ``inf`` for a flat prior on that block.
    ``include_treatment=False`` drops ``beta`` and ``tau`` (intercept-only
    and covariate-only models).
    """

    family: str = "PPO"
    n_levels: int = 5
    n_covariates: int = 0
    prior_sd_beta: float = 100.0
    prior_sd_tau: float = 100.0
    prior_sd_gamma: float = 100.0
    dirichlet_conc: float = None
    include_treatment: bool = True

    def __post_init__(self):
        self.family = self.family.upper()
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.n_levels < 2:
            raise ValueError("an ordinal outcome needs at least two levels")
        if self.n_covariates < 0:
            raise ValueError("n_covariates must be nonnegative")
        if self.dirichlet_conc is None:
            self.dirichlet_conc = default_dirichlet_concentration(self.n_levels)
        for name in ("prior_sd_beta", "prior_sd_tau", "prior_sd_gamma", "dirichlet_conc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n_tau(self):
        if self.family == "PO" or not self.include_treatment:
            return 0
        return max(self.n_levels - 2, 0)

    @property
    def n_params(self):
        return self.n_levels - 1 + int(self.include_treatment) + self.n_tau + self.n_covariates

    def blocks(self):
        """Index arrays of the parameter blocks present in this model."""
        k1 = self.n_levels - 1
        out = {"baseline": np.arange(k1)}
        pos = k1
        if self.include_treatment:
            out["beta"] = np.array([pos])
            pos += 1
        if self.n_tau:
            out["tau"] = np.arange(pos, pos + self.n_tau)
            pos += self.n_tau
        if self.n_covariates:
            out["gamma"] = np.arange(pos, pos + self.n_covariates)
        return out

    def to_dict(self):
        return {
            "family": self.family,
            "n_levels": self.n_levels,
            "n_covariates": self.n_covariates,
            "prior_sd_beta": self.prior_sd_beta,
            "prior_sd_tau": self.prior_sd_tau,
            "prior_sd_gamma": self.prior_sd_gamma,
            "dirichlet_conc": self.dirichlet_conc,
            "include_treatment": self.include_treatment,
        }


@dataclass
class PpoParams:
    alpha: np.ndarray
    beta: float = 0.0
    tau: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.beta = float(self.beta)
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if self.tau.size > max(self.alpha.size - 1, 0):
            raise ValueError("tau has more entries than breakpoints 2..K-1")
        values = np.concatenate([self.alpha, [self.beta], self.tau, self.gamma])
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")
        if np.any(np.diff(self.alpha) <= 0):
            raise ValueError("alpha must be strictly increasing")

    @property
    def n_levels(self):
        return self.alpha.size + 1

    def tau_full(self):
        """Treatment offsets per breakpoint (zero at the first)."""
        out = np.zeros(self.alpha.size)
        out[1 : 1 + self.tau.size] = self.tau
        return out


@dataclass
class TrialDataset:
    """Individual records of a two-arm trial with an ordinal outcome.

    ``y`` holds levels ``1..n_levels``; ``treated`` is True for the
    treatment arm; ``X`` is an ``(n, p)`` covariate matrix.
    """

    treated: np.ndarray
    y: np.ndarray
    n_levels: int
    X: np.ndarray = None

    def __post_init__(self):
        self.treated = np.asarray(self.treated, dtype=bool).reshape(-1)
        self.y = np.asarray(self.y).reshape(-1)
        if self.y.size and not np.issubdtype(self.y.dtype, np.integer):
            if not np.all(self.y == np.round(self.y)):
                raise ValueError("outcome levels must be integers")
        self.y = self.y.astype(np.int64)
        n = self.y.size
        if self.treated.size != n:
            raise ValueError("treated and y have different lengths")
        if self.X is None:
            self.X = np.zeros((n, 0))
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.X.shape[0] != n:
            raise ValueError("X and y have different numbers of rows")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("covariates must be finite")
        if self.n_levels < 2:
            raise ValueError("n_levels must be at least 2")
        if n and (self.y.min() < 1 or self.y.max() > self.n_levels):
            raise ValueError(f"outcome levels must lie in 1..{self.n_levels}")

    @property
    def n(self):
        return self.y.size

    @property
    def p(self):
        return self.X.shape[1]

    def has_both_arms(self):
        return bool(self.treated.any() and (~self.treated).any())

    def arm_counts(self):
        """Outcome counts, shape (2, K): row 0 control, row 1 treatment."""
        out = np.zeros((2, self.n_levels))
        np.add.at(out, (self.treated.astype(int), self.y - 1), 1.0)
        return out

    def patterns(self):
        """Collapse records into unique (arm, covariate) rows.

        Returns ``(sign, X, counts)`` with ``sign = treated - 0.5``.
        """
        keys = np.column_stack([self.treated.astype(float), self.X])
        if self.n == 0:
            return np.zeros(0), np.zeros((0, self.p)), np.zeros((0, self.n_levels))
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        counts = np.zeros((uniq.shape[0], self.n_levels))
        np.add.at(counts, (inverse, self.y - 1), 1.0)
        return uniq[:, 0] - 0.5, uniq[:, 1:], counts

    def subset(self, mask):
        mask = np.asarray(mask)
        return TrialDataset(self.treated[mask], self.y[mask], self.n_levels, self.X[mask])


def _arm_sign(arm):
    if isinstance(arm, str):
        if arm not in ("c", "t"):
            raise ValueError("arm must be 'c' or 't'")
        return 0.5 if arm == "t" else -0.5
    return 0.5 if bool(arm) else -0.5


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


class PpoModel:
    """Log posterior of a PO/PPO model for a batch of pattern datasets.

    Parameters
    ----------
    sign : array, shape (B, P)
        Centred treatment code of each pattern.
    X : array, shape (B, P, p)
    counts : array, shape (B, P, K)
        Outcome counts per pattern (may be non-integer expected counts).
    config : ModelConfig
    parameterization : {"baseline", "arm"}, optional
        Coordinates of ``theta``.  ``"baseline"`` is
        ``(z, beta, tau, gamma)`` with ``z`` the log-ratio coordinates of the
        baseline simplex.  ``"arm"`` (PPO only) is ``(z_c, z_t, gamma)``, the
        log-ratio coordinates of each arm's simplex at ``x = 0``.  Because
        ``gamma . x`` shifts every breakpoint equally, every ``"arm"`` state is
        feasible, so the posterior is the same as the barrier-restricted one
        in baseline coordinates without the barrier.  Defaults to ``"arm"``
        for PPO and ``"baseline"`` otherwise.
    pivot : {"mode", "last"}
        Reference cell of each log-ratio transform.  ``"mode"`` uses the
        most frequent observed level of the target, which keeps the
        coordinates of rare levels close to independent.
    """

    def __init__(self, sign, X, counts, config, parameterization=None, pivot="mode"):
        self.config = config
        self.sign = np.asarray(sign, dtype=float)
        self.counts = np.asarray(counts, dtype=float)
        X = np.asarray(X, dtype=float)
        if self.sign.ndim == 1:
            self.sign = self.sign[None]
            self.counts = self.counts[None]
            X = X[None]
        self.X = X
        B, P, K = self.counts.shape
        if K != config.n_levels:
            raise ValueError(f"counts have {K} levels but the model expects {config.n_levels}")
        if self.X.shape != (B, P, config.n_covariates):
            raise ValueError("covariate array does not match the model's covariate count")
        if self.sign.shape != (B, P):
            raise ValueError("sign array does not match the counts")
        if parameterization is None:
            parameterization = "arm" if config.family == "PPO" and config.include_treatment else "baseline"
        if parameterization not in ("baseline", "arm"):
            raise ValueError("parameterization must be 'baseline' or 'arm'")
        if parameterization == "arm" and (config.family != "PPO" or not config.include_treatment):
            raise ValueError("arm coordinates need a PPO model with a treatment effect")
        if pivot not in ("mode", "last"):
            raise ValueError("pivot must be 'mode' or 'last'")
        self.parameterization = parameterization
        self.pivot_rule = pivot
        self.observed = self.counts.sum(axis=-1) > 0
        self.blocks = self._blocks()
        self.pivots = self._choose_pivots(pivot)
        # one-hot maps from log-ratio coordinates to full K-vectors: (B, n_simplex, K-1, K)
        eye = np.eye(K)
        self._embed = np.stack(
            [np.stack([np.delete(eye, r, axis=0) for r in row]) for row in self.pivots]
        )

    @classmethod
    def from_dataset(cls, dataset, config, **kwargs):
        sign, X, counts = dataset.patterns()
        return cls(sign, X, counts, config, **kwargs)

    @classmethod
    def from_datasets(cls, datasets, config, **kwargs):
        """Batch of covariate-free datasets collapsed to two arm patterns each."""
        counts = np.stack([d.arm_counts() for d in datasets])
        return cls.from_arm_counts(counts, config, **kwargs)

    @classmethod
    def from_arm_counts(cls, counts, config, **kwargs):
        """Covariate-free batch from counts of shape (B, 2, K), control first."""
        counts = np.asarray(counts, dtype=float)
        B = counts.shape[0]
        sign = np.tile([-0.5, 0.5], (B, 1))
        return cls(sign, np.zeros((B, 2, 0)), counts, config, **kwargs)

    def select(self, idx):
        """Model for a subset of batch targets, keeping the coordinate layout."""
        idx = np.atleast_1d(np.asarray(idx))
        return PpoModel(self.sign[idx], self.X[idx], self.counts[idx], self.config,
                        parameterization=self.parameterization, pivot=self.pivot_rule)

    @property
    def batch_size(self):
        return self.counts.shape[0]

    @property
    def n_params(self):
        return self.config.n_params

    @property
    def _arm(self):
        return self.parameterization == "arm"

    def _blocks(self):
        cfg = self.config
        if not self._arm:
            return cfg.blocks()
        k1 = cfg.n_levels - 1
        out = {"control": np.arange(k1), "treatment": np.arange(k1, 2 * k1)}
        if cfg.n_covariates:
            out["gamma"] = np.arange(2 * k1, 2 * k1 + cfg.n_covariates)
        return out

    def _choose_pivots(self, pivot):
        K = self.config.n_levels
        n_simplex = 2 if self._arm else 1
        B = self.batch_size
        if pivot == "last":
            return np.full((B, n_simplex), K - 1, dtype=int)
        pooled = self.counts.sum(axis=1)
        if not self._arm:
            return np.argmax(pooled, axis=-1)[:, None]
        out = np.empty((B, 2), dtype=int)
        for j, treated in enumerate((False, True)):
            arm = np.where(((self.sign > 0) == treated)[..., None], self.counts, 0.0).sum(axis=1)
            empty = arm.sum(axis=-1) == 0
            out[:, j] = np.where(empty, np.argmax(pooled, axis=-1), np.argmax(arm, axis=-1))
        return out

    def parameter_names(self):
        cfg = self.config
        k = range(1, cfg.n_levels)
        if self._arm:
            names = [f"z_c[{i}]" for i in k] + [f"z_t[{i}]" for i in k]
        else:
            names = [f"z[{i}]" for i in k]
            if cfg.include_treatment:
                names.append("beta")
            names += [f"tau[{i}]" for i in range(1, cfg.n_tau + 1)]
        names += [f"gamma[{i}]" for i in range(1, cfg.n_covariates + 1)]
        return names

    # ------------------------------------------------------------------
    # parameter transforms

    @staticmethod
    def _simplex(z, embed):
        """Log cell probs, log P(Y<=k) and log P(Y>k) from log-ratio coordinates.

        ``z`` has shape (B, ..., K-1) and ``embed`` (B, K-1, K).
        """
        full = np.einsum("b...j,bjk->b...k", z, embed)
        logq = full - np.logaddexp.reduce(full, axis=-1, keepdims=True)
        log_f = np.logaddexp.accumulate(logq, axis=-1)[..., :-1]
        log_s = np.logaddexp.accumulate(logq[..., ::-1], axis=-1)[..., ::-1][..., 1:]
        return logq, log_f, log_s

    @staticmethod
    def _chain(v, simplex, embed):
        """Pull d/d eta (cumulative logits) back to the log-ratio coordinates.

        With ``q`` the full cell vector, d eta_k / d q_j = [j<=k]/F_k - [j>k]/S_k
        and the softmax Jacobian reduces the gradient to ``q_j u_j``.
        """
        logq, log_f, log_s = simplex
        a = v * np.exp(-log_f)
        b = v * np.exp(-log_s)
        zero = np.zeros(v.shape[:-1] + (1,))
        tail_a = np.concatenate([np.cumsum(a[..., ::-1], axis=-1)[..., ::-1], zero], axis=-1)
        head_b = np.concatenate([zero, np.cumsum(b, axis=-1)], axis=-1)
        return np.einsum("b...k,bjk->b...j", np.exp(logq) * (tail_a - head_b), embed)

    def _state(self, theta, embed=None):
        """Natural parameters plus the simplex pieces, for theta (B, ..., d)."""
        cfg = self.config
        embed = self._embed if embed is None else embed
        k1 = cfg.n_levels - 1
        lead = theta.shape[:-1]
        gamma = theta[..., self.blocks["gamma"]] if "gamma" in self.blocks else np.zeros(lead + (0,))
        if self._arm:
            simp = [self._simplex(theta[..., j * k1 : (j + 1) * k1], embed[:, j]) for j in (0, 1)]
            eta_c, eta_t = (s[1] - s[2] for s in simp)
            alpha = 0.5 * (eta_c + eta_t)
            delta = eta_t - eta_c
        else:
            simp = [self._simplex(theta[..., :k1], embed[:, 0])]
            alpha = simp[0][1] - simp[0][2]
            beta = theta[..., self.blocks["beta"][0]] if "beta" in self.blocks else np.zeros(lead)
            delta = np.repeat(beta[..., None], k1, axis=-1)
            if "tau" in self.blocks:
                delta[..., 1:] += theta[..., self.blocks["tau"]]
        return alpha, delta, gamma, simp

    def natural(self, theta):
        """``(alpha, beta, tau, gamma)`` arrays for theta (B, ..., d).

        ``tau`` is padded to K-1 entries with a leading zero.
        """
        alpha, delta, gamma, _ = self._state(np.asarray(theta, dtype=float))
        beta = delta[..., 0]
        tau = delta - beta[..., None]
        return alpha, beta, tau, gamma

    def unpack(self, theta):
        """Alias of :meth:`natural` kept for symmetry with :meth:`to_theta`."""
        return self.natural(theta)

    def alpha(self, theta):
        return self.natural(theta)[0]

    def to_params(self, theta, b=0):
        """:class:`PpoParams` of one unconstrained vector of target ``b``."""
        theta = np.asarray(theta, dtype=float)[None]
        alpha, delta, gamma, _ = self._state(theta, self._embed[b : b + 1])
        n_tau = self.config.n_tau
        beta = float(delta[0, 0]) if self.config.include_treatment else 0.0
        return PpoParams(
            alpha=alpha[0],
            beta=beta,
            tau=delta[0, 1 : 1 + n_tau] - beta if n_tau else np.zeros(0),
            gamma=gamma[0],
        )

    def to_theta(self, params, b=0):
        """Unconstrained vector of target ``b`` for natural parameters."""
        cfg = self.config
        if params.alpha.size != cfg.n_levels - 1:
            raise ValueError("alpha has the wrong length for this model")
        piv = self.pivots[b]

        def ratios(eta, r):
            if np.any(np.diff(eta) <= 0):
                raise ValueError("these parameters are infeasible in arm coordinates")
            logq = self.log_cell_probs(eta)
            return np.delete(logq - logq[r], r)

        gamma = np.zeros(cfg.n_covariates)
        gamma[: params.gamma.size] = params.gamma[: cfg.n_covariates]
        if self._arm:
            delta = params.beta + params.tau_full()
            parts = [ratios(params.alpha - 0.5 * delta, piv[0]), ratios(params.alpha + 0.5 * delta, piv[1])]
        else:
            parts = [ratios(params.alpha, piv[0])]
            if cfg.include_treatment:
                parts.append([params.beta])
            if cfg.n_tau:
                tau = np.zeros(cfg.n_tau)
                tau[: params.tau.size] = params.tau
                parts.append(tau)
        parts.append(gamma)
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])

    # ------------------------------------------------------------------
    # densities

    def _eta(self, theta):
        """Linear predictors, shape (B, m, P, K-1), for theta (B, m, d)."""
        alpha, delta, gamma, simp = self._state(theta)
        eta = alpha[:, :, None, :] + self.sign[:, None, :, None] * delta[:, :, None, :]
        if self.config.n_covariates:
            eta = eta + np.einsum("bpj,bmj->bmp", self.X, gamma)[..., None]
        return eta, simp

    @staticmethod
    def log_cell_probs(eta):
        """Log cell probabilities from increasing linear predictors.

        Uses ``p_k = expit(eta_k) expit(-eta_{k-1}) (1 - exp(eta_{k-1} - eta_k))``
        which is accurate in both tails; infeasible cells give ``-inf``.
        """
        eta = np.asarray(eta, dtype=float)
        K1 = eta.shape[-1]
        out = np.empty(eta.shape[:-1] + (K1 + 1,))
        out[..., 0] = _log_sigmoid(eta[..., 0])
        out[..., -1] = _log_sigmoid(-eta[..., -1])
        if K1 > 1:
            gap = np.diff(eta, axis=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                log_gap = np.where(gap > 0, np.log(-np.expm1(-np.where(gap > 0, gap, 1.0))), -np.inf)
            out[..., 1:-1] = _log_sigmoid(eta[..., 1:]) + _log_sigmoid(-eta[..., :-1]) + log_gap
        return out

    def _infeasible(self, eta):
        if eta.shape[-1] < 2:
            return np.zeros(eta.shape[:2], dtype=bool)
        crossed = np.any(np.diff(eta, axis=-1) <= 0, axis=-1)  # (B, m, P)
        return np.any(crossed & self.observed[:, None, :], axis=-1)

    def _loglik(self, eta):
        logp = self.log_cell_probs(eta)
        counts = self.counts[:, None]
        with np.errstate(invalid="ignore"):
            ll = np.where(counts > 0, counts * logp, 0.0).sum(axis=(-1, -2))
        return np.where(self._infeasible(eta), -np.inf, ll)

    def log_likelihood(self, theta):
        """Batched log-likelihood; theta (B, m, d) -> (B, m)."""
        eta, _ = self._eta(np.asarray(theta, dtype=float))
        return self._loglik(eta)

    def _pull_back(self, g_alpha, g_delta, g_gamma, simp, shape):
        """Gradient in theta from gradients in (alpha, delta, gamma)."""
        grad = np.zeros(shape)
        k1 = self.config.n_levels - 1
        if self._arm:
            for j, sgn in ((0, -1.0), (1, 1.0)):
                grad[..., j * k1 : (j + 1) * k1] = self._chain(
                    0.5 * g_alpha + sgn * g_delta, simp[j], self._embed[:, j]
                )
        else:
            grad[..., :k1] = self._chain(g_alpha, simp[0], self._embed[:, 0])
            if "beta" in self.blocks:
                grad[..., self.blocks["beta"][0]] = g_delta.sum(axis=-1)
            if "tau" in self.blocks:
                grad[..., self.blocks["tau"]] = g_delta[..., 1:]
        if "gamma" in self.blocks:
            grad[..., self.blocks["gamma"]] = g_gamma
        return grad

    def log_likelihood_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        K = self.config.n_levels
        eta, simp = self._eta(theta)
        ll = self._loglik(eta)
        bad = ~np.isfinite(ll)

        # d log p_k / d eta_k and d log p_{k+1} / d eta_k
        own = expit(-eta)
        nxt = -expit(eta)
        if K > 2:
            gap = np.diff(eta, axis=-1)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                r = 1.0 / np.expm1(gap)
            own[..., 1:] += r
            nxt[..., :-1] -= r
        counts = self.counts[:, None]
        with np.errstate(invalid="ignore"):
            g = np.where(counts[..., :-1] > 0, counts[..., :-1] * own, 0.0)
            g = g + np.where(counts[..., 1:] > 0, counts[..., 1:] * nxt, 0.0)

        g_alpha = g.sum(axis=2)
        g_delta = np.einsum("bp,bmpk->bmk", self.sign, g)
        g_gamma = np.einsum("bmp,bpj->bmj", g.sum(axis=-1), self.X)
        with np.errstate(over="ignore", invalid="ignore"):
            grad = self._pull_back(g_alpha, g_delta, g_gamma, simp, theta.shape)
        grad[bad] = np.nan
        return ll, grad

    def _normal(self, values, sd):
        if not values.shape[-1] or not np.isfinite(sd):
            return 0.0, np.zeros(values.shape)
        lp = -0.5 * np.sum((values / sd) ** 2, axis=-1) - values.shape[-1] * (np.log(sd) + _HALF_LOG_2PI)
        return lp, -values / sd**2

    def _prior_and_grad(self, theta):
        cfg = self.config
        K = cfg.n_levels
        c = cfg.dirichlet_conc
        const = gammaln(K * c) - K * gammaln(c)
        alpha, delta, gamma, simp = self._state(theta)
        lp_g, g_gamma = self._normal(gamma, cfg.prior_sd_gamma)
        if not self._arm:
            # Dirichlet(c) on q plus log|dq/dz| = sum(log q)
            logq = simp[0][0]
            lp = const + c * logq.sum(axis=-1) + lp_g
            grad = np.zeros(theta.shape)
            grad[..., : K - 1] = c * (1.0 - K * np.einsum("b...k,bjk->b...j", np.exp(logq), self._embed[:, 0]))
            for name, sd in (("beta", cfg.prior_sd_beta), ("tau", cfg.prior_sd_tau)):
                if name in self.blocks:
                    v, gv = self._normal(theta[..., self.blocks[name]], sd)
                    lp = lp + v
                    grad[..., self.blocks[name]] = gv
            if "gamma" in self.blocks:
                grad[..., self.blocks["gamma"]] = g_gamma
            return lp, grad

        # natural-scale density of alpha: Dirichlet carried through prod F (1 - F)
        log_f, log_s = _log_sigmoid(alpha), _log_sigmoid(-alpha)
        logq = self.log_cell_probs(alpha)
        spread = log_f + log_s
        lp = const + (c - 1.0) * logq.sum(axis=-1) + spread.sum(axis=-1)
        g_alpha = (c - 1.0) * (np.exp(spread - logq[..., :-1]) - np.exp(spread - logq[..., 1:]))
        g_alpha += 1.0 - 2.0 * np.exp(log_f)
        # beta = delta_1 and tau_j = delta_{j+1} - delta_1
        lp_b, gb = self._normal(delta[..., :1], cfg.prior_sd_beta)
        lp_t, gt = self._normal(delta[..., 1:] - delta[..., :1], cfg.prior_sd_tau)
        g_delta = np.concatenate([gb - gt.sum(axis=-1, keepdims=True), gt], axis=-1)
        lp = lp + lp_b + lp_t + lp_g
        grad = self._pull_back(g_alpha, g_delta, g_gamma, simp, theta.shape)
        # log|d eta_a / d z_a| = sum log q_a - sum log F_a S_a for each arm
        for j, s in enumerate(simp):
            logq_a, log_f_a, log_s_a = s
            lp = lp + logq_a.sum(axis=-1) - (log_f_a + log_s_a).sum(axis=-1)
            k1 = K - 1
            emb = self._embed[:, j]
            grad[..., j * k1 : (j + 1) * k1] += (
                1.0 - K * np.einsum("b...k,bjk->b...j", np.exp(logq_a), emb)
                - self._chain(1.0 - 2.0 * np.exp(log_f_a), s, emb)
            )
        return lp, grad

    def log_prior(self, theta):
        """Log prior density of the unconstrained vector (Jacobian included)."""
        lp, _ = self._prior_and_grad(np.asarray(theta, dtype=float))
        return lp

    def log_posterior(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.log_likelihood(theta) + self.log_prior(theta)

    def log_posterior_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        ll, g_ll = self.log_likelihood_and_grad(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            lp, g_lp = self._prior_and_grad(theta)
        return ll + lp, g_ll + g_lp

    def pointwise_log_likelihood(self, theta):
        """Per-pattern log-likelihood contributions, shape (B, m, P)."""
        eta, _ = self._eta(np.asarray(theta, dtype=float))
        logp = self.log_cell_probs(eta)
        counts = self.counts[:, None]
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, counts * logp, 0.0).sum(axis=-1)

    # ------------------------------------------------------------------
    # starting values and curvature

    def initial_theta(self, pseudo_count=0.5):
        """Empirical log-ratios with all effects zero, shape (B, d).

        In arm coordinates each arm starts at its own empirical distribution.
        """
        K = self.config.n_levels
        theta = np.zeros((self.batch_size, self.n_params))
        if self._arm:
            tables = [
                np.where(((self.sign > 0) == treated)[..., None], self.counts, 0.0).sum(axis=1)
                for treated in (False, True)
            ]
        else:
            tables = [self.counts.sum(axis=1)]
        for j, table in enumerate(tables):
            logq = np.log(table + pseudo_count)
            ratios = np.einsum("bk,bjk->bj", logq, self._embed[:, j])
            ref = np.take_along_axis(logq, self.pivots[:, j : j + 1], axis=-1)
            theta[:, j * (K - 1) : (j + 1) * (K - 1)] = ratios - ref
        return theta

    def hessian(self, theta, step=1e-5):
        """Central-difference Hessian of the log posterior, theta (B, d)."""
        theta = np.asarray(theta, dtype=float)
        B, d = theta.shape
        shifts = np.eye(d) * step
        pts = np.concatenate([theta[:, None] + shifts, theta[:, None] - shifts], axis=1)
        _, g = self.log_posterior_and_grad(pts)
        H = (g[:, :d] - g[:, d:]) / (2 * step)
        return 0.5 * (H + np.swapaxes(H, -1, -2))


# ----------------------------------------------------------------------
# single-parameter-set helpers


def linear_predictor(params, arm, x=None, k=1):
    """eta_k for one arm and covariate vector (k is 1-based)."""
    K1 = params.alpha.size
    if not 1 <= k <= K1:
        raise IndexError(f"breakpoint k must be in 1..{K1}")
    s = _arm_sign(arm)
    eta = params.alpha[k - 1] + (params.beta + params.tau_full()[k - 1]) * s
    if params.gamma.size:
        x = np.zeros(params.gamma.size) if x is None else np.asarray(x, dtype=float)
        eta += float(params.gamma @ x)
    return float(eta)


def _etas(params, sign, X):
    eta = params.alpha + np.multiply.outer(sign, params.beta + params.tau_full())
    if params.gamma.size:
        eta = eta + (X @ params.gamma)[..., None]
    return eta


def cell_probs(params, arm, x=None):
    """Cell probabilities for one (arm, x); second value flags feasibility."""
    s = _arm_sign(arm)
    X = np.zeros((1, params.gamma.size)) if x is None else np.asarray(x, dtype=float).reshape(1, -1)
    eta = _etas(params, np.array([s]), X)[0]
    F = np.concatenate([[0.0], expit(eta), [1.0]])
    p = np.diff(F)
    return p, bool(np.all(p > 0))


def truncate_rescale(probs):
    """Clamp negative cells to zero and renormalize; also returns a fired mask."""
    p = np.asarray(probs, dtype=float)
    fired = np.any(p < 0, axis=-1)
    clipped = np.clip(p, 0.0, None)
    return clipped / clipped.sum(axis=-1, keepdims=True), fired


def marginal_probs_unadjusted(params):
    """Control and treatment outcome distributions of a covariate-free model.

    Infeasible PPO states are truncated at zero and rescaled.
    """
    if params.gamma.size:
        raise ValueError("marginal_probs_unadjusted needs a model without covariates")
    eta = _etas(params, np.array([-0.5, 0.5]), np.zeros((2, 0)))
    F = np.concatenate([np.zeros((2, 1)), expit(eta), np.ones((2, 1))], axis=1)
    probs, _ = truncate_rescale(np.diff(F, axis=1))
    return probs[0], probs[1]


def _model_for(params, dataset, config=None):
    if config is None:
        n_tau = params.tau.size
        config = ModelConfig(
            family="PPO" if n_tau else "PO",
            n_levels=params.n_levels,
            n_covariates=params.gamma.size,
            prior_sd_beta=np.inf,
            prior_sd_tau=np.inf,
            prior_sd_gamma=np.inf,
        )
    return PpoModel.from_dataset(dataset, config, parameterization="baseline"), config


def log_likelihood(params, dataset):
    """Sum of log cell probabilities of the observed records (-inf if infeasible)."""
    if dataset.n_levels != params.n_levels:
        raise ValueError("dataset and parameters disagree on the number of levels")
    model, _ = _model_for(params, dataset)
    theta = model.to_theta(params)
    return float(model.log_likelihood(theta[None, None])[0, 0])


def pointwise_log_likelihood(params, dataset):
    """Log-likelihood of each record, in dataset order (hook for LOO-style tools)."""
    X = dataset.X
    eta = _etas(params, dataset.treated - 0.5, X)
    logp = PpoModel.log_cell_probs(eta)
    return logp[np.arange(dataset.n), dataset.y - 1]


def log_prior(params, config):
    """Log prior density of (alpha, beta, tau, gamma) on their natural scale.

    The Dirichlet density on the baseline cell probabilities is carried to
    alpha through the cumulative-logit Jacobian ``prod_k F_k (1 - F_k)``.
    """
    K = config.n_levels
    c = config.dirichlet_conc
    f = expit(params.alpha)
    s = expit(-params.alpha)
    q = np.diff(np.concatenate([[0.0], f, [1.0]]))
    q[-1] = s[-1]
    lp = gammaln(K * c) - K * gammaln(c) + (c - 1.0) * np.log(q).sum()
    lp += np.sum(np.log(f) + np.log(s))
    for values, sd in (
        (np.atleast_1d(params.beta) if config.include_treatment else np.zeros(0), config.prior_sd_beta),
        (params.tau[: config.n_tau], config.prior_sd_tau),
        (params.gamma, config.prior_sd_gamma),
    ):
        if values.size and np.isfinite(sd):
            lp += np.sum(-0.5 * (values / sd) ** 2 - np.log(sd) - _HALF_LOG_2PI)
    return float(lp)


def log_posterior_and_gradient(theta, dataset, config):
    """Log posterior and its analytic gradient at one unconstrained vector."""
    model = PpoModel.from_dataset(dataset, config)
    lp, grad = model.log_posterior_and_grad(np.asarray(theta, dtype=float)[None, None])
    return float(lp[0, 0]), grad[0, 0]


# ----------------------------------------------------------------------
# point estimation


def _maximize(model, theta0, with_prior):
    def fun(theta):
        t = theta[None, None]
        if with_prior:
            v, g = model.log_posterior_and_grad(t)
        else:
            v, g = model.log_likelihood_and_grad(t)
        v, g = v[0, 0], g[0, 0]
        if not np.isfinite(v):
            return np.inf, np.zeros_like(theta)
        return -v * scale, -g * scale

    def hess(theta):
        if with_prior:
            return -model.hessian(theta[None])[0] * scale
        h = 1e-5
        d = theta.size
        pts = np.concatenate([theta + np.eye(d) * h, theta - np.eye(d) * h])[None]
        _, g = model.log_likelihood_and_grad(pts)
        H = (g[0, :d] - g[0, d:]) / (2 * h)
        return -0.5 * (H + H.T) * scale

    scale = 1.0 / max(model.counts.sum(), 1.0)
    res = optimize.minimize(fun, theta0, jac=True, hess=hess, method="trust-exact", options={"gtol": 1e-9})
    return res


def fit_mle(dataset_or_model, config=None):
    """Maximum-likelihood fit of a cumulative-logit model.

    Accepts a :class:`TrialDataset` (with ``config``) or a single-batch
    :class:`PpoModel`.  Returns ``(params, result)``.
    """
    if isinstance(dataset_or_model, PpoModel):
        model = dataset_or_model
    else:
        if config is None:
            config = ModelConfig(family="PO", n_levels=dataset_or_model.n_levels,
                                 n_covariates=dataset_or_model.p)
        model = PpoModel.from_dataset(dataset_or_model, config)
    res = _maximize(model, model.initial_theta()[0], with_prior=False)
    return model.to_params(res.x), res


def fit_map(model):
    """Posterior mode of a single-batch model; returns ``(theta, result)``."""
    res = _maximize(model, model.initial_theta()[0], with_prior=True)
    return res.x, res
