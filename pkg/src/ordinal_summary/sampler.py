"""MCMC for :class:`~ordinal_summary.ppo.PpoModel` posteriors.

Both samplers run every chain of every batch target in lock-step with numpy
broadcasting.  Each target draws its random numbers from its own
``numpy.random.Philox`` stream seeded by a ``SeedSequence``, so a target's
draws do not depend on which other targets share the batch.
"""

from dataclasses import asdict, dataclass

import numpy as np

RNG_NAME = "numpy.random.Philox (SeedSequence-spawned, one stream per target)"
ALGORITHMS = ("adaptive-rw", "hmc")
_NOISE_CHUNK = 100


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    algorithm: str = "adaptive-rw"
    chains: int = 4
    warmup: int = 1000
    draws_per_chain: int = 1000
    seed: int = 0
    target_accept: float = None
    joint_move: bool = True
    hmc_steps: int = 12

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if self.draws_per_chain < 1:
            raise ValueError("draws_per_chain must be at least 1")
        if self.warmup < 100:
            raise ValueError("adaptive samplers need at least 100 warmup iterations")
        if self.target_accept is None:
            self.target_accept = 0.3 if self.algorithm == "adaptive-rw" else 0.8
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


def _streams(seeds):
    return [np.random.Generator(np.random.Philox(s)) for s in seeds]


def target_seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


class _Noise:
    """Per-target buffered normals and uniforms, refilled in fixed chunks."""

    def __init__(self, gens, moves, chains, dim):
        self.gens = gens
        self.shape = (moves, chains, dim)
        self.pos = _NOISE_CHUNK

    def next(self):
        if self.pos == _NOISE_CHUNK:
            m, c, d = self.shape
            self.normal = np.stack([g.standard_normal((_NOISE_CHUNK, m, c, d)) for g in self.gens], axis=1)
            self.log_u = np.log(np.stack([g.random((_NOISE_CHUNK, m, c)) for g in self.gens], axis=1))
            self.pos = 0
        i = self.pos
        self.pos += 1
        return self.normal[i], self.log_u[i]


def adaptation_windows(warmup):
    """Covariance-update points: 15% initial buffer, doubling windows, 10% tail."""
    start = int(0.15 * warmup)
    end = warmup - int(0.1 * warmup)
    points = []
    size = 25
    pos = start
    while pos + size < end:
        nxt = pos + size
        if nxt + 2 * size > end:
            nxt = end
        points.append(nxt)
        pos = nxt
        size *= 2
    if not points or points[-1] != end:
        points.append(end)
    return start, points


def _make_pd(cov, floor=1e-8, cap=1e4):
    vals, vecs = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    vals = np.clip(vals, floor, cap)
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)


def _pd_inverse(neg_hessian, floor=1e-4):
    vals, vecs = np.linalg.eigh(neg_hessian)
    vals = np.clip(vals, floor, None)
    return vecs, vals


def laplace_covariance(model, theta):
    """Inverse negative Hessian at ``theta`` (B, d), forced positive definite."""
    H = model.hessian(theta)
    H = np.where(np.isfinite(H), H, 0.0)
    vecs, vals = _pd_inverse(-H)
    return _make_pd(np.einsum("...ij,...j,...kj->...ik", vecs, 1.0 / vals, vecs))


def posterior_mode(model, theta0=None, max_iter=50, tol=1e-8):
    """Batched damped Newton ascent on the log posterior.

    Starts from the empirical cumulative logits with zero effects; steps that
    leave the feasible region or lower the density are halved.
    """
    theta = model.initial_theta() if theta0 is None else np.array(theta0, dtype=float)
    lp, g = model.log_posterior_and_grad(theta[:, None])
    lp, g = lp[:, 0], g[:, 0]
    if not np.all(np.isfinite(lp)):
        raise SamplerError("log posterior is not finite at the empirical-logit starting point")
    active = np.ones(theta.shape[0], dtype=bool)
    for _ in range(max_iter):
        H = model.hessian(theta)
        H = np.where(np.isfinite(H), H, 0.0)
        vecs, vals = _pd_inverse(-H, floor=1e-6)
        step = np.einsum("bij,bj,bkj,bk->bi", vecs, 1.0 / vals, vecs, g)
        decrement = np.einsum("bi,bi->b", step, g)
        active &= decrement > tol
        if not active.any():
            break
        t = np.where(active, 1.0, 0.0)
        for _ in range(30):
            cand = theta + t[:, None] * step
            lp_c, g_c = model.log_posterior_and_grad(cand[:, None])
            lp_c, g_c = lp_c[:, 0], g_c[:, 0]
            good = np.isfinite(lp_c) & (lp_c >= lp) & (t > 0)
            theta = np.where(good[:, None], cand, theta)
            g = np.where(good[:, None], g_c, g)
            lp = np.where(good, lp_c, lp)
            t = np.where(good, 0.0, t * 0.5)
            if not np.any(t > 1e-10):
                break
    return theta


def _initial_states(model, cfg, gens):
    mode = posterior_mode(model)
    lp0 = model.log_posterior(mode[:, None])[:, 0]
    cov0 = laplace_covariance(model, mode)
    chol0 = np.linalg.cholesky(cov0)
    B, d = mode.shape
    jitter = np.stack([g.standard_normal((cfg.chains, d)) for g in gens])
    scale = np.ones((B, cfg.chains, 1))
    theta = mode[:, None] + scale * np.einsum("bij,bmj->bmi", chol0, jitter)
    lp = model.log_posterior(theta)
    for _ in range(30):
        bad = ~np.isfinite(lp)
        if not bad.any():
            break
        scale[bad] *= 0.5
        theta = np.where(bad[..., None], mode[:, None] + scale * np.einsum("bij,bmj->bmi", chol0, jitter), theta)
        lp = np.where(bad, model.log_posterior(theta), lp)
    bad = ~np.isfinite(lp)
    theta[bad] = np.broadcast_to(mode[:, None], theta.shape)[bad]
    lp = np.where(bad, lp0[:, None], lp)
    return theta, lp, cov0


class _WindowStats:
    def __init__(self, B, d):
        self.B, self.d = B, d
        self.reset()

    def reset(self):
        self.n = 0
        self.s1 = np.zeros((self.B, self.d))
        self.s2 = np.zeros((self.B, self.d, self.d))

    def add(self, theta):
        self.n += theta.shape[1]
        self.s1 += theta.sum(axis=1)
        self.s2 += np.einsum("bmi,bmj->bij", theta, theta)

    def covariance(self):
        mean = self.s1 / self.n
        return (self.s2 - self.n * np.einsum("bi,bj->bij", mean, mean)) / max(self.n - 1, 1)


def _blend(prev, stats, prior_weight):
    n = stats.n
    new = stats.covariance()
    cov = (n * new + prior_weight * prev) / (n + prior_weight)
    return _make_pd(cov)


def _run_adaptive_rw(model, cfg, gens, theta, lp, cov):
    B, m, d = theta.shape
    blocks = list(model.blocks.values())
    moves = blocks + ([np.arange(d)] if cfg.joint_move and len(blocks) > 1 else [])
    sizes = np.array([len(idx) for idx in moves])
    base_scale = np.log(2.38 / np.sqrt(sizes))
    log_scale = np.tile(base_scale, (B, 1))

    def chols(c):
        # block moves use the conditional covariance given the other blocks
        prec = np.linalg.inv(c)
        out = []
        for idx in moves:
            sub = c if len(idx) == d else _make_pd(np.linalg.inv(prec[:, idx][:, :, idx]))
            out.append(np.linalg.cholesky(sub))
        return out

    L = chols(cov)
    noise = _Noise(gens, len(moves), m, d)
    start, points = adaptation_windows(cfg.warmup)
    stats = _WindowStats(B, d)
    total = cfg.warmup + cfg.draws_per_chain
    draws = np.empty((B, m, cfg.draws_per_chain, d))
    draws_lp = np.empty((B, m, cfg.draws_per_chain))
    accepted = np.zeros(B)
    since = 0
    for t in range(total):
        eps, log_u = noise.next()
        warm = t < cfg.warmup
        for j, idx in enumerate(moves):
            step = np.einsum("bij,bmj->bmi", L[j], eps[:, j, :, : len(idx)])
            prop = theta.copy()
            prop[..., idx] += np.exp(log_scale[:, j])[:, None, None] * step
            lp_prop = model.log_posterior(prop)
            with np.errstate(invalid="ignore"):
                acc = log_u[:, j] < (lp_prop - lp)
            theta = np.where(acc[..., None], prop, theta)
            lp = np.where(acc, lp_prop, lp)
            if warm:
                rate = (since + 10) ** -0.6
                log_scale[:, j] += rate * (acc.mean(axis=1) - cfg.target_accept)
            else:
                accepted += acc.mean(axis=1) / len(moves)
        if warm:
            since += 1
            if t + 1 > start:
                stats.add(theta)
            if t + 1 in points:
                cov = _blend(cov, stats, prior_weight=10 * d)
                L = chols(cov)
                stats.reset()
                log_scale[:] = base_scale
                since = 0
        else:
            s = t - cfg.warmup
            draws[:, :, s] = theta
            draws_lp[:, :, s] = lp
    return draws, draws_lp, accepted / cfg.draws_per_chain, {"proposal_cov": cov, "log_scale": log_scale}


def _run_hmc(model, cfg, gens, theta, lp, cov):
    B, m, d = theta.shape
    inv_mass = np.diagonal(cov, axis1=-2, axis2=-1).copy()  # (B, d)
    noise = _Noise(gens, 1, m, d)
    start, points = adaptation_windows(cfg.warmup)
    stats = _WindowStats(B, d)
    _, grad = model.log_posterior_and_grad(theta)

    log_eps = np.full(B, np.log(0.5 / np.sqrt(d)))
    mu = np.log(10) + log_eps
    h_bar = np.zeros(B)
    log_eps_bar = np.zeros(B)
    k = 0
    total = cfg.warmup + cfg.draws_per_chain
    draws = np.empty((B, m, cfg.draws_per_chain, d))
    draws_lp = np.empty((B, m, cfg.draws_per_chain))
    accepted = np.zeros(B)
    for t in range(total):
        z, log_u = noise.next()
        warm = t < cfg.warmup
        eps = np.exp(log_eps)[:, None, None]
        p = z[:, 0] / np.sqrt(inv_mass)[:, None]
        h0 = -lp + 0.5 * np.sum(p * p * inv_mass[:, None], axis=-1)
        q, g = theta.copy(), grad.copy()
        with np.errstate(invalid="ignore", over="ignore"):
            for _ in range(cfg.hmc_steps):
                p = p + 0.5 * eps * g
                q = q + eps * inv_mass[:, None] * p
                lp_new, g = model.log_posterior_and_grad(q)
                p = p + 0.5 * eps * g
            h1 = -lp_new + 0.5 * np.sum(p * p * inv_mass[:, None], axis=-1)
            log_ratio = np.where(np.isfinite(h1), h0 - h1, -np.inf)
        acc_prob = np.exp(np.minimum(log_ratio, 0.0))
        acc = log_u[:, 0] < log_ratio
        theta = np.where(acc[..., None], q, theta)
        lp = np.where(acc, lp_new, lp)
        grad = np.where(acc[..., None], g, grad)
        if warm:
            k += 1
            stat = acc_prob.mean(axis=1)
            h_bar = (1 - 1 / (k + 10)) * h_bar + (cfg.target_accept - stat) / (k + 10)
            log_eps = mu - np.sqrt(k) / 0.05 * h_bar
            w = k**-0.75
            log_eps_bar = w * log_eps + (1 - w) * log_eps_bar
            if t + 1 > start:
                stats.add(theta)
            if t + 1 in points:
                var = np.diagonal(stats.covariance(), axis1=-2, axis2=-1)
                n = stats.n
                inv_mass = np.clip((n / (n + 5)) * var + 1e-3 * (5 / (n + 5)), 1e-10, None)
                stats.reset()
                mu = np.log(10) + log_eps
                h_bar[:] = 0.0
                log_eps_bar[:] = 0.0
                k = 0
            if t + 1 == cfg.warmup:
                log_eps = log_eps_bar if k else log_eps
        else:
            s = t - cfg.warmup
            draws[:, :, s] = theta
            draws_lp[:, :, s] = lp
            accepted += acc.mean(axis=1)
    return draws, draws_lp, accepted / cfg.draws_per_chain, {"inv_mass": inv_mass, "step_size": np.exp(log_eps)}


def sample(model, config=None, seeds=None):
    """Draw from the posterior of every target in ``model``'s batch.

    Parameters
    ----------
    model : PpoModel
    config : SamplerConfig
    seeds : sequence of SeedSequence or int, optional
        One per batch target.  Defaults to spawning from ``config.seed``.
    """
    cfg = config or SamplerConfig()
    B = model.batch_size
    if np.any(model.counts.sum(axis=(1, 2)) <= 0):
        raise SamplerError("every dataset must contain at least one record")
    if seeds is None:
        seeds = target_seeds(cfg.seed, B)
    seeds = [s if isinstance(s, np.random.SeedSequence) else np.random.SeedSequence(s) for s in seeds]
    if len(seeds) != B:
        raise ValueError("need one seed per batch target")
    gens = _streams(seeds)
    theta, lp, cov = _initial_states(model, cfg, gens)
    if cfg.algorithm == "adaptive-rw":
        run = _run_adaptive_rw
    else:
        if model.config.n_tau:
            raise ValueError("the hamiltonian sampler is only supported for the PO family")
        run = _run_hmc
    draws, draws_lp, acc, tuning = run(model, cfg, gens, theta, lp, cov)
    return PosteriorDraws(model=model, theta=draws, log_post=draws_lp, acceptance_rate=acc,
                          config=cfg, tuning=tuning)


class PosteriorDraws:
    """Post-warmup draws, ``theta`` shaped (B, chains, draws, d)."""

    def __init__(self, model, theta, log_post, acceptance_rate, config, tuning=None):
        self.model = model
        self.theta = theta
        self.log_post = log_post
        self.acceptance_rate = np.asarray(acceptance_rate)
        self.config = config
        self.tuning = tuning or {}
        self._diag = None

    @property
    def batch_size(self):
        return self.theta.shape[0]

    @property
    def n_chains(self):
        return self.theta.shape[1]

    @property
    def n_draws(self):
        return self.theta.shape[1] * self.theta.shape[2]

    def __getitem__(self, b):
        """Draws of one target (an int) or of a subset of targets (an index array)."""
        idx = np.arange(b, b + 1) if np.ndim(b) == 0 else np.asarray(b)
        out = PosteriorDraws(self.model.select(idx), self.theta[idx], self.log_post[idx],
                             self.acceptance_rate[idx], self.config)
        if self._diag is not None:
            out._diag = {k: v[idx] for k, v in self._diag.items()}
        return out

    def flat(self):
        """Draws merged over chains in (chain, iteration) order: (B, n_draws, d)."""
        B, m, S, d = self.theta.shape
        return self.theta.reshape(B, m * S, d)

    def parameter_names(self):
        return self.model.parameter_names()

    def params(self):
        """Natural-scale parameter arrays with shape (B, n_draws, ...)."""
        alpha, beta, tau, gamma = self.model.natural(self.flat())
        return {
            "alpha": alpha,
            "beta": beta,
            "tau": tau[..., 1 : 1 + self.model.config.n_tau],
            "gamma": gamma,
        }

    def diagnostics(self):
        """Split R-hat (None with one chain) and ESS of every coordinate."""
        if self._diag is None:
            x = np.moveaxis(self.theta, -1, 1)  # (B, d, m, S)
            self._diag = {
                "rhat": split_rhat(x) if self.n_chains > 1 else np.full(x.shape[:2], np.nan),
                "ess": effective_sample_size(x),
            }
        return self._diag

    def passes(self, rhat_max=1.05, ess_min=100.0):
        """Per-target diagnostics gate."""
        diag = self.diagnostics()
        ok = np.all(np.isfinite(self.log_post), axis=(1, 2))
        ess = diag["ess"]
        ok &= np.all(np.where(np.isnan(ess), True, ess >= ess_min), axis=1)
        if self.n_chains > 1:
            ok &= np.all(np.where(np.isnan(diag["rhat"]), True, diag["rhat"] <= rhat_max), axis=1)
        return ok

    def summary(self, b=0):
        diag = self.diagnostics()
        rhat = diag["rhat"][b]
        return {
            "chains": self.n_chains,
            "draws": self.n_draws,
            "acceptance_rate": float(self.acceptance_rate[b]),
            "max_rhat": None if self.n_chains < 2 else float(np.nanmax(rhat)),
            "min_ess": float(np.nanmin(diag["ess"][b])) if np.any(np.isfinite(diag["ess"][b])) else None,
            "parameters": {
                name: {
                    "rhat": None if self.n_chains < 2 or np.isnan(rhat[i]) else float(rhat[i]),
                    "ess": None if np.isnan(diag["ess"][b, i]) else float(diag["ess"][b, i]),
                }
                for i, name in enumerate(self.parameter_names())
            },
        }


# ----------------------------------------------------------------------
# convergence diagnostics


def _split(chains):
    n = chains.shape[-1]
    half = n // 2
    if half < 2:
        raise ValueError("need at least four draws per chain to split")
    first = chains[..., :half]
    second = chains[..., n - half :]
    return np.concatenate([first, second], axis=-2)


def split_rhat(chains):
    """Split potential scale reduction factor over the last two axes (chain, draw).

    Returns NaN for constant input.
    """
    x = _split(np.asarray(chains, dtype=float))
    n = x.shape[-1]
    means = x.mean(axis=-1)
    within = x.var(axis=-1, ddof=1).mean(axis=-1)
    between = n * means.var(axis=-1, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(within > 0, np.sqrt(var_plus / within), np.nan)


def _autocovariance(x):
    n = x.shape[-1]
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    centered = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(centered, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(chains):
    """Multi-chain ESS with Geyer's initial monotone sequence (computed on split chains).

    Input ``(..., chains, draws)``; NaN marks degenerate (constant) series.
    """
    x = _split(np.asarray(chains, dtype=float))
    m, n = x.shape[-2], x.shape[-1]
    acov = _autocovariance(x)
    chain_var = acov[..., 0] * n / (n - 1)
    within = chain_var.mean(axis=-1)
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus = var_plus + x.mean(axis=-1).var(axis=-1, ddof=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = 1.0 - (within[..., None] - acov.mean(axis=-2)) / var_plus[..., None]
    rho[..., 0] = 1.0
    n_pairs = n // 2
    pairs = rho[..., : 2 * n_pairs].reshape(rho.shape[:-1] + (n_pairs, 2)).sum(axis=-1)
    positive = pairs > 0
    # keep pairs up to (not including) the first non-positive one
    keep = np.cumprod(positive, axis=-1).astype(bool)
    mono = np.minimum.accumulate(np.where(keep, pairs, np.inf), axis=-1)
    total = np.where(keep, mono, 0.0).sum(axis=-1)
    tau = -1.0 + 2.0 * total
    tau = np.maximum(tau, 1.0 / np.log10(m * n))
    with np.errstate(invalid="ignore", divide="ignore"):
        ess = m * n / tau
    return np.where(var_plus > 0, ess, np.nan)
