r"""Particle Gibbs with ancestor sampling for GP-Vol.

Each Gibbs iteration

1. slice-samples θ given the current reference chain (one univariate sweep
   over the unconstrained coordinates),
2. runs a conditional auxiliary particle filter with ancestor sampling
   (CAPF-AS) in which the last particle slot is pinned to the reference,
3. draws the next reference chain in proportion to the final weights.

Because ``f`` is marginalized the model is non-Markovian, so the ancestor
weight of a candidate history must include the predictive density of the
*whole* remaining reference tail.  With fixed θ every candidate's history
concatenated with the reference tail is just another chain of length ``T``;
one Cholesky factorization of its transition covariance yields both the
one-step predictive of the next state (leading block) and the tail density
(trailing pivots), so a CAPF-AS step costs one batched factorization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from gpvol import gp
from gpvol.errors import FilterDivergence, GpVolError
from gpvol.gp import LOG_2PI, GpHyperParams, ThetaPrior
from gpvol.series import as_array
from gpvol.smc import (
    PredictionRecord,
    _lognorm_obs,
    gauss_hermite_loglik,
    normalize_log_weights,
    resample_systematic,
)

__all__ = [
    "PgasConfig",
    "PgasDraws",
    "slice_sweep",
    "slice_sample_theta",
    "capf_as",
    "ancestor_terms",
    "default_init_chain",
    "pgas_run",
    "pgas_predictive",
    "pgas_backtest",
]


@dataclass(frozen=True)
class PgasConfig:
    n_particles: int = 10
    n_iters: int = 100
    burn_in: int | None = None
    seed: int = 0
    slice_width: float = 1.0
    slice_max_steps: int = 50
    quad_nodes: int = 20

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError(f"n_particles must be >= 2, got {self.n_particles}")
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", self.n_iters // 5)
        if not 0 <= self.burn_in < self.n_iters:
            raise ValueError(f"burn_in must lie in [0, n_iters), got {self.burn_in}")
        if not self.slice_width > 0:
            raise ValueError("slice_width must be positive")
        if self.slice_max_steps < 1:
            raise ValueError("slice_max_steps must be >= 1")


@dataclass
class PgasDraws:
    theta_draws: list
    chain_draws: np.ndarray
    slice_failures: int = 0

    def __len__(self):
        return len(self.theta_draws)

    def to_jsonl(self) -> str:
        lines = []
        for m, (theta, chain) in enumerate(zip(self.theta_draws, self.chain_draws), start=1):
            lines.append(json.dumps({"m": m, "theta": theta.as_dict(), "chain": chain.tolist()}))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# slice sampling
# ---------------------------------------------------------------------------


def _slice_1d(logf, x0, f0, width, max_steps, rng):
    """One stepping-out/shrinkage update; returns (x, logf(x), ok)."""
    log_y = f0 + math.log(rng.uniform())
    left = x0 - width * rng.uniform()
    right = left + width
    j = int(math.floor(max_steps * rng.uniform()))
    k = max_steps - 1 - j
    while j > 0 and logf(left) > log_y:
        left -= width
        j -= 1
    while k > 0 and logf(right) > log_y:
        right += width
        k -= 1
    for _ in range(max_steps):
        x1 = left + (right - left) * rng.uniform()
        f1 = logf(x1)
        if f1 > log_y:
            return x1, f1, True
        if x1 < x0:
            left = x1
        else:
            right = x1
    return x0, f0, False


def slice_sweep(log_target, u, width: float, max_steps: int, rng):
    """Univariate slice updates over every coordinate of ``u``, in order.

    A coordinate whose shrinkage budget runs out is retried once with a
    doubled width and otherwise left unchanged.

    Returns
    -------
    u : ndarray
    failures : int
        Coordinates left unchanged after the retry.
    """
    u = np.array(u, dtype=float)
    f0 = log_target(u)
    failures = 0
    for i in range(u.size):

        def logf(value, i=i):
            trial = u.copy()
            trial[i] = value
            return log_target(trial)

        xi, fi, ok = _slice_1d(logf, u[i], f0, width, max_steps, rng)
        if not ok:
            xi, fi, ok = _slice_1d(logf, u[i], f0, 2.0 * width, max_steps, rng)
            failures += not ok
        u[i] = xi
        f0 = fi
    return u, failures


def _theta_log_target(prior: ThetaPrior, v, x):
    def log_target(u):
        if not np.all(np.isfinite(u)) or np.any(np.abs(u[2:]) > 30):
            return -np.inf
        try:
            return prior.logpdf_unconstrained(u) + gp.chain_log_prior(v, x, GpHyperParams.from_unconstrained(u))
        except (GpVolError, ValueError, OverflowError):
            return -np.inf

    return log_target


def slice_sample_theta(v, x, prior: ThetaPrior, current: GpHyperParams, cfg: PgasConfig, seed, return_failures=False):
    """One slice-sampling sweep targeting ``p(θ) p(v | θ, x)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    log_target = _theta_log_target(prior, np.asarray(v, dtype=float), as_array(x))
    u, failures = slice_sweep(log_target, current.to_unconstrained(), cfg.slice_width, cfg.slice_max_steps, rng)
    theta = GpHyperParams.from_unconstrained(u)
    return (theta, failures) if return_failures else theta


# ---------------------------------------------------------------------------
# CAPF-AS
# ---------------------------------------------------------------------------


def ancestor_terms(C, x, U, t: int):
    """Predictive of ``v_{t+1}`` and log reference-tail density per candidate.

    ``C`` (N, T) holds candidate histories in columns ``:t`` and the reference
    trajectory in columns ``t:``; ``t`` is a 0-based position.  Returns
    ``(mean, sd, log_tail)`` where ``N(mean, sd²)`` is the GP one-step
    predictive of ``C[:, t]`` given ``C[:, :t]`` and
    ``log_tail = log p(C[:, t:] | C[:, :t], x)``.
    """
    X = gp.gp_inputs(C, x)
    L = gp.batch_factor(X, U)
    m = gp.batch_mean(X, U)
    wz = gp.batch_solve_lower(L, C[:, 1:] - m)
    p = t - 1  # target index of v_{t+1} among the transitions
    mean = m[:, p] + np.einsum("ij,ij->i", L[:, p, :p], wz[:, :p])
    diag = np.diagonal(L, axis1=1, axis2=2)[:, p:]
    log_tail = -0.5 * np.sum(wz[:, p:] ** 2, axis=1) - np.sum(np.log(diag), axis=1) - 0.5 * diag.shape[1] * LOG_2PI
    return mean, L[:, p, p].copy(), log_tail


def capf_as(x, theta: GpHyperParams, ref, N: int, seed, on_step=None):
    """Conditional auxiliary particle filter with ancestor sampling.

    Slot ``N - 1`` holds the reference state ``ref[t]`` at every step ``t``;
    its history is re-drawn by ancestor sampling, so the returned slot is in
    general not ``ref`` itself.  ``on_step(t, chains, weights)`` is called
    after each step with the particle prefixes ``chains[:, :t + 1]``.

    Returns
    -------
    chains : ndarray, shape (N, T)
    weights : ndarray, shape (N,)
        Normalized final weights.
    """
    x = as_array(x)
    ref = np.asarray(ref, dtype=float).reshape(-1)
    T = ref.size
    if x.size != T:
        raise ValueError(f"len(x)={x.size} must equal len(ref)={T}")
    if N < 2:
        raise ValueError("capf_as needs at least 2 particles")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = np.tile(theta.to_unconstrained(), (N, 1))
    s0 = gp.initial_state_variance(theta)

    chains = np.empty((N, T))
    chains[:-1, 0] = math.sqrt(s0) * rng.standard_normal(N - 1)
    chains[-1, 0] = ref[0]
    w, _ = normalize_log_weights(_lognorm_obs(x[0], chains[:, 0]))
    if w is None:
        raise FilterDivergence(1)
    if on_step is not None:
        on_step(0, chains[:, :1].copy(), w)

    for t in range(1, T):
        # candidate histories followed by the reference tail
        C = chains.copy()
        C[:, t:] = ref[t:]
        mu, sd, tail = ancestor_terms(C, x, U, t)

        log_point = _lognorm_obs(x[t], mu)
        with np.errstate(divide="ignore"):
            log_w = np.log(w)
        g, _ = normalize_log_weights(log_w + log_point)
        anc_w, _ = normalize_log_weights(log_w + tail)
        if g is None or anc_w is None:
            raise FilterDivergence(t + 1)
        idx = np.empty(N, dtype=int)
        idx[:-1] = resample_systematic(g, N - 1, rng.uniform())
        idx[-1] = rng.choice(N, p=anc_w)

        new_v = gp.clamp_states(mu[idx] + sd[idx] * rng.standard_normal(N))
        new_v[-1] = ref[t]
        chains = chains[idx]
        chains[:, t] = new_v
        w, _ = normalize_log_weights(_lognorm_obs(x[t], new_v) - log_point[idx])
        if w is None:
            raise FilterDivergence(t + 1)
        if on_step is not None:
            on_step(t, chains[:, : t + 1].copy(), w)
    return chains, w


# ---------------------------------------------------------------------------
# PGAS driver
# ---------------------------------------------------------------------------


def default_init_chain(x, window: int = 10) -> np.ndarray:
    """Log of the trailing ``window``-point sample variance (clamped)."""
    x = as_array(x)
    out = np.empty(x.size)
    for t in range(x.size):
        lo = max(0, t + 1 - window)
        seg = x[lo : t + 1] if t + 1 - lo >= 2 else x[: min(window, x.size)]
        out[t] = math.log(max(float(np.var(seg)), 1e-8))
    return gp.clamp_states(out)


def pgas_run(x, prior: ThetaPrior, init_chain, init_theta: GpHyperParams, cfg: PgasConfig, fix_theta: bool = False):
    """Run ``cfg.n_iters`` PGAS iterations; with ``fix_theta`` θ stays at ``init_theta``."""
    x = as_array(x)
    ref = np.asarray(init_chain, dtype=float).reshape(-1)
    if ref.size != x.size:
        raise ValueError(f"init_chain length {ref.size} != len(x) {x.size}")
    theta = init_theta
    thetas, chains = [], np.empty((cfg.n_iters, x.size))
    failures = 0
    for m in range(cfg.n_iters):
        rng = np.random.default_rng([cfg.seed, m])
        try:
            if not fix_theta:
                theta, nf = slice_sample_theta(ref, x, prior, theta, cfg, rng, return_failures=True)
                failures += nf
            particles, w = capf_as(x, theta, ref, cfg.n_particles, rng)
        except GpVolError as exc:
            raise type(exc)(f"PGAS iteration {m + 1}: {exc}") if not isinstance(exc, FilterDivergence) else FilterDivergence(
                exc.t, f"PGAS iteration {m + 1}: {exc}"
            ) from exc
        ref = particles[rng.choice(cfg.n_particles, p=w)]
        thetas.append(theta)
        chains[m] = ref
    return PgasDraws(thetas, chains, failures)


def pgas_predictive(draws: PgasDraws, x, burn_in: int, n_nodes: int, x_next: float) -> float:
    """Equal-weight Gauss-Hermite predictive of ``x_next`` over post-burn-in draws."""
    x = as_array(x)
    means, variances = [], []
    for theta, chain in zip(draws.theta_draws[burn_in:], draws.chain_draws[burn_in:]):
        d = gp.GpDataset.from_chain(chain, x, theta)
        z = (float(gp.clamp_states(chain[-1])), x[-1])
        pred = gp.gp_predict(d, z)
        means.append(pred.mean)
        variances.append(pred.variance)
    k = len(means)
    return gauss_hermite_loglik(x_next, np.full(k, 1.0 / k), means, variances, n_nodes)


def pgas_backtest(x, prior: ThetaPrior, cfg: PgasConfig, warmup: int, init_theta: GpHyperParams | None = None):
    """Rerun PGAS on every expanding window ``x_{1:t}`` and score ``x_{t+1}``."""
    x = as_array(x)
    if not 0 < warmup < x.size:
        raise ValueError(f"need 0 < warmup < len(x); got warmup={warmup}, len(x)={x.size}")
    theta0 = init_theta or prior.mean_theta()
    records = []
    for t in range(warmup, x.size):
        window = x[:t]
        run_cfg = PgasConfig(
            cfg.n_particles, cfg.n_iters, cfg.burn_in, cfg.seed * 1_000_003 + t, cfg.slice_width, cfg.slice_max_steps, cfg.quad_nodes
        )
        draws = pgas_run(window, prior, default_init_chain(window), theta0, run_cfg)
        ll = pgas_predictive(draws, window, cfg.burn_in, cfg.quad_nodes, x[t])
        post = draws.chain_draws[cfg.burn_in :, -1]
        records.append(PredictionRecord(t + 1, ll, float(post.mean()), float(post.std())))
    return records
