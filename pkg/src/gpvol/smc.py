r"""Particle filtering for GP-Vol.

The generic pieces (systematic resampling, ESS, a bootstrap filter and an
exact Kalman filter used to validate it) sit next to RAPCF, the regularized
auxiliary particle *chain* filter that tracks the latent log-variance chains
together with the GP hyperparameters.

Each RAPCF particle carries

* a whole chain ``v_{1:t}`` (the model is non-Markovian once ``f`` is
  marginalized, so the chain, not the last state, is propagated),
* hyperparameters on the unconstrained scale
  ``(a, b, log σ_n, log σ_f, log l)``,
* a Cholesky factor of the GP transition covariance of its chain.

Particles are stored as stacked arrays so that every step runs as a handful
of batched linear-algebra calls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

from gpvol import gp
from gpvol.errors import FilterDivergence
from gpvol.gp import LOG_2PI, PARAM_NAMES, GpDataset, GpHyperParams, ThetaPrior
from gpvol.series import as_array

__all__ = [
    "RapcfConfig",
    "Particle",
    "ParticleSystem",
    "PredictionRecord",
    "resample_systematic",
    "ess",
    "normalize_log_weights",
    "weighted_quantile",
    "gauss_hermite_loglik",
    "rapcf_init",
    "rapcf_step",
    "predictive_loglik",
    "particle_predictive",
    "rapcf_run",
    "bootstrap_filter",
    "kalman_oracle",
]


@dataclass(frozen=True)
class RapcfConfig:
    n_particles: int = 200
    shrinkage: float = 0.95
    jitter_floor: float = 1e-8
    quad_nodes: int = 20
    seed: int = 0
    frozen_cache: bool = False

    def __post_init__(self):
        if not 0.0 < self.shrinkage < 1.0:
            raise ValueError(f"shrinkage must lie in (0, 1), got {self.shrinkage}")
        if self.n_particles < 2:
            raise ValueError(f"n_particles must be >= 2, got {self.n_particles}")
        if self.quad_nodes < 1:
            raise ValueError(f"quad_nodes must be >= 1, got {self.quad_nodes}")
        if self.jitter_floor < 0:
            raise ValueError(f"jitter_floor must be >= 0, got {self.jitter_floor}")


@dataclass(frozen=True)
class Particle:
    chain: np.ndarray
    theta: GpHyperParams
    cache: GpDataset


@dataclass
class ParticleSystem:
    """Weighted particle chains after ``t`` assimilated observations.

    Attributes
    ----------
    u : ndarray, shape (N, 5)
        Unconstrained hyperparameters per particle.
    chains : ndarray, shape (N, t)
    weights : ndarray, shape (N,)
    factors : ndarray, shape (N, t-1, t-1)
        Cholesky factors of each chain's transition covariance, built with
        ``cache_u`` (equal to ``u`` unless caches are frozen).
    x : ndarray, shape (t,)
        Observations assimilated so far.
    history : list of dict
        Weighted 5/50/95% θ quantiles after every step, starting at t=0.
    """

    u: np.ndarray
    chains: np.ndarray
    weights: np.ndarray
    factors: np.ndarray
    cache_u: np.ndarray
    x: np.ndarray
    t: int
    rng_seed: int
    history: list = field(default_factory=list)
    ess_history: list = field(default_factory=list)
    n_clamped: int = 0

    @property
    def n_particles(self) -> int:
        return self.weights.size

    def thetas(self) -> list[GpHyperParams]:
        return [GpHyperParams.from_unconstrained(row) for row in self.u]

    def particle(self, i: int) -> Particle:
        """Materialize particle ``i`` with its cache as a :class:`GpDataset`."""
        chain = self.chains[i].copy()
        cache_theta = GpHyperParams.from_unconstrained(self.cache_u[i])
        inputs = gp.gp_inputs(chain, self.x)
        cache = GpDataset(inputs, chain[1:].copy(), cache_theta, self.factors[i].copy())
        return Particle(chain, GpHyperParams.from_unconstrained(self.u[i]), cache)


@dataclass(frozen=True)
class PredictionRecord:
    t: int
    predictive_loglik: float
    state_mean: float
    state_sd: float
    theta_q05: dict | None = None
    theta_q50: dict | None = None
    theta_q95: dict | None = None

    def to_json(self) -> str:
        doc = {
            "t": self.t,
            "loglik": self.predictive_loglik,
            "state_mean": self.state_mean,
            "state_sd": self.state_sd,
        }
        for name in ("theta_q05", "theta_q50", "theta_q95"):
            value = getattr(self, name)
            if value is not None:
                doc[name] = value
        return json.dumps(doc)


# ---------------------------------------------------------------------------
# generic SMC machinery
# ---------------------------------------------------------------------------


def resample_systematic(weights, n: int, u: float) -> np.ndarray:
    """Systematic resampling with a single offset ``u`` in [0, 1)."""
    w = np.asarray(weights, dtype=float)
    positions = (u + np.arange(n)) / n
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, positions, side="right")
    return np.minimum(idx, w.size - 1)


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def normalize_log_weights(logw):
    """Return normalized weights and the log of their unnormalized sum."""
    logw = np.asarray(logw, dtype=float)
    logw = np.where(np.isnan(logw), -np.inf, logw)
    top = logw.max()
    if not np.isfinite(top):
        return None, float(top)
    w = np.exp(logw - top)
    s = w.sum()
    # plain numpy: scipy's logsumexp carries noticeable per-call overhead here
    return w / s, float(top + math.log(s))


def weighted_quantile(values, weights, q):
    """Inverse of the weighted empirical CDF (left-continuous) at ``q``."""
    order = np.argsort(values, kind="stable")
    cdf = np.cumsum(np.asarray(weights)[order])
    cdf /= cdf[-1]
    q = np.atleast_1d(q)
    idx = np.minimum(np.searchsorted(cdf, q, side="left"), len(cdf) - 1)
    return np.asarray(values)[order][idx]


def _lognorm_obs(x, v):
    """``log N(x; 0, exp(v))`` with ``v`` clamped."""
    v = gp.clamp_states(v)
    with np.errstate(over="ignore"):  # huge x gives -inf, handled by the callers
        return -0.5 * (LOG_2PI + v + x * x * np.exp(-v))


def gauss_hermite_loglik(x, weights, means, variances, n_nodes: int) -> float:
    r"""``log Σ_i w_i ∫ N(x; 0, e^v) N(v; μ_i, s_i²) dv`` by Gauss-Hermite."""
    nodes, gh_w = hermgauss(n_nodes)
    means = np.asarray(means, dtype=float)[:, None]
    sd = np.sqrt(np.maximum(np.asarray(variances, dtype=float), 0.0))[:, None]
    v = means + math.sqrt(2.0) * sd * nodes[None, :]
    log_inner = _lognorm_obs(x, v) + np.log(gh_w / math.sqrt(math.pi))[None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(weights, dtype=float))
    return float(logsumexp(logw + logsumexp(log_inner, axis=1)))


def bootstrap_filter(x, sample_initial, sample_transition, log_observation, n_particles: int, seed: int):
    """Plain bootstrap filter for a Markov state-space model.

    Parameters
    ----------
    sample_initial : callable ``(rng, n) -> states``
    sample_transition : callable ``(rng, states) -> states``
    log_observation : callable ``(y, states) -> log densities``

    Returns
    -------
    means, variances : ndarray
        Filtered moments of the state at every step.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    means = np.empty(x.size)
    variances = np.empty(x.size)
    states = sample_initial(rng, n_particles)
    for t, y in enumerate(x):
        if t > 0:
            idx = resample_systematic(w, n_particles, rng.uniform())
            states = sample_transition(rng, states[idx])
        w, _ = normalize_log_weights(log_observation(y, states))
        if w is None:
            raise FilterDivergence(t + 1)
        means[t] = w @ states
        variances[t] = w @ (states - means[t]) ** 2
    return means, variances


def kalman_oracle(A: float, Q: float, H: float, R: float, x, m0: float = 0.0, P0: float = 1.0):
    """Exact filter for ``v_t = A v_{t-1} + N(0, Q)``, ``x_t = H v_t + N(0, R)``.

    ``N(m0, P0)`` is the prior of ``v_1``.
    """
    x = np.asarray(x, dtype=float)
    means = np.empty(x.size)
    variances = np.empty(x.size)
    m, P = m0, P0
    for t, y in enumerate(x):
        if t > 0:
            m, P = A * m, A * A * P + Q
        S = H * H * P + R
        K = P * H / S
        m = m + K * (y - H * m)
        P = (1.0 - K * H) * P
        means[t], variances[t] = m, P
    return means, variances


# ---------------------------------------------------------------------------
# RAPCF
# ---------------------------------------------------------------------------


def _theta_quantiles(u, w, qs=(0.05, 0.5, 0.95)):
    out = []
    for q in qs:
        row = {}
        for j, name in enumerate(PARAM_NAMES):
            val = float(weighted_quantile(u[:, j], w, q)[0])
            row[name] = val if j < 2 else math.exp(val)
        out.append(row)
    return out


def _history_entry(t, u, w):
    q05, q50, q95 = _theta_quantiles(u, w)
    return {"t": t, "q05": q05, "q50": q50, "q95": q95}


def rapcf_init(priors: ThetaPrior, cfg: RapcfConfig) -> ParticleSystem:
    """Draw θ particles from the prior with empty chains and uniform weights."""
    rng = np.random.default_rng([cfg.seed, 0])
    N = cfg.n_particles
    u = priors.sample_unconstrained(rng, N)
    w = np.full(N, 1.0 / N)
    sys = ParticleSystem(
        u=u,
        chains=np.zeros((N, 0)),
        weights=w,
        factors=np.zeros((N, 0, 0)),
        cache_u=u.copy(),
        x=np.zeros(0),
        t=0,
        rng_seed=cfg.seed,
    )
    sys.history.append(_history_entry(0, u, w))
    return sys


def _next_inputs(sys: ParticleSystem, idx=None):
    """Training inputs/targets and the next input for every particle's chain."""
    chains = sys.chains if idx is None else sys.chains[idx]
    X = gp.gp_inputs(chains, sys.x)
    Y = chains[:, 1:]
    Z = np.stack([gp.clamp_states(chains[:, -1]), np.full(chains.shape[0], sys.x[-1])], axis=-1)
    return X, Y, Z


def particle_predictive(sys: ParticleSystem):
    """Per-particle predictive ``(μ_i, s_i²)`` of the next state from the caches."""
    N = sys.n_particles
    if sys.t == 0:
        return np.zeros(N), np.exp(2.0 * sys.u[:, 3]) + np.exp(2.0 * sys.u[:, 2])
    X, Y, Z = _next_inputs(sys)
    mean, var, _ = gp.batch_predict(sys.factors, X, Y, Z, sys.cache_u, sys.u)
    return mean, var


def predictive_loglik(sys: ParticleSystem, x_next: float, cfg: RapcfConfig) -> float:
    """Log predictive density of the next return, state noise integrated out."""
    mean, var = particle_predictive(sys)
    return gauss_hermite_loglik(x_next, sys.weights, mean, var, cfg.quad_nodes)


def _jitter_sqrt(V, scale, floor):
    cov = scale * V + floor * np.eye(V.shape[0])
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def rapcf_step(sys: ParticleSystem, x_t: float, cfg: RapcfConfig):
    """Assimilate one return; see the module docstring for the particle layout.

    Returns the updated system and a :class:`PredictionRecord` whose
    predictive log-likelihood was computed before ``x_t`` was observed.
    """
    x_t = float(x_t)
    if not math.isfinite(x_t):
        raise ValueError(f"observation must be finite, got {x_t!r}")
    t = sys.t + 1
    rng = np.random.default_rng([cfg.seed, t])
    N = sys.n_particles
    a = cfg.shrinkage
    w_prev, U = sys.weights, sys.u
    pred_ll = predictive_loglik(sys, x_t, cfg)

    # (i) shrink towards the weighted mean; V is the weighted covariance
    theta_bar = w_prev @ U
    centered = U - theta_bar
    V = (centered * w_prev[:, None]).T @ centered
    M = a * U + (1.0 - a) * theta_bar

    # (ii) point estimates of the next state under the shrunk parameters
    n_clamped = sys.n_clamped
    if t == 1:
        mu = np.zeros(N)
        X = Y = Z = None
    else:
        X, Y, Z = _next_inputs(sys)
        n_clamped += int(np.count_nonzero(np.abs(sys.chains[:, -1]) > gp.STATE_CLAMP))
        if cfg.frozen_cache:
            mu, _, _ = gp.batch_predict(sys.factors, X, Y, Z, sys.cache_u, M)
        else:
            Lm = gp.batch_factor(X, M) if X.shape[1] else np.zeros((N, 0, 0))
            mu, _, _ = gp.batch_predict(Lm, X, Y, Z, M)

    # (iii) point-estimate importance weights and (iv) resampling of chains
    log_point = _lognorm_obs(x_t, mu)
    with np.errstate(divide="ignore"):
        g, _ = normalize_log_weights(np.log(w_prev) + log_point)
    if g is None:
        raise FilterDivergence(t, f"filter divergence at t={t}: auxiliary weights collapsed")
    idx = resample_systematic(g, N, rng.uniform())

    # (v) regenerate θ from the shrinkage kernel
    root = _jitter_sqrt(V, 1.0 - a * a, cfg.jitter_floor)
    U_new = M[idx] + rng.standard_normal((N, 5)) @ root.T

    # (vi) propose v_t from the GP predictive under the jittered θ
    if t == 1:
        mean = np.zeros(N)
        var = np.exp(2.0 * U_new[:, 3]) + np.exp(2.0 * U_new[:, 2])
        cache_u = U_new.copy()
    else:
        Xr, Yr, Zr = X[idx], Y[idx], Z[idx]
        if cfg.frozen_cache:
            cache_u = sys.cache_u[idx]
            L_old = sys.factors[idx]
            mean, var, row = gp.batch_predict(L_old, Xr, Yr, Zr, cache_u, U_new)
        else:
            cache_u = U_new.copy()
            L_old = gp.batch_factor(Xr, U_new) if Xr.shape[1] else np.zeros((N, 0, 0))
            mean, var, row = gp.batch_predict(L_old, Xr, Yr, Zr, U_new)
    v_t = mean + np.sqrt(var) * rng.standard_normal(N)
    n_clamped += int(np.count_nonzero(np.abs(v_t) > gp.STATE_CLAMP))

    # (vii)-(viii) reweight, correcting for the point-estimate look-ahead
    w_new, _ = normalize_log_weights(_lognorm_obs(x_t, v_t) - log_point[idx])
    if w_new is None:
        raise FilterDivergence(t)

    # (ix) extend each chain's factor by the new transition (z_t, v_t)
    chains = np.concatenate([sys.chains[idx], v_t[:, None]], axis=1)
    x_hist = np.append(sys.x, x_t)
    if t == 1:
        factors = np.zeros((N, 0, 0))
    else:
        factors = gp.batch_extend(L_old, row, cache_u)
        bad = ~np.isfinite(factors[:, -1, -1])
        if bad.any():
            Xn = gp.gp_inputs(chains[bad], x_hist)
            factors[bad] = gp.batch_factor(Xn, cache_u[bad])

    state_mean = float(w_new @ v_t)
    state_sd = float(math.sqrt(max(w_new @ (v_t - state_mean) ** 2, 0.0)))
    new = ParticleSystem(
        u=U_new,
        chains=chains,
        weights=w_new,
        factors=factors,
        cache_u=cache_u,
        x=x_hist,
        t=t,
        rng_seed=sys.rng_seed,
        history=sys.history + [_history_entry(t, U_new, w_new)],
        ess_history=sys.ess_history + [ess(w_new)],
        n_clamped=n_clamped,
    )
    h = new.history[-1]
    record = PredictionRecord(t, pred_ll, state_mean, state_sd, h["q05"], h["q50"], h["q95"])
    return new, record


def rapcf_run(x, priors: ThetaPrior, cfg: RapcfConfig, warmup: int = 0):
    """Filter through ``x``, emitting one record per observation after ``warmup``.

    Returns
    -------
    records : list of PredictionRecord
        ``len(x) - warmup`` entries, each scored before its observation was
        assimilated.
    final : ParticleSystem
        Also carries the per-step θ quantile history.
    """
    x = as_array(x)
    if not 0 <= warmup < x.size:
        raise ValueError(f"need 0 <= warmup < len(x); got warmup={warmup}, len(x)={x.size}")
    sys = rapcf_init(priors, cfg)
    records = []
    for t in range(x.size):
        sys, rec = rapcf_step(sys, x[t], cfg)
        if t >= warmup:
            records.append(rec)
    return records, sys
