"""Independent reference computations shared by the test-suite.

Nothing here imports the code under test beyond plain parameter containers,
so the oracles can catch errors in the batched/incremental implementations.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def dense_chain_logprior(v, x, a, b, sn, sf, ell):
    """``log p(v_{1:T} | x, θ)`` for many chains at once; ``v`` has shape (..., T).

    Written with textbook formulas: build the full Gram matrix from the
    inputs ``(v_{t-1}, x_{t-1})`` and evaluate the multivariate normal by
    ``numpy.linalg`` (no incremental updates).
    """
    v = np.asarray(v, dtype=float)
    T = v.shape[-1]
    s0 = sf**2 + sn**2
    out = -0.5 * (LOG_2PI + math.log(s0) + v[..., 0] ** 2 / s0)
    if T == 1:
        return out
    vin = v[..., :-1]
    xin = np.broadcast_to(np.asarray(x, dtype=float)[: T - 1], vin.shape)
    d2 = (vin[..., :, None] - vin[..., None, :]) ** 2 + (xin[..., :, None] - xin[..., None, :]) ** 2
    K = sf**2 * np.exp(-0.5 * d2 / ell**2) + sn**2 * np.eye(T - 1)
    r = v[..., 1:] - (a * vin + b * xin)
    sign, logdet = np.linalg.slogdet(K)
    quad = np.einsum("...i,...i->...", r, np.linalg.solve(K, r[..., None])[..., 0])
    return out - 0.5 * ((T - 1) * LOG_2PI + logdet + quad)


def log_obs(x, v):
    return -0.5 * (LOG_2PI + v + x * x * np.exp(-v))


def grid_posterior(x, theta, grid, chunk=200_000):
    """Brute-force tensor-grid quadrature of ``p(v_{1:T} | x, θ)``.

    Returns the posterior means of each ``v_t`` and the (T, len(grid))
    marginal masses on the grid nodes.
    """
    x = np.asarray(x, dtype=float)
    T = x.size
    G = np.asarray(grid, dtype=float)
    n = G.size
    total = n**T
    blocks = []
    top = -np.inf
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        digits = np.stack([(flat // n ** (T - 1 - k)) % n for k in range(T)], axis=-1)
        v = G[digits]
        lp = dense_chain_logprior(v, x, *theta) + log_obs(x[None, :], v).sum(axis=1)
        blocks.append((digits, lp))
        top = max(top, lp.max())
    marg = np.zeros((T, n))
    for digits, lp in blocks:
        w = np.exp(lp - top)
        for k in range(T):
            marg[k] += np.bincount(digits[:, k], weights=w, minlength=n)
    marg /= marg[0].sum()
    return marg @ G, marg


def grid_posterior_means(x, theta, grid):
    return grid_posterior(x, theta, grid)[0]


def wilcoxon_exact_pvalue(d):
    """Two-sided exact signed-rank p-value by enumerating all 2^n sign flips."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    n = d.size
    absd = np.abs(d)
    order = np.argsort(absd)
    ranks = np.empty(n)
    sorted_abs = absd[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    w_plus = ranks[d > 0].sum()
    mean = ranks.sum() / 2.0
    obs = abs(w_plus - mean)
    count = 0
    for signs in itertools.product((0, 1), repeat=n):
        if abs(np.dot(signs, ranks) - mean) >= obs - 1e-9:
            count += 1
    return count / 2.0**n


def kalman_filter_means(A, Q, H, R, y, m0, P0):
    """Scalar Kalman filter with the prior ``N(m0, P0)`` placed on the first state."""
    m, P = m0, P0
    out = []
    for k, obs in enumerate(y):
        if k > 0:
            m, P = A * m, A * A * P + Q
        S = H * H * P + R
        K = P * H / S
        m = m + K * (obs - H * m)
        P = (1 - K * H) * P
        out.append(m)
    return np.array(out)


def simulate_garch(alpha0, alpha1, beta1, T, seed, burn=500):
    """GARCH(1,1) draws with a burn-in from the unconditional variance."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(T + burn)
    s2 = alpha0 / (1.0 - alpha1 - beta1)
    x = np.empty(T + burn)
    for t in range(T + burn):
        x[t] = math.sqrt(s2) * z[t]
        s2 = alpha0 + alpha1 * x[t] ** 2 + beta1 * s2
    return x[burn:]


def garch_variance_loop(alpha0, alpha1, beta1, x, s2_init, gamma1=0.0):
    """Plain-Python variance recursion, the reference for the vectorized filters."""
    out = [s2_init]
    for xt in x[:-1]:
        out.append(alpha0 + alpha1 * xt * xt + gamma1 * xt * xt * (xt < 0) + beta1 * out[-1])
    return np.array(out)
