r"""Gaussian-process prior over the log-variance transition.

The transition is :math:`v_t = f(v_{t-1}, x_{t-1}) + \epsilon` with
:math:`f \sim \mathcal{GP}(m, k)`, a linear mean ``m(v, x) = a v + b x`` and a
squared-exponential kernel with a single length scale over the 2-D input.
Marginalizing ``f`` makes the state chain non-Markovian; its prior is the
product of one-step GP predictions, which this module evaluates exactly.

Two layers are provided.  :class:`GpDataset`, :func:`gp_predict` and
:func:`gp_extend` work on a single conditioning set and are the reference
surface.  The ``batch_*`` helpers apply the same algebra to a stack of
particles at once and are what the filters use in their inner loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from gpvol.errors import NumericalFailure
from gpvol.series import ReturnSeries, as_array

__all__ = [
    "STATE_CLAMP",
    "PARAM_NAMES",
    "GpHyperParams",
    "GpInput",
    "PredictiveGaussian",
    "GpDataset",
    "ThetaPrior",
    "clamp_states",
    "gp_inputs",
    "mean_linear",
    "kernel_se",
    "gram",
    "gp_predict",
    "gp_extend",
    "chain_log_prior",
    "initial_state_variance",
    "simulate_gpvol",
]

STATE_CLAMP = 20.0
PARAM_NAMES = ("a_mean", "b_mean", "sigma_n", "sigma_f", "ell")
LOG_2PI = math.log(2.0 * math.pi)

_JITTER_REL = 1e-8
_JITTER_RETRIES = 3


@dataclass(frozen=True)
class GpHyperParams:
    """θ = (a, b, σ_n, σ_f, l)."""

    a_mean: float
    b_mean: float
    sigma_n: float
    sigma_f: float
    ell: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        for name in ("sigma_n", "sigma_f", "ell"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)!r}")

    def to_unconstrained(self) -> np.ndarray:
        """``[a, b, log σ_n, log σ_f, log l]``."""
        return np.array(
            [self.a_mean, self.b_mean, math.log(self.sigma_n), math.log(self.sigma_f), math.log(self.ell)]
        )

    @classmethod
    def from_unconstrained(cls, u) -> GpHyperParams:
        u = np.asarray(u, dtype=float)
        return cls(u[0], u[1], math.exp(u[2]), math.exp(u[3]), math.exp(u[4]))

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}


class GpInput(NamedTuple):
    """Transition input ``z_t = (v_{t-1}, x_{t-1})``."""

    v_prev: float
    x_prev: float


class PredictiveGaussian(NamedTuple):
    mean: float
    variance: float


@dataclass(frozen=True)
class ThetaPrior:
    """Independent Gaussian prior on the unconstrained hyperparameters.

    Coordinates are ``(a, b, log σ_n, log σ_f, log l)``; positivity of the
    scale parameters holds by construction.
    """

    loc: tuple = (0.0, 0.0, -1.0, 0.0, 0.5)
    scale: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        loc = tuple(float(v) for v in self.loc)
        scale = tuple(float(v) for v in self.scale)
        if len(loc) != 5 or len(scale) != 5:
            raise ValueError("ThetaPrior needs 5 locations and 5 scales")
        if any(not (s > 0 and math.isfinite(s)) for s in scale):
            raise ValueError(f"prior scales must be positive, got {scale}")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)

    def sample_unconstrained(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(self.loc) + np.asarray(self.scale) * rng.standard_normal((n, 5))

    def logpdf_unconstrained(self, u) -> float:
        z = (np.asarray(u, dtype=float) - self.loc) / np.asarray(self.scale)
        return float(-0.5 * np.sum(z * z) - np.sum(np.log(self.scale)) - 2.5 * LOG_2PI)

    def mean_theta(self) -> GpHyperParams:
        return GpHyperParams.from_unconstrained(self.loc)


# ---------------------------------------------------------------------------
# elementary pieces
# ---------------------------------------------------------------------------


def clamp_states(v):
    """Clip log-variances to ``[-STATE_CLAMP, STATE_CLAMP]``."""
    return np.clip(v, -STATE_CLAMP, STATE_CLAMP)


def gp_inputs(v, x) -> np.ndarray:
    """Training inputs ``z_k = (v_{k-1}, x_{k-1})`` for ``k = 2..len(v)``.

    Works on the trailing axis, so ``v`` may be a stack of chains of shape
    ``(N, t)``; the result then has shape ``(N, t-1, 2)``.
    """
    v = np.asarray(v, dtype=float)
    x = as_array(x)
    n = v.shape[-1] - 1
    if n <= 0:
        return np.zeros(v.shape[:-1] + (0, 2))
    xs = np.broadcast_to(x[:n], v.shape[:-1] + (n,))
    return np.stack([clamp_states(v[..., :-1]), xs], axis=-1)


def mean_linear(z, theta: GpHyperParams):
    z = np.asarray(z, dtype=float)
    out = theta.a_mean * z[..., 0] + theta.b_mean * z[..., 1]
    return float(out) if out.ndim == 0 else out


def _sqdist(y, z) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    d0 = y[..., :, None, 0] - z[..., None, :, 0]
    d1 = y[..., :, None, 1] - z[..., None, :, 1]
    d0 *= d0
    d1 *= d1
    d0 += d1
    return d0


def kernel_se(y, z, theta: GpHyperParams) -> float:
    """``σ_f² exp(-|y - z|² / (2 l²))`` for two single inputs."""
    d = np.asarray(y, dtype=float) - np.asarray(z, dtype=float)
    return theta.sigma_f**2 * math.exp(-float(d @ d) / (2.0 * theta.ell**2))


def gram(Y, Z, theta: GpHyperParams) -> np.ndarray:
    """Kernel matrix between input sets ``Y`` (n, 2) and ``Z`` (m, 2)."""
    return theta.sigma_f**2 * np.exp(-_sqdist(Y, Z) / (2.0 * theta.ell**2))


def initial_state_variance(theta: GpHyperParams) -> float:
    """Variance of the initial-state prior ``p(v_1 | θ) = N(0, σ_f² + σ_n²)``."""
    return theta.sigma_f**2 + theta.sigma_n**2


def _cholesky_jittered(A: np.ndarray, sigma_f2: float) -> np.ndarray:
    try:
        L = np.linalg.cholesky(A)
        if np.all(np.isfinite(L)):
            return L
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER_REL * sigma_f2
    eye = np.eye(A.shape[-1])
    for _ in range(_JITTER_RETRIES):
        try:
            L = np.linalg.cholesky(A + jitter * eye)
            if np.all(np.isfinite(L)):
                return L
        except np.linalg.LinAlgError:
            pass
        jitter *= 10.0
    diag = np.diag(A)
    raise NumericalFailure(
        f"covariance of size {A.shape[-1]} is not positive definite after "
        f"{_JITTER_RETRIES} jitter retries (diag range [{diag.min():.3g}, {diag.max():.3g}])"
    )


# ---------------------------------------------------------------------------
# single-dataset surface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GpDataset:
    """Conditioning set with a cached Cholesky factor of ``K + σ_n² I``."""

    inputs: np.ndarray
    targets: np.ndarray
    theta: GpHyperParams
    factor: np.ndarray

    @classmethod
    def empty(cls, theta: GpHyperParams) -> GpDataset:
        return cls(np.zeros((0, 2)), np.zeros(0), theta, np.zeros((0, 0)))

    @classmethod
    def build(cls, inputs, targets, theta: GpHyperParams) -> GpDataset:
        inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
        targets = np.asarray(targets, dtype=float).reshape(-1)
        if inputs.shape[0] != targets.size:
            raise ValueError(f"{inputs.shape[0]} inputs but {targets.size} targets")
        if targets.size == 0:
            return cls.empty(theta)
        A = gram(inputs, inputs, theta) + theta.sigma_n**2 * np.eye(targets.size)
        return cls(inputs, targets, theta, _cholesky_jittered(A, theta.sigma_f**2))

    @classmethod
    def from_chain(cls, v, x, theta: GpHyperParams) -> GpDataset:
        """Dataset of transitions ``(z_k, v_k)``, ``k = 2..len(v)``."""
        v = np.asarray(v, dtype=float)
        return cls.build(gp_inputs(v, x), v[1:], theta)

    def __len__(self):
        return self.targets.size


def gp_predict(d: GpDataset, z) -> PredictiveGaussian:
    """One-step predictive of the next state at input ``z``.

    The variance includes the process noise σ_n².
    """
    theta = d.theta
    z = np.asarray(z, dtype=float)
    prior_var = theta.sigma_f**2 + theta.sigma_n**2
    m_z = mean_linear(z, theta)
    if len(d) == 0:
        return PredictiveGaussian(m_z, prior_var)
    ks = gram(d.inputs, z[None, :], theta)[:, 0]
    lk = solve_triangular(d.factor, ks, lower=True, check_finite=False)
    lr = solve_triangular(d.factor, d.targets - mean_linear(d.inputs, theta), lower=True, check_finite=False)
    mean = m_z + float(lk @ lr)
    # round-off floor: the exact value can never drop below σ_n²
    var = max(prior_var - float(lk @ lk), theta.sigma_n**2)
    if not (math.isfinite(mean) and math.isfinite(var)):
        dg = np.diag(d.factor) ** 2
        raise NumericalFailure(
            f"non-finite GP prediction (n={len(d)}, pivot range [{dg.min():.3g}, {dg.max():.3g}])"
        )
    return PredictiveGaussian(mean, var)


def gp_extend(d: GpDataset, z, v_new: float) -> GpDataset:
    """Append one observation, updating the Cholesky factor in O(n²)."""
    theta = d.theta
    z = np.asarray(z, dtype=float).reshape(2)
    inputs = np.vstack([d.inputs, z[None, :]])
    targets = np.append(d.targets, float(v_new))
    kzz = theta.sigma_f**2 + theta.sigma_n**2
    n = len(d)
    if n == 0:
        return GpDataset(inputs, targets, theta, np.array([[math.sqrt(kzz)]]))
    ks = gram(d.inputs, z[None, :], theta)[:, 0]
    row = solve_triangular(d.factor, ks, lower=True, check_finite=False)
    pivot = kzz - float(row @ row)
    if not (math.isfinite(pivot) and pivot > _JITTER_REL * theta.sigma_f**2):
        return GpDataset.build(inputs, targets, theta)
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = d.factor
    L[n, :n] = row
    L[n, n] = math.sqrt(pivot)
    return GpDataset(inputs, targets, theta, L)


def chain_log_prior(v, x, theta: GpHyperParams) -> float:
    """``log p(v_{1:T} | θ, x_{1:T-1})`` with ``f`` marginalized.

    Uses one Cholesky factorization of the transition Gram matrix; the
    sequential product of one-step predictives equals the Gaussian density of
    all targets given all (chain-dependent) inputs.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    x = as_array(x)
    if v.size < 1:
        raise ValueError("chain must contain at least one state")
    if x.size < v.size - 1:
        raise ValueError(f"need at least {v.size - 1} returns, got {x.size}")
    s0 = initial_state_variance(theta)
    out = -0.5 * (LOG_2PI + math.log(s0) + v[0] ** 2 / s0)
    if v.size == 1:
        return float(out)
    X = gp_inputs(v, x)
    A = gram(X, X, theta) + theta.sigma_n**2 * np.eye(v.size - 1)
    L = _cholesky_jittered(A, theta.sigma_f**2)
    w = solve_triangular(L, v[1:] - mean_linear(X, theta), lower=True, check_finite=False)
    out += -0.5 * float(w @ w) - float(np.sum(np.log(np.diag(L)))) - 0.5 * (v.size - 1) * LOG_2PI
    if not math.isfinite(out):
        raise NumericalFailure("non-finite chain log prior")
    return float(out)


def simulate_gpvol(theta: GpHyperParams, T: int, seed: int):
    """Draw ``(x_{1:T}, v_{1:T})`` from the GP-Vol generative model.

    ``f`` is never instantiated: each ``v_t`` is sampled from the GP
    predictive conditioned on the realized trajectory, which is an exact draw
    of ``f`` along the path.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    rng = np.random.default_rng(seed)
    v = np.empty(T)
    x = np.empty(T)
    v[0] = math.sqrt(initial_state_variance(theta)) * rng.standard_normal()
    x[0] = math.exp(0.5 * clamp_states(v[0])) * rng.standard_normal()
    d = GpDataset.empty(theta)
    for t in range(1, T):
        z = (float(clamp_states(v[t - 1])), x[t - 1])
        pred = gp_predict(d, z)
        v[t] = pred.mean + math.sqrt(pred.variance) * rng.standard_normal()
        x[t] = math.exp(0.5 * clamp_states(v[t])) * rng.standard_normal()
        d = gp_extend(d, z, v[t])
    return ReturnSeries(x), v


# ---------------------------------------------------------------------------
# batched helpers for particle stacks
# ---------------------------------------------------------------------------


def batch_mean(Z, U) -> np.ndarray:
    """Linear mean for stacked inputs ``Z`` (N, ..., 2) and parameters ``U`` (N, 5)."""
    shape = (-1,) + (1,) * (Z.ndim - 2)
    return U[:, 0].reshape(shape) * Z[..., 0] + U[:, 1].reshape(shape) * Z[..., 1]


def batch_gram(Y, Z, U) -> np.ndarray:
    """Per-particle kernel matrices; ``U`` holds unconstrained θ rows."""
    sf2 = np.exp(2.0 * U[:, 3])[:, None, None]
    inv2l2 = 0.5 * np.exp(-2.0 * U[:, 4])[:, None, None]
    K = _sqdist(Y, Z)
    K *= -inv2l2
    np.exp(K, out=K)
    K *= sf2
    return K


def batch_cholesky(A, U) -> np.ndarray:
    """Cholesky of a stack, falling back to per-item jitter on failure."""
    try:
        L = np.linalg.cholesky(A)
        if np.all(np.isfinite(L)):
            return L
    except np.linalg.LinAlgError:
        pass
    sf2 = np.exp(2.0 * U[:, 3])
    return np.stack([_cholesky_jittered(A[i], sf2[i]) for i in range(A.shape[0])])


def batch_solve_lower(L, B) -> np.ndarray:
    """Solve ``L_i y_i = B_i`` for every item; ``B`` may be (N, n) or (N, n, k)."""
    out = np.empty_like(B)
    for i in range(L.shape[0]):
        out[i] = solve_triangular(L[i], B[i], lower=True, check_finite=False)
    return out


def batch_factor(X, U) -> np.ndarray:
    """Factor ``K(X_i, X_i) + σ_n,i² I`` for each particle."""
    n = X.shape[1]
    A = batch_gram(X, X, U)
    A[:, np.arange(n), np.arange(n)] += np.exp(2.0 * U[:, 2])[:, None]
    return batch_cholesky(A, U)


def batch_predict(L, X, Y, Z, U_kernel, U_mean=None):
    """Predictive mean/variance for each particle at one input ``Z[i]``.

    ``U_kernel`` must be the parameters ``L`` was built with; ``U_mean``
    (defaults to ``U_kernel``) supplies the linear-mean coefficients.

    Returns
    -------
    mean, var : ndarray
        Shape (N,).
    row : ndarray
        ``L^{-1} k_*`` of shape (N, n), reusable for a rank-one extension.
    """
    if U_mean is None:
        U_mean = U_kernel
    N, n = Y.shape
    sn2 = np.exp(2.0 * U_kernel[:, 2])
    prior_var = np.exp(2.0 * U_kernel[:, 3]) + sn2
    m_z = batch_mean(Z, U_mean)
    if n == 0:
        return m_z, prior_var, np.zeros((N, 0))
    ks = batch_gram(X, Z[:, None, :], U_kernel)[:, :, 0]
    rhs = np.stack([ks, Y - batch_mean(X, U_mean)], axis=-1)
    sol = batch_solve_lower(L, rhs)
    row, wr = sol[..., 0], sol[..., 1]
    mean = m_z + np.einsum("ij,ij->i", row, wr)
    var = np.maximum(prior_var - np.einsum("ij,ij->i", row, row), sn2)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        raise NumericalFailure("non-finite batched GP prediction")
    return mean, var, row


def batch_extend(L, row, U) -> np.ndarray:
    """Append one input to each factor given ``row = L^{-1} k_*``.

    Items whose new pivot is not safely positive get ``NaN`` on the diagonal
    and must be rebuilt by the caller.
    """
    N, n = row.shape
    pivot = np.exp(2.0 * U[:, 3]) + np.exp(2.0 * U[:, 2]) - np.einsum("ij,ij->i", row, row)
    out = np.zeros((N, n + 1, n + 1))
    out[:, :n, :n] = L
    out[:, n, :n] = row
    ok = pivot > _JITTER_REL * np.exp(2.0 * U[:, 3])
    out[:, n, n] = np.where(ok, np.sqrt(np.where(ok, pivot, 1.0)), np.nan)
    return out
