"""GARCH(1,1), EGARCH(1,1) and GJR-GARCH(1,1,1) with Gaussian innovations.

All three variance recursions are linear first-order filters in either the
variance or the log-variance, so they are evaluated with
:func:`scipy.signal.lfilter`.  Maximum likelihood uses Nelder-Mead on an
unconstrained reparameterization in which every point maps to a valid
(stationary) parameter set.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter
from scipy.special import expit

from gpvol.gp import LOG_2PI, PredictiveGaussian
from gpvol.series import as_array

__all__ = [
    "GarchParams",
    "EgarchParams",
    "GjrParams",
    "FitResult",
    "MODEL_KINDS",
    "garch_filter",
    "egarch_filter",
    "gjr_filter",
    "gaussian_loglik",
    "fit_ml",
    "predict_one_step",
]

LOG_CLAMP = 20.0
DEFAULT_RESTARTS = 5
# keeps sigmoid/tanh images strictly inside the open stationarity region
_EDGE = 1.0 - 1e-9


@dataclass(frozen=True)
class GarchParams:
    alpha0: float
    alpha1: float
    beta1: float


@dataclass(frozen=True)
class EgarchParams:
    alpha0: float
    alpha1: float
    beta1: float
    theta_g: float
    lambda_g: float


@dataclass(frozen=True)
class GjrParams:
    alpha0: float
    alpha1: float
    beta1: float
    gamma1: float


_PARAM_TYPES = {"garch": GarchParams, "egarch": EgarchParams, "gjr": GjrParams}
MODEL_KINDS = tuple(_PARAM_TYPES)


@dataclass
class FitResult:
    kind: str
    params: GarchParams | EgarchParams | GjrParams
    loglik: float
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.kind,
                "params": asdict(self.params),
                "loglik": self.loglik if math.isfinite(self.loglik) else None,
                "converged": self.converged,
                "iterations": self.iterations,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> FitResult:
        doc = json.loads(text)
        kind = doc["model"]
        loglik = doc["loglik"]
        return cls(
            kind,
            _PARAM_TYPES[kind](**doc["params"]),
            float("-inf") if loglik is None else float(loglik),
            bool(doc["converged"]),
            int(doc.get("iterations", 0)),
        )


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------


def _linear_recursion(drive, phi, init):
    """``s[0] = init``, ``s[t] = drive[t-1] + phi * s[t-1]``; returns len(drive) + 1 values."""
    out = np.empty(drive.size + 1)
    out[0] = init
    if drive.size:
        out[1:], _ = lfilter([1.0], [1.0, -phi], drive, zi=[phi * init])
    return out


def _garch_path(p, x, sigma2_init, gamma1=0.0):
    x2 = x * x
    drive = p.alpha0 + p.alpha1 * x2 + gamma1 * x2 * (x < 0)
    return _linear_recursion(drive, p.beta1, float(sigma2_init))


def _egarch_logpath(p, x, logv_init):
    drive = p.alpha0 + p.alpha1 * (p.theta_g * x + p.lambda_g * np.abs(x))
    return _linear_recursion(drive, p.beta1, float(logv_init))


def garch_filter(p: GarchParams, x, sigma2_init: float) -> np.ndarray:
    """``σ_t² = α0 + α1 x_{t-1}² + β1 σ_{t-1}²`` with ``σ_1² = sigma2_init``."""
    x = as_array(x)
    return _garch_path(p, x[:-1], sigma2_init)


def gjr_filter(p: GjrParams, x, sigma2_init: float) -> np.ndarray:
    """GARCH recursion plus ``γ1 x_{t-1}² I[x_{t-1} < 0]``."""
    x = as_array(x)
    return _garch_path(p, x[:-1], sigma2_init, p.gamma1)


def egarch_filter(p: EgarchParams, x, logv_init: float, return_clamped: bool = False):
    """``log σ_t² = α0 + α1 g(x_{t-1}) + β1 log σ_{t-1}²``, ``g(x) = θx + λ|x|``.

    The log-variance is clipped to ``[-20, 20]`` before exponentiation; with
    ``return_clamped=True`` the number of clipped entries is returned too.
    """
    x = as_array(x)
    logv = _egarch_logpath(p, x[:-1], logv_init)
    clipped = np.clip(logv, -LOG_CLAMP, LOG_CLAMP)
    path = np.exp(clipped)
    if return_clamped:
        return path, int(np.count_nonzero(clipped != logv))
    return path


def gaussian_loglik(x, sigma2) -> float:
    """``Σ_t log N(x_t; 0, σ_t²)``."""
    x = as_array(x)
    sigma2 = np.asarray(sigma2, dtype=float)
    if x.shape != sigma2.shape:
        raise ValueError(f"length mismatch: {x.size} returns, {sigma2.size} variances")
    return float(-0.5 * np.sum(LOG_2PI + np.log(sigma2) + x * x / sigma2))


def _variance_path(kind, params, x, extra_step=False):
    """Conditional variances for ``x``; with ``extra_step`` also ``σ_{T+1}²``."""
    s0 = float(np.var(x))
    xs = x if extra_step else x[:-1]
    if kind == "garch":
        return _garch_path(params, xs, s0)
    if kind == "gjr":
        return _garch_path(params, xs, s0, params.gamma1)
    logv = _egarch_logpath(params, xs, math.log(s0))
    return np.exp(np.clip(logv, -LOG_CLAMP, LOG_CLAMP))


# ---------------------------------------------------------------------------
# reparameterization
# ---------------------------------------------------------------------------


def _unpack(kind, u):
    u = [float(c) for c in u]
    if kind == "garch":
        persistence = _EDGE * float(expit(u[1]))
        share = float(expit(u[2]))
        return GarchParams(math.exp(u[0]), persistence * share, persistence * (1.0 - share))
    if kind == "gjr":
        # persistence = α1 + β1 + γ1/2 and effective ARCH weight c = α1 + γ1/2
        persistence = _EDGE * float(expit(u[1]))
        c = persistence * float(expit(u[2]))
        alpha1 = 2.0 * c * float(expit(u[3]))
        return GjrParams(math.exp(u[0]), alpha1, persistence - c, 2.0 * (c - alpha1))
    return EgarchParams(u[0], u[1], _EDGE * math.tanh(u[2]), u[3], u[4])


def _random_start(kind, rng):
    if kind == "garch":
        return np.array([rng.normal(math.log(0.1), 1.0), rng.normal(2.0, 1.0), rng.normal(-1.5, 1.0)])
    if kind == "gjr":
        return np.array(
            [rng.normal(math.log(0.1), 1.0), rng.normal(2.0, 1.0), rng.normal(-1.5, 1.0), rng.normal(0.0, 1.0)]
        )
    return np.array(
        [
            rng.normal(0.0, 0.1),
            rng.normal(0.2, 0.2),
            rng.normal(1.5, 0.5),
            rng.normal(0.0, 0.3),
            rng.normal(0.5, 0.3),
        ]
    )


def _negloglik(kind, u, x):
    try:
        params = _unpack(kind, u)
    except (OverflowError, ValueError):
        return 1e300
    with np.errstate(all="ignore"):
        s2 = _variance_path(kind, params, x)
        val = -gaussian_loglik(x, s2) if np.all(s2 > 0) else np.inf
    return val if math.isfinite(val) else 1e300


def fit_ml(kind: str, x, restarts: int = DEFAULT_RESTARTS, seed: int = 0, maxiter: int = 2000) -> FitResult:
    """Maximum-likelihood fit, best of ``restarts`` random Nelder-Mead starts.

    Restart ``k`` draws its starting point from a child stream of
    ``SeedSequence(seed)`` that depends only on ``k``, so increasing
    ``restarts`` can only improve the returned log-likelihood.  Ties go to the
    lowest restart index.
    """
    if kind not in _PARAM_TYPES:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    x = as_array(x)
    if x.size < 20:
        raise ValueError(f"fit_ml needs at least 20 returns, got {x.size}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    children = np.random.SeedSequence(seed).spawn(restarts)
    best = None
    per_restart = []
    for k, child in enumerate(children):
        u0 = _random_start(kind, np.random.default_rng(child))
        res = minimize(
            lambda u: _negloglik(kind, u, x),
            u0,
            method="Nelder-Mead",
            options={"maxiter": maxiter, "xatol": 1e-7, "fatol": 1e-9, "adaptive": True},
        )
        ll = -float(res.fun)
        ok = math.isfinite(ll) and res.fun < 1e299
        per_restart.append(ll if ok else float("-inf"))
        if ok and (best is None or ll > best[0]):
            best = (ll, res, k)
    if best is None:
        fallback = _unpack(kind, _random_start(kind, np.random.default_rng(children[0])))
        return FitResult(kind, fallback, float("-inf"), False, 0, {"restart_logliks": per_restart})
    ll, res, k = best
    return FitResult(
        kind,
        _unpack(kind, res.x),
        ll,
        True,
        int(res.nit),
        {"best_restart": k, "restart_logliks": per_restart, "optimizer_success": bool(res.success)},
    )


def predict_one_step(fit: FitResult, x) -> PredictiveGaussian:
    """Predictive ``N(0, σ_{T+1}²)`` for the return following ``x``."""
    if not fit.converged:
        raise ValueError("cannot predict from a fit that did not converge")
    x = as_array(x)
    s2 = _variance_path(fit.kind, fit.params, x, extra_step=True)
    return PredictiveGaussian(0.0, float(s2[-1]))
