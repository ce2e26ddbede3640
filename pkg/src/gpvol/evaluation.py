"""Backtests, rank statistics and volatility-surface export.

Higher predictive log-likelihood is better and receives rank 1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm, rankdata

from gpvol import baselines, gp
from gpvol.errors import BacktestError, GpVolError
from gpvol.gp import GpHyperParams, ThetaPrior
from gpvol.pgas import PgasConfig, pgas_backtest
from gpvol.series import as_array
from gpvol.smc import PredictionRecord, RapcfConfig, ParticleSystem, rapcf_run

__all__ = [
    "MethodTable",
    "RankSummary",
    "SurfaceGrid",
    "BacktestResult",
    "BaselineAdapter",
    "RapcfAdapter",
    "PgasAdapter",
    "run_backtest",
    "average_rank",
    "nemenyi",
    "wilcoxon_signed_rank",
    "surface_grid",
    "cross_section",
    "NEMENYI_Q",
    "DEFAULT_V_GRID",
    "DEFAULT_X_GRID",
]

# Two-tailed Nemenyi critical values q_α(k) for k = 2..10 (studentized range
# statistic divided by sqrt(2)), as tabulated by Demšar (2006), Table 5a.
NEMENYI_Q = {
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164),
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920),
}

EXACT_WILCOXON_MAX_N = 25

DEFAULT_V_GRID = np.arange(-4.0, 5.0 + 1e-9, 0.25)
DEFAULT_X_GRID = np.arange(-5.0, 5.0 + 1e-9, 0.25)


# ---------------------------------------------------------------------------
# tables and ranks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodTable:
    """Average predictive log-likelihoods; rows are datasets, columns methods."""

    dataset_names: tuple
    method_names: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dataset_names", tuple(self.dataset_names))
        object.__setattr__(self, "method_names", tuple(self.method_names))
        if values.shape != (len(self.dataset_names), len(self.method_names)):
            raise ValueError(
                f"values have shape {values.shape}, expected "
                f"({len(self.dataset_names)}, {len(self.method_names)})"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("MethodTable entries must be finite")

    def column(self, method: str) -> np.ndarray:
        return self.values[:, self.method_names.index(method)]

    def to_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "method", "avg_loglik"])
            for i, ds in enumerate(self.dataset_names):
                for j, m in enumerate(self.method_names):
                    w.writerow([ds, m, repr(float(self.values[i, j]))])

    @classmethod
    def from_csv(cls, path) -> MethodTable:
        """Read the long ``dataset,method,avg_loglik`` format; order of first appearance is kept."""
        cells = {}
        datasets, methods = [], []
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["dataset", "method", "avg_loglik"]:
                raise ValueError(f"{path}: expected header 'dataset,method,avg_loglik', got {reader.fieldnames}")
            for lineno, row in enumerate(reader, start=2):
                ds, m = row["dataset"], row["method"]
                try:
                    value = float(row["avg_loglik"])
                except (TypeError, ValueError):
                    raise ValueError(f"{path}: line {lineno}: bad avg_loglik {row['avg_loglik']!r}") from None
                if (ds, m) in cells:
                    raise ValueError(f"{path}: line {lineno}: duplicate entry for ({ds}, {m})")
                cells[ds, m] = value
                if ds not in datasets:
                    datasets.append(ds)
                if m not in methods:
                    methods.append(m)
        missing = [(d, m) for d in datasets for m in methods if (d, m) not in cells]
        if missing:
            raise ValueError(f"{path}: table is not rectangular; missing {missing[:3]}")
        values = np.array([[cells[d, m] for m in methods] for d in datasets])
        return cls(tuple(datasets), tuple(methods), values)


def average_rank(tbl: MethodTable) -> dict:
    """Mean per-dataset rank of each method (1 = highest log-likelihood, ties averaged)."""
    if len(tbl.method_names) < 2:
        raise ValueError("average_rank needs at least 2 methods")
    ranks = rankdata(-tbl.values, axis=1, method="average")
    return dict(zip(tbl.method_names, ranks.mean(axis=0).tolist()))


@dataclass(frozen=True)
class RankSummary:
    avg_ranks: dict
    critical_distance: float
    alpha: float
    significant_pairs: tuple = ()

    def to_json(self) -> str:
        return json.dumps(
            {
                "avg_ranks": self.avg_ranks,
                "cd": self.critical_distance,
                "alpha": self.alpha,
                "significant_pairs": [list(p) for p in self.significant_pairs],
            }
        )


def nemenyi(tbl: MethodTable, alpha: float = 0.05) -> RankSummary:
    """Nemenyi post-hoc comparison of average ranks."""
    k = len(tbl.method_names)
    n = len(tbl.dataset_names)
    table = NEMENYI_Q.get(round(float(alpha), 10))
    if table is None or not 2 <= k <= len(table) + 1:
        raise ValueError(f"no tabulated q value for alpha={alpha}, k={k}")
    q = table[k - 2]
    cd = q * math.sqrt(k * (k + 1) / (6.0 * n))
    ranks = average_rank(tbl)
    pairs = tuple((m1, m2) for m1, m2 in combinations(tbl.method_names, 2) if abs(ranks[m1] - ranks[m2]) > cd)
    return RankSummary(ranks, cd, float(alpha), pairs)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------


def _signed_rank_null_counts(doubled_ranks):
    """Number of sign assignments giving each value of the doubled W+ statistic.

    Subset-sum counting over integer (doubled) ranks reproduces the full
    2^n enumeration exactly, including tied ranks, in O(n · Σ ranks).
    """
    counts = np.zeros(int(doubled_ranks.sum()) + 1)
    counts[0] = 1.0
    top = 0
    for r in doubled_ranks:
        counts[r : top + r + 1] += counts[: top + 1].copy()
        top += r
    return counts


def wilcoxon_signed_rank(a, b, method: str = "auto") -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped; tied absolute differences share average
    ranks.  With ``method="auto"`` the null distribution is exact for up to
    25 non-zero pairs and a tie-corrected normal approximation with
    continuity correction beyond; ``"exact"`` or ``"normal"`` force one.
    If every difference is zero the p-value is 1.0.
    """
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"method must be 'auto', 'exact' or 'normal', got {method!r}")
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    # rounding keeps differences such as 1.30 - 1.29 and 1.41 - 1.40 tied
    d = np.round(a - b, 12)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    if method == "exact" or (method == "auto" and n <= EXACT_WILCOXON_MAX_N):
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_null_counts(doubled)
        values = np.arange(counts.size) / 2.0
        extreme = np.abs(values - mean) >= abs(w_plus - mean) - 1e-9
        return float(min(1.0, counts[extreme].sum() / 2.0**n))
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes**3 - tie_sizes) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


# ---------------------------------------------------------------------------
# backtests
# ---------------------------------------------------------------------------


@dataclass
class BacktestResult:
    method: str
    records: list
    mean_loglik: float
    dataset: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class BaselineAdapter:
    """Refit a GARCH-family model by maximum likelihood at every step."""

    kind: str
    restarts: int = baselines.DEFAULT_RESTARTS
    seed: int = 0

    @property
    def name(self):
        return self.kind

    def backtest(self, x, warmup):
        records = []
        for t in range(warmup, x.size):
            fit = baselines.fit_ml(self.kind, x[:t], restarts=self.restarts, seed=self.seed)
            if not fit.converged:
                raise GpVolError(f"{self.kind} fit failed on x[:{t}]")
            pred = baselines.predict_one_step(fit, x[:t])
            ll = -0.5 * (gp.LOG_2PI + math.log(pred.variance) + x[t] ** 2 / pred.variance)
            records.append(PredictionRecord(t + 1, ll, math.log(pred.variance), 0.0))
        return records, {}


@dataclass(frozen=True)
class RapcfAdapter:
    priors: ThetaPrior = field(default_factory=ThetaPrior)
    cfg: RapcfConfig = field(default_factory=RapcfConfig)

    name = "gpvol"

    def backtest(self, x, warmup):
        records, final = rapcf_run(x, self.priors, self.cfg, warmup)
        return records, {"final_system": final}


@dataclass(frozen=True)
class PgasAdapter:
    prior: ThetaPrior = field(default_factory=ThetaPrior)
    cfg: PgasConfig = field(default_factory=PgasConfig)

    name = "pgas"

    def backtest(self, x, warmup):
        return pgas_backtest(x, self.prior, self.cfg, warmup), {}


def run_backtest(model, x, warmup: int, dataset: str | None = None) -> BacktestResult:
    """One-step-ahead rolling evaluation of ``model`` on ``x`` after ``warmup`` points.

    Failures are re-raised as :class:`BacktestError` naming the dataset and,
    where known, the step.
    """
    x = as_array(x)
    if not 20 <= warmup < x.size:
        raise ValueError(f"need 20 <= warmup < len(x); got warmup={warmup}, len(x)={x.size}")
    try:
        records, diagnostics = model.backtest(x, warmup)
    except GpVolError as exc:
        step = getattr(exc, "t", None)
        raise BacktestError(f"{model.name} backtest failed: {exc}", dataset, step) from exc
    lls = np.array([r.predictive_loglik for r in records])
    return BacktestResult(model.name, records, float(lls.mean()), dataset, diagnostics)


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurfaceGrid:
    v_axis: np.ndarray
    x_axis: np.ndarray
    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        shape = (len(self.v_axis), len(self.x_axis))
        if self.mean.shape != shape or self.sd.shape != shape:
            raise ValueError(f"mean/sd must have shape {shape}")
        if np.any(self.sd < 0):
            raise ValueError("sd must be non-negative")

    def to_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["v_prev", "x_prev", "mean", "sd"])
            for i, v in enumerate(self.v_axis):
                for j, xv in enumerate(self.x_axis):
                    w.writerow([f"{v:.17g}", f"{xv:.17g}", f"{self.mean[i, j]:.17g}", f"{self.sd[i, j]:.17g}"])


def _mixture_moments(sys: ParticleSystem, Z):
    """Weighted mixture mean and variance of the particle predictives at inputs ``Z`` (G, 2)."""
    w = sys.weights
    U, Uc = sys.u, sys.cache_u
    means = np.empty((w.size, Z.shape[0]))
    variances = np.empty_like(means)
    n = sys.chains.shape[1] - 1 if sys.t > 0 else 0
    for i in range(w.size):
        a, b = U[i, 0], U[i, 1]
        sn2, sf2, ell = math.exp(2 * Uc[i, 2]), math.exp(2 * Uc[i, 3]), math.exp(Uc[i, 4])
        mz = a * Z[:, 0] + b * Z[:, 1]
        if n == 0:
            means[i] = mz
            variances[i] = sf2 + sn2
            continue
        X = gp.gp_inputs(sys.chains[i], sys.x)
        theta_k = GpHyperParams(U[i, 0], U[i, 1], math.sqrt(sn2), math.sqrt(sf2), ell)
        Ks = gp.gram(X, Z, theta_k)
        L = sys.factors[i]
        lk = solve_triangular(L, Ks, lower=True, check_finite=False)
        lr = solve_triangular(L, sys.chains[i, 1:] - (a * X[:, 0] + b * X[:, 1]), lower=True, check_finite=False)
        means[i] = mz + lr @ lk
        variances[i] = np.maximum(sf2 + sn2 - np.sum(lk * lk, axis=0), sn2)
    mix_mean = w @ means
    mix_var = np.maximum(w @ (variances + means**2) - mix_mean**2, 0.0)
    return mix_mean, mix_var


def surface_grid(sys: ParticleSystem, v_grid=None, x_grid=None) -> SurfaceGrid:
    """Particle-mixture predictive mean and sd of ``v_t`` over a grid of ``(v_{t-1}, x_{t-1})``."""
    v_grid = DEFAULT_V_GRID if v_grid is None else np.asarray(v_grid, dtype=float)
    x_grid = DEFAULT_X_GRID if x_grid is None else np.asarray(x_grid, dtype=float)
    if v_grid.size == 0 or x_grid.size == 0:
        raise ValueError("grids must be non-empty")
    if np.any(np.abs(v_grid) > gp.STATE_CLAMP):
        raise ValueError(f"v grid must lie within ±{gp.STATE_CLAMP}")
    vv, xx = np.meshgrid(v_grid, x_grid, indexing="ij")
    mean, var = _mixture_moments(sys, np.column_stack([vv.ravel(), xx.ravel()]))
    shape = vv.shape
    return SurfaceGrid(v_grid, x_grid, mean.reshape(shape), np.sqrt(var).reshape(shape))


def cross_section(sys: ParticleSystem, axis: str, fixed_value: float = 0.0, grid=None):
    """1-D slice of the predictive surface with the other input pinned.

    Returns ``(mean, sd, lower, upper)`` where the band is ``mean ± 2 sd``.
    """
    if axis == "v":
        grid = DEFAULT_V_GRID if grid is None else np.asarray(grid, dtype=float)
        s = surface_grid(sys, grid, [fixed_value])
        mean, sd = s.mean[:, 0], s.sd[:, 0]
    elif axis == "x":
        grid = DEFAULT_X_GRID if grid is None else np.asarray(grid, dtype=float)
        s = surface_grid(sys, [fixed_value], grid)
        mean, sd = s.mean[0], s.sd[0]
    else:
        raise ValueError(f"axis must be 'v' or 'x', got {axis!r}")
    return mean, sd, mean - 2 * sd, mean + 2 * sd
