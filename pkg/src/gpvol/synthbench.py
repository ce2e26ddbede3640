"""Synthetic experiments: hyperparameter recovery and RAPCF-vs-PGAS timing."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from gpvol.errors import GpVolError
from gpvol.gp import PARAM_NAMES, GpHyperParams, ThetaPrior, simulate_gpvol
from gpvol.pgas import pgas_backtest
from gpvol.series import as_array
from gpvol.smc import RapcfConfig, rapcf_run

__all__ = [
    "DEFAULT_THETA",
    "RecoveryReport",
    "TimingReport",
    "recovery_experiment",
    "speed_experiment",
    "write_recovery_csv",
    "write_timing_csv",
]

DEFAULT_THETA = GpHyperParams(0.9, -0.3, 0.1, 0.3, 1.0)


@dataclass(frozen=True)
class RecoveryReport:
    """Per-step 90% intervals for one synthetic dataset.

    ``lo``/``hi`` map parameter names to arrays indexed by ``t = 0..T``
    (``t = 0`` is the prior).
    """

    seed: int
    lo: dict
    hi: dict
    truth: GpHyperParams
    covered_at_end: dict

    def width(self, name: str) -> np.ndarray:
        return self.hi[name] - self.lo[name]


@dataclass(frozen=True)
class TimingReport:
    method: str
    config: str
    wall_seconds: float
    mean_pred_ll: float


def recovery_experiment(theta_true: GpHyperParams, n_datasets: int, T: int, cfg: RapcfConfig, priors: ThetaPrior | None = None):
    """Simulate ``n_datasets`` series (seeds ``0..n-1``) and track RAPCF intervals.

    The filter for dataset ``s`` uses seed ``cfg.seed + s``.
    """
    if n_datasets < 1:
        raise ValueError("n_datasets must be >= 1")
    priors = priors or ThetaPrior()
    truth = theta_true.as_dict()
    reports = []
    for s in range(n_datasets):
        x, _ = simulate_gpvol(theta_true, T, s)
        try:
            _, final = rapcf_run(x, priors, replace(cfg, seed=cfg.seed + s), warmup=0)
        except GpVolError as exc:
            raise type(exc)(f"dataset seed {s}: {exc}") from exc
        lo = {p: np.array([h["q05"][p] for h in final.history]) for p in PARAM_NAMES}
        hi = {p: np.array([h["q95"][p] for h in final.history]) for p in PARAM_NAMES}
        covered = {p: bool(lo[p][-1] <= truth[p] <= hi[p][-1]) for p in PARAM_NAMES}
        reports.append(RecoveryReport(s, lo, hi, theta_true, covered))
    return reports


def write_recovery_csv(path, reports):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "t", "param", "q05", "q95", "truth"])
        for r in reports:
            truth = r.truth.as_dict()
            for p in PARAM_NAMES:
                for t, (lo, hi) in enumerate(zip(r.lo[p], r.hi[p])):
                    w.writerow([r.seed, t, p, f"{lo:.17g}", f"{hi:.17g}", f"{truth[p]:.17g}"])


def _describe(cfg) -> str:
    if isinstance(cfg, RapcfConfig):
        return f"N={cfg.n_particles}"
    return f"N={cfg.n_particles},M={cfg.n_iters}"


def speed_experiment(x, rapcf_cfg: RapcfConfig, pgas_cfgs, warmup: int, priors: ThetaPrior | None = None):
    """Wall-clock both methods on the same data.

    A short untimed RAPCF run first warms up imports and BLAS threads so the
    first measurement is not penalized.
    """
    x = as_array(x)
    priors = priors or ThetaPrior()
    rapcf_run(x[: min(x.size, warmup + 2)], priors, replace(rapcf_cfg, n_particles=2), warmup)

    out = []
    t0 = time.perf_counter()
    records, _ = rapcf_run(x, priors, rapcf_cfg, warmup)
    elapsed = time.perf_counter() - t0
    out.append(TimingReport("rapcf", _describe(rapcf_cfg), elapsed, float(np.mean([r.predictive_loglik for r in records]))))
    for cfg in pgas_cfgs:
        t0 = time.perf_counter()
        records = pgas_backtest(x, priors, cfg, warmup)
        elapsed = time.perf_counter() - t0
        out.append(TimingReport("pgas", _describe(cfg), elapsed, float(np.mean([r.predictive_loglik for r in records]))))
    return out


def write_timing_csv(path, reports):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "config", "seconds", "mean_ll"])
        for r in reports:
            w.writerow([r.method, r.config, f"{r.wall_seconds:.6g}", f"{r.mean_pred_ll:.17g}"])
