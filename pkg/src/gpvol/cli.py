"""``gpvol`` command-line interface.

Every option can also be given in a flat ``key = value`` config file passed
with ``--config``; keys are the long flag names without the leading dashes.
Flags override the file, which overrides built-in defaults.  The resolved
configuration is echoed to stderr in the same format, so it can be fed back
with ``--config`` to repeat a run.

Exit status: 0 on success, 1 when a computation fails, 2 for usage errors
(bad flags or values, missing or malformed input files).
"""

from __future__ import annotations

import argparse
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from gpvol import __version__
from gpvol.errors import GpVolError, SeriesError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _float_list(text):
    parts = [p for p in str(text).replace(",", " ").split() if p]
    values = tuple(float(p) for p in parts)
    if len(values) != 5:
        raise ValueError("expected 5 comma-separated numbers")
    return values


def _flag(text):
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (converter, default, help)
OPTIONS = {
    "seed": (int, None, "random seed (required for stochastic commands)"),
    "out": (str, None, "output path (default: stdout where sensible)"),
    "data": (str, None, "returns CSV with header t,x"),
    "prices": (str, None, "prices CSV with header timestamp,price"),
    "max-flat-run": (int, 3, "longest run of identical prices kept by cleaning"),
    "T": (int, 100, "series length"),
    "a": (float, 0.9, "generating a (mean coefficient on v)"),
    "b": (float, -0.3, "generating b (mean coefficient on x)"),
    "sigma-n": (float, 0.1, "generating process noise sd"),
    "sigma-f": (float, 0.3, "generating GP amplitude"),
    "ell": (float, 1.0, "generating GP length scale"),
    "model": (str, "garch", "baseline model: garch, egarch or gjr"),
    "restarts": (int, 5, "optimizer restarts per maximum-likelihood fit"),
    "method": (str, "rapcf", "backtest method: rapcf, pgas, garch, egarch or gjr"),
    "warmup": (int, 100, "observations used before the first prediction"),
    "particles": (int, 200, "RAPCF particles"),
    "shrinkage": (float, 0.95, "RAPCF shrinkage in (0, 1)"),
    "jitter-floor": (float, 1e-8, "minimum RAPCF jitter variance"),
    "frozen-cache": (_flag, False, "reuse Cholesky caches under jittered θ (approximate, faster)"),
    "quad-nodes": (int, 20, "Gauss-Hermite nodes for predictive densities"),
    "pgas-particles": (int, 10, "PGAS particles"),
    "iters": (int, 100, "PGAS iterations"),
    "burn-in": (int, None, "PGAS burn-in (default: iters/5)"),
    "slice-width": (float, 1.0, "slice sampler initial width"),
    "prior-loc": (_float_list, (0.0, 0.0, -1.0, 0.0, 0.5), "prior means of (a, b, log σn, log σf, log l)"),
    "prior-scale": (_float_list, (1.0,) * 5, "prior sds of (a, b, log σn, log σf, log l)"),
    "table": (str, None, "method table CSV with header dataset,method,avg_loglik"),
    "alpha": (float, 0.05, "Nemenyi significance level (0.05 or 0.10)"),
    "v-min": (float, -4.0, "surface grid lower v"),
    "v-max": (float, 5.0, "surface grid upper v"),
    "x-min": (float, -5.0, "surface grid lower x"),
    "x-max": (float, 5.0, "surface grid upper x"),
    "step": (float, 0.25, "surface grid spacing"),
    "datasets": (int, 10, "number of synthetic datasets"),
    "threads": (int, None, "BLAS threads (default: machine parallelism)"),
}

COMMANDS = {
    "prepare": ("clean prices, take log-returns and standardize", ["prices", "max-flat-run", "out"], False),
    "simulate": ("draw a GP-Vol series", ["T", "a", "b", "sigma-n", "sigma-f", "ell", "seed", "out"], True),
    "fit-baseline": ("maximum-likelihood fit of a GARCH-family model", ["data", "model", "restarts", "seed", "out"], True),
    "backtest": (
        "rolling one-step-ahead predictive log-likelihoods (JSON Lines)",
        ["data", "method", "warmup", "seed", "particles", "shrinkage", "jitter-floor", "frozen-cache", "quad-nodes",
         "pgas-particles", "iters", "burn-in", "slice-width", "restarts", "prior-loc", "prior-scale", "out"],
        True,
    ),
    "pgas": (
        "batch PGAS posterior draws (JSON Lines)",
        ["data", "pgas-particles", "iters", "burn-in", "slice-width", "seed", "prior-loc", "prior-scale", "out"],
        True,
    ),
    "compare": ("average ranks and Nemenyi critical distance", ["table", "alpha", "out"], False),
    "surface": (
        "predictive mean/sd surface of the learned transition",
        ["data", "particles", "shrinkage", "jitter-floor", "frozen-cache", "seed", "prior-loc", "prior-scale",
         "v-min", "v-max", "x-min", "x-max", "step", "out"],
        True,
    ),
    "recovery": (
        "hyperparameter recovery on synthetic data",
        ["datasets", "T", "a", "b", "sigma-n", "sigma-f", "ell", "particles", "shrinkage", "seed", "prior-loc", "prior-scale", "out"],
        True,
    ),
    "speed": (
        "RAPCF vs PGAS wall-clock comparison",
        ["data", "T", "warmup", "particles", "pgas-particles", "iters", "seed", "out"],
        True,
    ),
}

REQUIRED = {
    "prepare": ["prices"],
    "fit-baseline": ["data"],
    "backtest": ["data"],
    "pgas": ["data"],
    "compare": ["table"],
    "surface": ["data"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpvol", description="GP-Vol volatility modelling toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (help_text, keys, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key = value config file")
        for key in keys + ["threads"]:
            conv, default, help_ = OPTIONS[key]
            shown = "" if default is None else f" [default: {default}]"
            if conv is _flag:
                p.add_argument(f"--{key}", nargs="?", const="true", default=None, help=help_ + shown)
            else:
                p.add_argument(f"--{key}", default=None, help=help_ + shown)
    return parser


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config: file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config {path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return str(value)


def resolve_config(command: str, flags: dict, file_values: dict) -> dict:
    """Merge defaults < file < flags and convert every value."""
    keys = COMMANDS[command][1] + ["threads"]
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise UsageError(f"unknown key for '{command}': {unknown[0]}")
    resolved = {}
    for key in keys:
        conv, default, _ = OPTIONS[key]
        raw = flags.get(key.replace("-", "_"))
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            resolved[key] = default
            continue
        try:
            resolved[key] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid value for {key}: {raw!r} ({exc})") from None
    if COMMANDS[command][2] and resolved.get("seed") is None:
        raise UsageError(f"'{command}' is stochastic: --seed is required")
    for key in REQUIRED.get(command, []):
        if resolved.get(key) is None:
            raise UsageError(f"missing required option: {key}")
    return resolved


def _echo(command, cfg):
    lines = [f"# gpvol {command}"] + [f"{k} = {_format_value(v)}" for k, v in cfg.items() if v is not None]
    print("\n".join(lines), file=sys.stderr)


# ---------------------------------------------------------------------------
# validated constructors (run before any computation)
# ---------------------------------------------------------------------------


def _get(cfg, key):
    """Resolved value, or the documented default for keys a command does not expose."""
    return cfg[key] if key in cfg else OPTIONS[key][1]


def _priors(cfg):
    from gpvol.gp import ThetaPrior

    try:
        return ThetaPrior(_get(cfg, "prior-loc"), _get(cfg, "prior-scale"))
    except ValueError as exc:
        raise UsageError(f"prior-scale: {exc}") from None


def _rapcf_cfg(cfg, seed):
    from gpvol.smc import RapcfConfig

    try:
        return RapcfConfig(
            n_particles=_get(cfg, "particles"),
            shrinkage=_get(cfg, "shrinkage"),
            jitter_floor=_get(cfg, "jitter-floor"),
            quad_nodes=_get(cfg, "quad-nodes"),
            seed=seed,
            frozen_cache=_get(cfg, "frozen-cache"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _pgas_cfg(cfg, seed):
    from gpvol.pgas import PgasConfig

    try:
        return PgasConfig(
            n_particles=_get(cfg, "pgas-particles"),
            n_iters=_get(cfg, "iters"),
            burn_in=_get(cfg, "burn-in"),
            seed=seed,
            slice_width=_get(cfg, "slice-width"),
            quad_nodes=_get(cfg, "quad-nodes"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _theta(cfg):
    from gpvol.gp import GpHyperParams

    try:
        return GpHyperParams(cfg["a"], cfg["b"], cfg["sigma-n"], cfg["sigma-f"], cfg["ell"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_returns(cfg, key="data"):
    from gpvol.series import read_returns_csv

    path = Path(cfg[key])
    if not path.is_file():
        raise UsageError(f"{key}: file not found: {path}")
    try:
        return read_returns_csv(path)
    except SeriesError as exc:
        raise UsageError(f"{key}: {exc}") from None


def _positive(cfg, *keys):
    for key in keys:
        if cfg.get(key) is not None and cfg[key] < 1:
            raise UsageError(f"{key} must be >= 1, got {cfg[key]}")


def _sink(path):
    return nullcontext(sys.stdout) if path in (None, "-") else open(path, "w", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands; each returns a zero-argument callable doing the computation so
# that all validation finishes before anything expensive starts
# ---------------------------------------------------------------------------


def _cmd_prepare(cfg):
    from gpvol.series import clean_prices, read_prices_csv, standardize, to_returns, write_returns_csv

    path = Path(cfg["prices"])
    if not path.is_file():
        raise UsageError(f"prices: file not found: {path}")
    try:
        prices = read_prices_csv(path)
    except SeriesError as exc:
        raise UsageError(f"prices: {exc}") from None
    if cfg["out"] is None:
        raise UsageError("missing required option: out")

    def run():
        x = standardize(to_returns(clean_prices(prices.validate(), cfg["max-flat-run"])))
        write_returns_csv(cfg["out"], x)

    return run


def _cmd_simulate(cfg):
    from gpvol.gp import simulate_gpvol
    from gpvol.series import write_returns_csv

    theta = _theta(cfg)
    _positive(cfg, "T")
    if cfg["out"] is None:
        raise UsageError("missing required option: out")

    def run():
        x, _ = simulate_gpvol(theta, cfg["T"], cfg["seed"])
        write_returns_csv(cfg["out"], x)

    return run


def _cmd_fit_baseline(cfg):
    from gpvol.baselines import MODEL_KINDS, fit_ml

    if cfg["model"] not in MODEL_KINDS:
        raise UsageError(f"model must be one of {', '.join(MODEL_KINDS)}, got {cfg['model']!r}")
    _positive(cfg, "restarts")
    x = _load_returns(cfg)

    def run():
        fit = fit_ml(cfg["model"], x, restarts=cfg["restarts"], seed=cfg["seed"])
        if not fit.converged:
            raise GpVolError(f"{cfg['model']} fit did not converge")
        with _sink(cfg["out"]) as fh:
            fh.write(fit.to_json() + "\n")

    return run


def _cmd_backtest(cfg):
    from gpvol.baselines import MODEL_KINDS
    from gpvol.evaluation import BaselineAdapter, PgasAdapter, RapcfAdapter, run_backtest

    method = cfg["method"]
    x = _load_returns(cfg)
    if not 20 <= cfg["warmup"] < len(x):
        raise UsageError(f"warmup must satisfy 20 <= warmup < {len(x)}, got {cfg['warmup']}")
    if method == "rapcf":
        model = RapcfAdapter(_priors(cfg), _rapcf_cfg(cfg, cfg["seed"]))
    elif method == "pgas":
        model = PgasAdapter(_priors(cfg), _pgas_cfg(cfg, cfg["seed"]))
    elif method in MODEL_KINDS:
        _positive(cfg, "restarts")
        model = BaselineAdapter(method, cfg["restarts"], cfg["seed"])
    else:
        raise UsageError(f"method must be rapcf, pgas or one of {', '.join(MODEL_KINDS)}, got {method!r}")

    def run():
        result = run_backtest(model, x, cfg["warmup"], dataset=str(cfg["data"]))
        with _sink(cfg["out"]) as fh:
            for r in result.records:
                fh.write(r.to_json() + "\n")
        print(f"mean predictive log-likelihood: {result.mean_loglik:.6f}", file=sys.stderr)

    return run


def _cmd_pgas(cfg):
    from gpvol.pgas import default_init_chain, pgas_run

    x = _load_returns(cfg)
    priors = _priors(cfg)
    pcfg = _pgas_cfg(cfg, cfg["seed"])

    def run():
        draws = pgas_run(x, priors, default_init_chain(x), priors.mean_theta(), pcfg)
        with _sink(cfg["out"]) as fh:
            fh.write(draws.to_jsonl())
        if draws.slice_failures:
            print(f"slice sampler kept {draws.slice_failures} coordinate(s) after failed retries", file=sys.stderr)

    return run


def _cmd_compare(cfg):
    from gpvol.evaluation import NEMENYI_Q, MethodTable, nemenyi

    path = Path(cfg["table"])
    if not path.is_file():
        raise UsageError(f"table: file not found: {path}")
    if round(cfg["alpha"], 10) not in NEMENYI_Q:
        raise UsageError(f"alpha must be 0.05 or 0.10, got {cfg['alpha']}")
    try:
        tbl = MethodTable.from_csv(path)
    except ValueError as exc:
        raise UsageError(f"table: {exc}") from None
    if not 2 <= len(tbl.method_names) <= 10:
        raise UsageError(f"table: no tabulated q value for k={len(tbl.method_names)} methods")

    def run():
        summary = nemenyi(tbl, cfg["alpha"])
        with _sink(cfg["out"]) as fh:
            fh.write(summary.to_json() + "\n")

    return run


def _cmd_surface(cfg):
    from gpvol.evaluation import surface_grid
    from gpvol.smc import rapcf_run

    x = _load_returns(cfg)
    priors = _priors(cfg)
    rcfg = _rapcf_cfg(cfg, cfg["seed"])
    if not cfg["step"] > 0 or cfg["v-min"] > cfg["v-max"] or cfg["x-min"] > cfg["x-max"]:
        raise UsageError("step: grid bounds must be ordered and step positive")
    if max(abs(cfg["v-min"]), abs(cfg["v-max"])) > 20:
        raise UsageError("v-min/v-max must lie within ±20")
    if len(x) < 2:
        raise UsageError("data: need at least 2 returns")
    if cfg["out"] is None:
        raise UsageError("missing required option: out")
    v_grid = np.arange(cfg["v-min"], cfg["v-max"] + 1e-9, cfg["step"])
    x_grid = np.arange(cfg["x-min"], cfg["x-max"] + 1e-9, cfg["step"])

    def run():
        _, final = rapcf_run(x, priors, rcfg, warmup=len(x) - 1)
        surface_grid(final, v_grid, x_grid).to_csv(cfg["out"])

    return run


def _cmd_recovery(cfg):
    from gpvol.synthbench import recovery_experiment, write_recovery_csv

    theta = _theta(cfg)
    priors = _priors(cfg)
    rcfg = _rapcf_cfg(cfg, cfg["seed"])
    _positive(cfg, "datasets", "T")
    if cfg["out"] is None:
        raise UsageError("missing required option: out")

    def run():
        reports = recovery_experiment(theta, cfg["datasets"], cfg["T"], rcfg, priors)
        write_recovery_csv(cfg["out"], reports)
        for name in ("a_mean", "b_mean"):
            hits = sum(r.covered_at_end[name] for r in reports)
            print(f"{name}: truth covered at the end in {hits}/{len(reports)} datasets", file=sys.stderr)

    return run


def _cmd_speed(cfg):
    from gpvol.gp import ThetaPrior, simulate_gpvol
    from gpvol.synthbench import DEFAULT_THETA, speed_experiment, write_timing_csv

    if cfg["data"] is not None:
        x = _load_returns(cfg)
    else:
        _positive(cfg, "T")
        x = None
    rcfg = _rapcf_cfg(cfg, cfg["seed"])
    pcfg = _pgas_cfg(cfg, cfg["seed"])
    n = len(x) if x is not None else cfg["T"]
    if not 0 < cfg["warmup"] < n:
        raise UsageError(f"warmup must satisfy 0 < warmup < {n}, got {cfg['warmup']}")
    if cfg["out"] is None:
        raise UsageError("missing required option: out")

    def run():
        data = x if x is not None else simulate_gpvol(DEFAULT_THETA, cfg["T"], cfg["seed"])[0]
        reports = speed_experiment(data, rcfg, [pcfg], cfg["warmup"], ThetaPrior())
        write_timing_csv(cfg["out"], reports)

    return run


HANDLERS = {
    "prepare": _cmd_prepare,
    "simulate": _cmd_simulate,
    "fit-baseline": _cmd_fit_baseline,
    "backtest": _cmd_backtest,
    "pgas": _cmd_pgas,
    "compare": _cmd_compare,
    "surface": _cmd_surface,
    "recovery": _cmd_recovery,
    "speed": _cmd_speed,
}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError(f"threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, vars(args), file_values)
        _echo(args.command, cfg)
        with _thread_limit(cfg["threads"]):
            job = HANDLERS[args.command](cfg)
            job()
    except UsageError as exc:
        print(f"gpvol {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GpVolError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"gpvol {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"gpvol {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
