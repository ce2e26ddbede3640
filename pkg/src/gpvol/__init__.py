"""GP-Vol: Gaussian-process volatility models with online (RAPCF) and batch (PGAS) inference."""

from gpvol.errors import BacktestError, FilterDivergence, GpVolError, NumericalFailure, SeriesError
from gpvol.gp import GpDataset, GpHyperParams, ThetaPrior, chain_log_prior, gp_extend, gp_predict, simulate_gpvol
from gpvol.series import PriceSeries, ReturnSeries, clean_prices, standardize, to_returns
from gpvol.smc import RapcfConfig, rapcf_run
from gpvol.pgas import PgasConfig, pgas_backtest, pgas_run

__version__ = "0.1.0"

__all__ = [
    "BacktestError",
    "FilterDivergence",
    "GpVolError",
    "NumericalFailure",
    "SeriesError",
    "GpDataset",
    "GpHyperParams",
    "ThetaPrior",
    "chain_log_prior",
    "gp_extend",
    "gp_predict",
    "simulate_gpvol",
    "PriceSeries",
    "ReturnSeries",
    "clean_prices",
    "standardize",
    "to_returns",
    "RapcfConfig",
    "rapcf_run",
    "PgasConfig",
    "pgas_backtest",
    "pgas_run",
    "__version__",
]
