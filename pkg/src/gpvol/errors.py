"""Exception types shared across the package."""


class GpVolError(Exception):
    """Base class for all errors raised by :mod:`gpvol`."""


class SeriesError(GpVolError, ValueError):
    """Raised when price or return data violates a preprocessing precondition."""


class NumericalFailure(GpVolError, ArithmeticError):
    """Raised when a covariance factorization or prediction becomes non-finite."""


class FilterDivergence(GpVolError, RuntimeError):
    """Raised when every particle weight collapses to zero or NaN.

    Parameters
    ----------
    t : int
        1-based time index of the observation that caused the collapse.
    """

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"filter divergence at t={t}: all weights zero or NaN")


class BacktestError(GpVolError, RuntimeError):
    """Wraps a model failure with the dataset/step where it happened."""

    def __init__(self, message, dataset=None, step=None):
        self.dataset = dataset
        self.step = step
        where = []
        if dataset is not None:
            where.append(f"dataset={dataset}")
        if step is not None:
            where.append(f"step={step}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
