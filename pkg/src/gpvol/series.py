"""Price ingestion, cleaning, log-returns and standardization.

The pipeline is ``read_prices_csv -> clean_prices -> to_returns -> standardize``.
Every step is a pure value-to-value transform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from gpvol.errors import SeriesError

__all__ = [
    "PriceSeries",
    "ReturnSeries",
    "clean_prices",
    "to_returns",
    "standardize",
    "unstandardize",
    "read_prices_csv",
    "write_prices_csv",
    "read_returns_csv",
    "write_returns_csv",
    "as_array",
]

DEFAULT_MAX_FLAT_RUN = 3


@dataclass(frozen=True)
class PriceSeries:
    """Ordered price observations.

    ``timestamps`` may be any ordered values (``datetime``, ``numpy.datetime64``
    or plain numbers).  Structural checks (matching lengths) happen here; the
    positivity and ordering invariants are checked by the operations that rely
    on them so that they can report their own error messages.
    """

    timestamps: tuple
    prices: np.ndarray

    def __post_init__(self):
        prices = np.asarray(self.prices, dtype=float).reshape(-1)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if len(self.timestamps) != prices.size:
            raise SeriesError(
                f"timestamps ({len(self.timestamps)}) and prices ({prices.size}) differ in length"
            )

    @classmethod
    def from_values(cls, prices, timestamps=None) -> PriceSeries:
        prices = np.asarray(prices, dtype=float).reshape(-1)
        if timestamps is None:
            timestamps = range(prices.size)
        return cls(tuple(timestamps), prices)

    def __len__(self):
        return self.prices.size

    def validate(self):
        """Raise :class:`SeriesError` unless the series satisfies all invariants."""
        if len(self) < 2:
            raise SeriesError("insufficient data: a price series needs at least 2 observations")
        if not np.all(np.isfinite(self.prices)) or np.any(self.prices <= 0):
            bad = int(np.flatnonzero(~(self.prices > 0))[0])
            raise SeriesError(f"invalid price at index {bad}: {self.prices[bad]!r}")
        ts = self.timestamps
        for i in range(1, len(ts)):
            if not ts[i] > ts[i - 1]:
                raise SeriesError(f"timestamps not strictly increasing at index {i}")
        return self


@dataclass(frozen=True)
class ReturnSeries:
    """Log-returns, optionally standardized.

    ``offset`` and ``scale`` record the affine map applied by
    :func:`standardize` so that ``raw = values * scale + offset``.
    """

    values: np.ndarray
    standardized: bool = False
    offset: float = 0.0
    scale: float = 1.0
    timestamps: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise SeriesError(f"scale must be positive and finite, got {self.scale!r}")

    def __len__(self):
        return self.values.size

    def __getitem__(self, item):
        return self.values[item]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def head(self, n: int) -> ReturnSeries:
        """The first ``n`` observations, keeping the standardization metadata."""
        ts = None if self.timestamps is None else self.timestamps[:n]
        return ReturnSeries(self.values[:n], self.standardized, self.offset, self.scale, ts)


def as_array(x) -> np.ndarray:
    """Return the float values of a :class:`ReturnSeries` or array-like."""
    if isinstance(x, ReturnSeries):
        return x.values
    return np.asarray(x, dtype=float).reshape(-1)


def clean_prices(raw: PriceSeries, max_flat_run: int = DEFAULT_MAX_FLAT_RUN) -> PriceSeries:
    """Drop stale quotes.

    Within any run of identical consecutive prices only the first
    ``max_flat_run`` observations are kept.  Order is preserved and the
    operation is idempotent.
    """
    if len(raw) == 0:
        raise SeriesError("insufficient data: empty price series")
    if max_flat_run < 1:
        raise SeriesError(f"max_flat_run must be >= 1, got {max_flat_run}")
    p = raw.prices
    keep = np.ones(p.size, dtype=bool)
    run = 1
    for i in range(1, p.size):
        run = run + 1 if p[i] == p[i - 1] else 1
        if run > max_flat_run:
            keep[i] = False
    if keep.sum() < 2:
        raise SeriesError(
            f"insufficient data: {int(keep.sum())} observation(s) remain after cleaning"
        )
    ts = tuple(t for t, k in zip(raw.timestamps, keep) if k)
    return PriceSeries(ts, p[keep])


def to_returns(p: PriceSeries) -> ReturnSeries:
    """Log-returns ``x[t] = log p[t+1] - log p[t]``."""
    prices = p.prices
    if prices.size < 2:
        raise SeriesError("insufficient data: a price series needs at least 2 observations")
    bad = ~(np.isfinite(prices) & (prices > 0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise SeriesError(f"invalid price at index {i}: {prices[i]!r}")
    return ReturnSeries(np.diff(np.log(prices)), timestamps=p.timestamps[1:])


def standardize(x: ReturnSeries) -> ReturnSeries:
    """Shift to zero mean and scale to unit (population) standard deviation."""
    values = as_array(x)
    if values.size < 2:
        raise SeriesError("insufficient data: standardization needs at least 2 returns")
    offset = float(values.mean())
    scale = float(values.std())
    if not scale > 0 or not np.isfinite(scale):
        raise SeriesError("degenerate series: zero variance")
    ts = x.timestamps if isinstance(x, ReturnSeries) else None
    return ReturnSeries((values - offset) / scale, True, offset, scale, ts)


def unstandardize(x: ReturnSeries) -> ReturnSeries:
    """Invert :func:`standardize` using the recorded offset and scale."""
    if not x.standardized:
        return x
    return ReturnSeries(x.values * x.scale + x.offset, False, timestamps=x.timestamps)


def _parse_timestamp(text: str):
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def read_prices_csv(path) -> PriceSeries:
    """Read a ``timestamp,price`` CSV.

    Every malformed row is collected and reported together with its line
    number; nothing is skipped silently.
    """
    path = Path(path)
    timestamps, prices, problems = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "price"]:
            raise SeriesError(f"{path}: expected header 'timestamp,price', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                problems.append(f"line {lineno}: expected 2 fields, got {len(row)}")
                continue
            try:
                ts = _parse_timestamp(row[0])
                price = float(row[1])
            except ValueError as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            timestamps.append(ts)
            prices.append(price)
    if problems:
        raise SeriesError(f"{path}: rejected rows\n  " + "\n  ".join(problems))
    return PriceSeries(tuple(timestamps), np.asarray(prices, dtype=float))


def write_prices_csv(path, p: PriceSeries):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "price"])
        for ts, price in zip(p.timestamps, p.prices):
            ts = ts.isoformat() if hasattr(ts, "isoformat") else str(ts)
            w.writerow([ts, repr(float(price))])


def write_returns_csv(path, x):
    """Write a ``t,x`` CSV with round-trip (17 significant digit) precision."""
    values = as_array(x)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x"])
        for t, value in enumerate(values, start=1):
            w.writerow([t, f"{value:.17g}"])


def read_returns_csv(path) -> ReturnSeries:
    path = Path(path)
    values, problems = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "x"]:
            raise SeriesError(f"{path}: expected header 't,x', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                int(row[0])
                values.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                problems.append(f"line {lineno}: {exc}")
    if problems:
        raise SeriesError(f"{path}: rejected rows\n  " + "\n  ".join(problems))
    return ReturnSeries(np.asarray(values, dtype=float))
