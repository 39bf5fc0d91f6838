"""Deterministic sawtooth OHLC series whose trend masks are predictable from the inputs."""

from __future__ import annotations

import datetime as dt
from typing import Optional

import numpy as np

from .data import PriceSeries


def sawtooth_series(n_days: int, T: int, amplitude: float = 10.0, base: float = 100.0,
                    phase: Optional[int] = None, noise: float = 0.0, seed: int = 0,
                    ticker: str = "SAW") -> PriceSeries:
    """Sawtooth close price with period ``2*T``, OHLC derived from it.

    The price ramps up by ``amplitude`` over one period then drops back, so a
    day's price exceeds the day ``T`` earlier exactly when the day sits in the
    second half of its ramp. ``phase`` shifts the ramp so masks mix 0 and 1
    rows (default ``T // 2``). ``noise`` is the additive Gaussian std as a
    fraction of ``amplitude``, applied before the four columns are derived so
    the OHLC ordering holds.
    """
    period = 2 * T
    phase = T // 2 if phase is None else phase
    t = np.arange(n_days)
    ramp = ((t + phase) % period) / period
    close = base + amplitude * ramp
    if noise > 0:
        close = close + np.random.default_rng(seed).normal(0.0, noise * amplitude, size=n_days)
    step = amplitude / period
    open_ = close - 0.25 * step
    high = close + 0.1 * step
    low = open_ - 0.1 * step
    prices = np.stack([open_, low, high, close], axis=1)
    start = dt.date(1970, 1, 2)
    dates = [start + dt.timedelta(days=int(i)) for i in t]
    return PriceSeries(ticker, dates, prices)


def write_csv(series: PriceSeries, path) -> None:
    """Write a series in the Kaggle daily-OHLCV layout."""
    with open(path, "w") as fh:
        fh.write("Date,Open,High,Low,Close,Volume,OpenInt\n")
        for d, (o, lo, hi, c) in zip(series.dates, series.prices):
            fh.write(f"{d.isoformat()},{o:.6f},{hi:.6f},{lo:.6f},{c:.6f},1000,0\n")
