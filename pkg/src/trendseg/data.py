"""Price frames, trend masks and chronological sample sets from daily OHLC data."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

# column order inside every frame
COLUMNS = ("Open", "Low", "High", "Close")
INPUT_MODES = ("prices", "trends")


class DataError(ValueError):
    """Malformed input data or an impossible sampling request."""


@dataclass
class PriceSeries:
    """Daily OHLC rows for one ticker, ordered by date.

    ``prices`` is an ``(n, 4)`` float64 array in :data:`COLUMNS` order.
    """

    ticker: str
    dates: list[dt.date]
    prices: np.ndarray

    def __len__(self) -> int:
        return len(self.dates)

    def sanity_violations(self) -> list[int]:
        """Row indices where low/high do not bracket open/close, or a price is non-positive."""
        o, lo, hi, c = self.prices.T
        bad = (lo > np.minimum(o, c)) | (hi < np.maximum(o, c)) | (self.prices <= 0).any(axis=1)
        return np.flatnonzero(bad).tolist()


def _parse_date(text: str) -> dt.date:
    text = text.strip()
    try:
        return dt.date.fromisoformat(text[:10])
    except ValueError:
        return dt.datetime.fromisoformat(text).date()


def load_csv(path, ticker: Optional[str] = None) -> PriceSeries:
    """Read a ``Date,Open,High,Low,Close[,Volume]`` file; extra columns are ignored."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        names = [h.strip().lower() for h in header]
        try:
            cols = [names.index(n) for n in ("date", "open", "low", "high", "close")]
        except ValueError:
            raise DataError(f"{path}: header must contain Date, Open, High, Low, Close; got {header}") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                date = _parse_date(row[cols[0]])
                vals = tuple(float(row[i]) for i in cols[1:])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse row {row!r} ({exc})") from None
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite price in {row!r}")
            rows.append((date, vals))
    if not rows:
        raise DataError(f"{path}: no data rows")
    rows.sort(key=lambda r: r[0])
    dates = [r[0] for r in rows]
    for a, b in zip(dates, dates[1:]):
        if a == b:
            raise DataError(f"{path}: duplicate date {a.isoformat()}")
    series = PriceSeries(ticker or path.stem.split(".")[0], dates,
                         np.array([r[1] for r in rows], dtype=np.float64))
    bad = series.sanity_violations()
    if bad:
        logger.warning("%s: %d rows violate OHLC ordering (kept)", path, len(bad))
    return series


def rescale(values: np.ndarray) -> np.ndarray:
    """Min-max scale the whole matrix jointly into [0, 1]; a constant matrix maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("rescale: empty input")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    out = (values - lo) / (hi - lo)
    # exact endpoints regardless of rounding
    out[values == lo] = 0.0
    out[values == hi] = 1.0
    return out


@dataclass
class Frame:
    start_index: int
    raw: np.ndarray
    scaled: np.ndarray


def build_frames(series: PriceSeries, T: int) -> list[Frame]:
    """Tile the series into non-overlapping ``T``-day frames; the trailing remainder is dropped."""
    n = len(series)
    if T < 1:
        raise DataError(f"frame length must be positive, got {T}")
    if n < T:
        raise DataError(f"series of {n} days is shorter than one {T}-day frame")
    frames = []
    for k in range(n // T):
        raw = series.prices[k * T:(k + 1) * T]
        frames.append(Frame(k * T, raw, rescale(raw)))
    return frames


def trend_criterion(prices: np.ndarray, days: np.ndarray, lag: int) -> np.ndarray:
    """1 where the price at ``day`` strictly exceeds the same column ``lag`` days earlier."""
    return (prices[days] > prices[days - lag]).astype(np.uint8)


def build_mask(series: PriceSeries, t_last: int, T_out: int) -> np.ndarray:
    """Trend mask for the ``T_out`` days after ``t_last``, each compared with the day ``T_out`` earlier."""
    if t_last + T_out >= len(series):
        raise DataError(f"mask needs day {t_last + T_out} but series ends at {len(series) - 1}")
    if t_last + 1 - T_out < 0:
        raise DataError(f"mask at t_last={t_last} reaches before the first day")
    days = np.arange(t_last + 1, t_last + T_out + 1)
    return trend_criterion(series.prices, days, T_out)


def build_trend_input(series: PriceSeries, frame: Frame) -> np.ndarray:
    """Trend encoding of an input frame: each day against the same row one frame earlier."""
    T = frame.raw.shape[0]
    if frame.start_index - T < 0:
        raise DataError("first frame has no predecessor for a trend input")
    days = np.arange(frame.start_index, frame.start_index + T)
    return trend_criterion(series.prices, days, T)


@dataclass
class SampleSet:
    """Aligned model inputs ``[S, N, T_in, 4]`` and trend targets ``[S, T_out, 4]``."""

    inputs: np.ndarray
    targets: np.ndarray
    input_start: np.ndarray
    target_start: np.ndarray
    ticker: str = ""
    T_in: int = 20
    T_out: int = 20
    N: int = 1
    input_mode: str = "prices"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64) if not isinstance(idx, slice) else idx
        return SampleSet(self.inputs[idx], self.targets[idx], self.input_start[idx],
                         self.target_start[idx], self.ticker, self.T_in, self.T_out,
                         self.N, self.input_mode, dict(self.meta))

    def last_input_day(self) -> np.ndarray:
        return self.input_start + self.N * self.T_in - 1


def assemble(series: PriceSeries, T_in: int, T_out: int, N: int,
             input_mode: str = "prices", stride: Optional[int] = None) -> SampleSet:
    """Build N-frame samples with their next-``T_out``-day trend masks.

    Sample ``i`` starts at day ``i * stride`` (default ``stride = T_in``, i.e.
    non-overlapping frames) and its mask is anchored on the last input day.
    In ``trends`` mode each frame is replaced by its trend encoding, so samples
    whose first frame has no predecessor are dropped.
    """
    if T_in not in (T_out, 2 * T_out):
        raise DataError(f"T_in must equal T_out or 2*T_out, got T_in={T_in}, T_out={T_out}")
    if N < 1:
        raise DataError(f"N must be >= 1, got {N}")
    if input_mode not in INPUT_MODES:
        raise DataError(f"input_mode must be one of {INPUT_MODES}, got {input_mode!r}")
    stride = stride or T_in
    n = len(series)
    if n // T_in < N + 1:
        raise DataError(f"{n // T_in} frames available, need at least N+1={N + 1}")

    first = T_in if input_mode == "trends" else 0
    starts = []
    s = first
    while s + N * T_in - 1 + T_out <= n - 1:
        starts.append(s)
        s += stride
    if not starts:
        raise DataError("no sample fits within the series")

    S = len(starts)
    inputs = np.empty((S, N, T_in, 4), dtype=np.float32)
    targets = np.empty((S, T_out, 4), dtype=np.float32)
    for i, s in enumerate(starts):
        for j in range(N):
            fs = s + j * T_in
            raw = series.prices[fs: fs + T_in]
            if input_mode == "prices":
                inputs[i, j] = rescale(raw)
            else:
                inputs[i, j] = build_trend_input(series, Frame(fs, raw, raw))
        targets[i] = build_mask(series, s + N * T_in - 1, T_out)
    starts_arr = np.asarray(starts, dtype=np.int64)
    return SampleSet(inputs, targets, starts_arr, starts_arr + N * T_in,
                     series.ticker, T_in, T_out, N, input_mode)


@dataclass
class Split:
    train: SampleSet
    val: SampleSet
    test: SampleSet


TRAIN_FRACTION = 0.65
VAL_FRACTION = 0.10


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(np.floor(n * TRAIN_FRACTION + 1e-9))
    n_val = int(np.floor(n * VAL_FRACTION + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_chronological(samples: SampleSet) -> Split:
    """First 65% train, next 10% validation, remainder test, in sample order."""
    n = len(samples)
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    a, b, _ = split_sizes(n)
    return Split(samples.subset(slice(0, a)), samples.subset(slice(a, a + b)),
                 samples.subset(slice(a + b, n)))


# binary cache container: "TSEG", version, u32 header length, JSON header,
# u32 dims (S, N, T_in, T_out, C), i64 starts, f32 inputs, f32 targets; little-endian

SAMPLESET_MAGIC = b"TSEG"
SAMPLESET_VERSION = 1


def save_sampleset(samples: SampleSet, path) -> None:
    header = json.dumps({"ticker": samples.ticker, "input_mode": samples.input_mode,
                         "meta": samples.meta}, sort_keys=True).encode()
    S = len(samples)
    with open(path, "wb") as fh:
        fh.write(SAMPLESET_MAGIC)
        fh.write(struct.pack("<B", SAMPLESET_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<5I", S, samples.N, samples.T_in, samples.T_out, 4))
        fh.write(samples.input_start.astype("<i8").tobytes())
        fh.write(samples.inputs.astype("<f4").tobytes())
        fh.write(samples.targets.astype("<f4").tobytes())


def load_sampleset(path) -> SampleSet:
    buf = Path(path).read_bytes()
    if buf[:4] != SAMPLESET_MAGIC:
        raise DataError(f"{path}: not a sample-set file")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != SAMPLESET_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 5)
    off = 9
    header = json.loads(buf[off: off + hlen])
    off += hlen
    S, N, T_in, T_out, C = struct.unpack_from("<5I", buf, off)
    off += 20
    starts = np.frombuffer(buf, "<i8", S, off).astype(np.int64)
    off += 8 * S
    inputs = np.frombuffer(buf, "<f4", S * N * T_in * C, off).reshape(S, N, T_in, C).astype(np.float32)
    off += 4 * inputs.size
    targets = np.frombuffer(buf, "<f4", S * T_out * C, off).reshape(S, T_out, C).astype(np.float32)
    return SampleSet(inputs, targets, starts, starts + N * T_in, header["ticker"], T_in, T_out,
                     N, header["input_mode"], header.get("meta", {}))
