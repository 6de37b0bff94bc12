"""Dataset loading, splitting, normalization, windowing and covariates.

Everything here is deterministic given a seed. Splits are chronological;
normalization statistics come from the training span only and are applied
to the whole series, so validation and test stay leak-free.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
import pandas as pd

NORM_EPS = 1e-8

CALENDAR_FIELDS = ("hour", "day_of_week", "day_of_month", "month")
CALENDAR_SIZES = (24, 7, 31, 12)


class DataError(ValueError):
    """Raised for malformed inputs: bad cells, bad timestamps, bad splits."""


# ---------------------------------------------------------------------------
# container


@dataclass
class SeriesDataset:
    """A multivariate series: values[t, c] plus optional timestamps."""

    values: np.ndarray                      # [rows, C] float32
    channel_names: list[str]
    timestamps: list[datetime] | None = None
    frequency: str | None = None            # declared sampling interval, e.g. "h", "15min"

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"values must be 2-D [rows, channels], got shape {self.values.shape}")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError(
                f"{len(self.channel_names)} channel names for {self.values.shape[1]} columns")
        if self.timestamps is not None and len(self.timestamps) != len(self.values):
            raise DataError("timestamp count does not match row count")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


_FREQ_RE = re.compile(r"^(\d*)\s*(min|h|d|s)$")

_FREQ_UNITS = {"s": 1, "min": 60, "h": 3600, "d": 86400}


def parse_frequency(freq: str) -> timedelta:
    """'h' -> 1 hour, '15min' -> 15 minutes, 'd' -> 1 day."""
    m = _FREQ_RE.match(freq.strip().lower())
    if not m:
        raise DataError(f"unrecognized frequency {freq!r}; use forms like 'h', '15min', 'd'")
    count = int(m.group(1) or 1)
    if count <= 0:
        raise DataError(f"frequency multiple must be positive, got {freq!r}")
    return timedelta(seconds=count * _FREQ_UNITS[m.group(2)])


# ---------------------------------------------------------------------------
# loading


def load_csv_dataset(path: str, frequency: str | None = None) -> SeriesDataset:
    """Read a CSV of one optional 'date' column plus numeric channels.

    Fails loudly: any missing or non-numeric cell, or any timestamp that is
    not strictly increasing at the declared frequency, is an error naming
    the 0-based data row.
    """
    frame = pd.read_csv(path)
    if frame.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    timestamps = None
    if frame.columns[0].strip().lower() == "date":
        raw = frame.iloc[:, 0]
        parsed = pd.to_datetime(raw, errors="coerce")
        if parsed.isna().any():
            row = int(parsed.isna().to_numpy().argmax())
            raise DataError(f"{path}: unparseable timestamp at row {row}: {raw.iloc[row]!r}")
        if frequency is not None:
            step = parse_frequency(frequency)
            deltas = parsed.diff().iloc[1:]
            bad = (deltas != step).to_numpy()
            if bad.any():
                row = int(bad.argmax()) + 1
                raise DataError(
                    f"{path}: timestamp at row {row} breaks the declared "
                    f"'{frequency}' spacing (step is {deltas.iloc[row - 1]})")
        else:
            if not parsed.is_monotonic_increasing or parsed.duplicated().any():
                diffs = parsed.diff().iloc[1:]
                bad = (diffs <= pd.Timedelta(0)).to_numpy()
                row = int(bad.argmax()) + 1
                raise DataError(f"{path}: timestamps not strictly increasing at row {row}")
        timestamps = [ts.to_pydatetime() for ts in parsed]
        frame = frame.iloc[:, 1:]
    if frame.shape[1] == 0:
        raise DataError(f"{path}: no value columns")
    channels = [str(c) for c in frame.columns]
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    mask = numeric.isna().to_numpy()
    if mask.any():
        row, col = map(int, np.argwhere(mask)[0])
        cell = frame.iloc[row, col]
        what = "missing" if (pd.isna(cell) or str(cell).strip() == "") else f"non-numeric ({cell!r})"
        raise DataError(f"{path}: {what} value at row {row}, column {channels[col]!r}")
    values = numeric.to_numpy(dtype=np.float32)
    return SeriesDataset(values, channels, timestamps, frequency)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    """Chronological split, either by ratio or by 30-day months."""

    mode: str                   # "ratio" | "months"
    train: float
    val: float
    test: float

    def __post_init__(self):
        if self.mode not in ("ratio", "months"):
            raise DataError(f"split mode must be 'ratio' or 'months', got {self.mode!r}")
        if min(self.train, self.val, self.test) <= 0:
            raise DataError("all three split sizes must be positive")


@dataclass
class SplitRanges:
    """Half-open row ranges [start, stop) per split."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def of(self, name: str) -> tuple[int, int]:
        return getattr(self, name)


def chronological_split(dataset: SeriesDataset, spec: SplitSpec) -> SplitRanges:
    n = dataset.n_rows
    if spec.mode == "months":
        if dataset.frequency is None:
            raise DataError("month-based splits need a declared sampling frequency")
        step = parse_frequency(dataset.frequency)
        per_month = int(timedelta(days=30) / step)   # fixed 30-day month
        b1 = int(spec.train) * per_month
        b2 = b1 + int(spec.val) * per_month
        b3 = b2 + int(spec.test) * per_month
        if b3 > n:
            raise DataError(
                f"month split needs {b3} rows ({per_month} rows/month) but the series has {n}")
    else:
        total = spec.train + spec.val + spec.test
        b1 = int(n * spec.train / total)
        b2 = b1 + int(n * spec.val / total)
        b3 = n                                        # remainder goes to test
    ranges = SplitRanges((0, b1), (b1, b2), (b2, b3))
    for name in ("train", "val", "test"):
        lo, hi = ranges.of(name)
        if hi <= lo:
            raise DataError(f"{name} split is empty ({lo}, {hi})")
    return ranges


def context_range(ranges: SplitRanges, split: str, lookback: int) -> tuple[int, int]:
    """Extend a val/test range back by the lookback so its first target row
    still gets a full input window. Train windows stay inside train."""
    lo, hi = ranges.of(split)
    if split == "train":
        return lo, hi
    return max(0, lo - lookback), hi


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    mean: np.ndarray    # [C]
    std: np.ndarray     # [C], biased, floored at NORM_EPS


def fit_norm_stats(dataset: SeriesDataset, train_range: tuple[int, int]) -> NormStats:
    lo, hi = train_range
    chunk = dataset.values[lo:hi].astype(np.float64)
    mean = chunk.mean(axis=0)
    std = np.maximum(chunk.std(axis=0), NORM_EPS)     # ddof=0
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def apply_norm(dataset: SeriesDataset, stats: NormStats) -> SeriesDataset:
    values = (dataset.values - stats.mean) / stats.std
    return SeriesDataset(values.astype(np.float32), list(dataset.channel_names),
                         dataset.timestamps, dataset.frequency)


def invert_norm(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Back to raw units; values has channels on the second axis [..., C, ...].

    Accepts [rows, C] or [B, C, T] layouts.
    """
    if values.ndim == 2:
        return values * stats.std + stats.mean
    if values.ndim == 3:
        return values * stats.std[None, :, None] + stats.mean[None, :, None]
    raise DataError(f"cannot invert normalization for ndim {values.ndim}")


# ---------------------------------------------------------------------------
# calendar covariates


def calendar_covariates(timestamps: list[datetime]) -> np.ndarray:
    """Integer codes [rows, 4]: hour, weekday (Mon=0), day-of-month (0-based),
    month (0-based). Sized for embedding tables of (24, 7, 31, 12)."""
    out = np.empty((len(timestamps), 4), dtype=np.int16)
    for i, ts in enumerate(timestamps):
        out[i, 0] = ts.hour
        out[i, 1] = ts.weekday()
        out[i, 2] = ts.day - 1
        out[i, 3] = ts.month - 1
    return out


# ---------------------------------------------------------------------------
# windowing


@dataclass
class WindowBatch:
    """One minibatch of forecasting windows.

    inputs [B, C, L], targets [B, C, T]; covariates holds the per-step codes
    [B, L, K] shared by every channel (calendar features do not vary across
    channels). dyn_covariates exposes the broadcast [B, C, L, K] view.
    """

    inputs: np.ndarray
    targets: np.ndarray
    covariates: np.ndarray | None
    starts: np.ndarray          # window start rows, for bookkeeping

    @property
    def dyn_covariates(self) -> np.ndarray | None:
        if self.covariates is None:
            return None
        b, l, k = self.covariates.shape
        c = self.inputs.shape[1]
        return np.broadcast_to(self.covariates[:, None, :, :], (b, c, l, k))


def window_count(range_len: int, lookback: int, horizon: int) -> int:
    """Stride-1 windows with full coverage; horizon 0 means input-only
    windows (reconstruction tasks)."""
    return max(0, range_len - lookback - horizon + 1)


def window_iter(dataset: SeriesDataset, row_range: tuple[int, int], lookback: int,
                horizon: int, batch_size: int, shuffle: bool = False,
                rng: np.random.Generator | None = None,
                covariate_codes: np.ndarray | None = None):
    """Yield WindowBatch over every stride-1 window inside row_range.

    Window i uses rows [lo+i, lo+i+L) as input and [lo+i+L, lo+i+L+T) as
    target; all n-L-T+1 windows are produced, so evaluation covers every
    admissible sample exactly once.
    """
    lo, hi = row_range
    if horizon < 0:
        raise DataError(f"horizon must be >= 0, got {horizon}")
    n = window_count(hi - lo, lookback, horizon)
    if n <= 0:
        raise DataError(
            f"range of {hi - lo} rows too short for lookback {lookback} + horizon {horizon}")
    order = np.arange(n)
    if shuffle:
        if rng is None:
            raise DataError("shuffle=True needs an rng")
        order = rng.permutation(n)
    values = dataset.values
    for ofs in range(0, n, batch_size):
        idx = order[ofs:ofs + batch_size]
        starts = lo + idx
        inputs = np.stack([values[s:s + lookback] for s in starts])           # [B, L, C]
        targets = np.stack([values[s + lookback:s + lookback + horizon] for s in starts])
        covs = None
        if covariate_codes is not None:
            covs = np.stack([covariate_codes[s:s + lookback] for s in starts])  # [B, L, K]
        yield WindowBatch(
            inputs=np.ascontiguousarray(inputs.transpose(0, 2, 1)),           # [B, C, L]
            targets=np.ascontiguousarray(targets.transpose(0, 2, 1)),         # [B, C, T]
            covariates=covs,
            starts=starts,
        )


# ---------------------------------------------------------------------------
# patch masking (self-supervised pretraining)


def mask_patches(inputs: np.ndarray, patch_len: int, ratio: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero out round(ratio * N) randomly chosen patches per (sample, channel).

    inputs [B, C, L] with L a multiple of patch_len. Returns (masked copy,
    boolean mask [B, C, N] with True = masked).
    """
    b, c, length = inputs.shape
    if length % patch_len != 0:
        raise DataError(f"window length {length} is not a multiple of patch length {patch_len}")
    n = length // patch_len
    k = int(round(ratio * n))
    mask = np.zeros((b, c, n), dtype=bool)
    if k > 0:
        for bi in range(b):
            for ci in range(c):
                mask[bi, ci, rng.permutation(n)[:k]] = True
    masked = inputs.reshape(b, c, n, patch_len).copy()
    masked[mask] = 0.0
    return masked.reshape(b, c, length), mask


# ---------------------------------------------------------------------------
# synthetic retail case study


@dataclass
class SynthParams:
    """Free parameters of the synthetic retail generator (defaults are what
    the tests pin)."""

    weekly_period: int = 7
    trend_slope: float = 0.01
    pulse_amplitude: float = 2.0
    pulse_width: int = 3
    pulse_gap: tuple[int, int] = (30, 45)    # uniform onset gap, inclusive
    response_lag: int = 7
    response_width: int = 7
    response_peak: float = 1.8
    responder_baseline: float = 0.4
    suppression: float = 0.3
    noise_scale: float = 1.0


SYNTH_CHANNELS = ["weekly_a", "weekly_b", "fast_cycle", "trending",
                  "white_noise", "promo", "promo_response", "suppressed"]


def synth_retail_generate(days: int, seed: int,
                          params: SynthParams | None = None) -> SeriesDataset:
    """Eight daily channels with known structure, for model sanity studies.

    weekly_a/weekly_b    identical weekly sines (redundant pair)
    fast_cycle           period-2 sine, the fastest cycle a daily grid holds
    trending             weekly sine plus a linear trend
    white_noise          iid standard normal, unforecastable
    promo                rectangular pulses with random onset gaps
    promo_response       baseline sine plus a lagged triangular echo of promo
    suppressed           weekly sine damped while promo is active
    """
    p = params or SynthParams()
    if days < 2 * max(p.pulse_gap[1], p.response_lag + p.response_width):
        raise DataError(f"{days} days is too short for the promo structure")
    rng = np.random.default_rng(seed)
    t = np.arange(days, dtype=np.float64)
    weekly = np.sin(2 * np.pi * t / p.weekly_period)

    promo = np.zeros(days)
    onsets = []
    pos = int(rng.integers(p.pulse_gap[0], p.pulse_gap[1] + 1))
    while pos < days:
        onsets.append(pos)
        promo[pos:pos + p.pulse_width] = p.pulse_amplitude
        pos += int(rng.integers(p.pulse_gap[0], p.pulse_gap[1] + 1))

    # Triangular kernel starting response_lag days after each onset.
    kernel = np.zeros(p.response_width)
    half = (p.response_width - 1) / 2.0
    for i in range(p.response_width):
        kernel[i] = p.response_peak * (1.0 - abs(i - half) / (half + 1.0))
    response = np.zeros(days)
    for onset in onsets:
        lo = onset + p.response_lag
        hi = min(lo + p.response_width, days)
        if lo < days:
            response[lo:hi] += kernel[:hi - lo]

    active = promo > 0
    channels = np.stack([
        weekly,
        weekly.copy(),
        np.sin(2 * np.pi * t / 2.0),
        weekly + p.trend_slope * t,
        rng.standard_normal(days) * p.noise_scale,
        promo,
        p.responder_baseline * weekly + response,
        weekly * np.where(active, p.suppression, 1.0),
    ], axis=1).astype(np.float32)

    start = datetime(2018, 1, 1)
    stamps = [start + timedelta(days=int(d)) for d in range(days)]
    return SeriesDataset(channels, list(SYNTH_CHANNELS), stamps, "d")


def write_csv(dataset: SeriesDataset, path: str):
    """Inverse of load_csv_dataset, with a fixed float format so identical
    datasets serialize to identical bytes."""
    with open(path, "w") as fh:
        cols = ["date"] if dataset.timestamps is not None else []
        fh.write(",".join(cols + dataset.channel_names) + "\n")
        for i in range(dataset.n_rows):
            row = []
            if dataset.timestamps is not None:
                row.append(dataset.timestamps[i].strftime("%Y-%m-%d %H:%M:%S"))
            row.extend(f"{v:.8f}" for v in dataset.values[i])
            fh.write(",".join(row) + "\n")
