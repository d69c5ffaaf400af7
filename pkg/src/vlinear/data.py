"""CSV ingestion, chronological splits, sliding windows and synthetic series."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .linalg import Rng


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RawSeries:
    names: list[str]
    values: np.ndarray  # V x L
    origin: str = ""

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.names):
            raise DataError(f"values shape {self.values.shape} does not match {len(self.names)} names")

    @property
    def n_var(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def segment(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(list(self.names), self.values[:, start:stop].copy(), self.origin)


@dataclass(frozen=True)
class Sample:
    x: np.ndarray  # N x T
    y: np.ndarray  # N x H


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        ratios = (self.train, self.val, self.test)
        if any(r <= 0 for r in ratios):
            raise DataError(f"split ratios must all be positive, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must sum to 1, got {sum(ratios)}")


@dataclass(frozen=True)
class GlobalStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, series: RawSeries) -> "GlobalStats":
        mean = series.values.mean(axis=1)
        std = series.values.std(axis=1)
        bad = [series.names[i] for i in np.flatnonzero(std <= 0)]
        if bad:
            raise DataError(f"constant variates cannot be standardized: {bad}")
        return cls(mean, std)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path) -> RawSeries:
    """Read a header-first numeric CSV (variates as columns).

    A leading column whose first data cell is not numeric is treated as a
    timestamp column and dropped.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise DataError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = [c.strip() for c in rows[0]], rows[1:]
    if len(body) < 2:
        raise DataError(f"{path}: need at least 2 data rows, found {len(body)}")
    skip = 1 if not _is_number(body[0][0].strip()) else 0
    names = header[skip:]
    if not names:
        raise DataError(f"{path}: no numeric columns")
    values = np.empty((len(names), len(body)))
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        for j, cell in enumerate(row[skip:]):
            try:
                values[j, i - 1] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric value {cell!r} at row {i}, column {names[j]!r}") from None
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: missing or non-finite values are not supported")
    return RawSeries(names, values, origin=path)


def window_count(length: int, t_len: int, h_len: int, stride: int = 1) -> int:
    return (length - t_len - h_len) // stride + 1


def _check_window(length, t_len, h_len, stride):
    if t_len < 1 or h_len < 1 or stride < 1:
        raise DataError("window lengths and stride must be >= 1")
    if length < t_len + h_len:
        raise DataError(f"series of length {length} is too short for T={t_len}, H={h_len}")


def window_arrays(series: RawSeries, t_len: int, h_len: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Stacked windows: X of shape (S, N, T) and Y of shape (S, N, H)."""
    _check_window(series.length, t_len, h_len, stride)
    view = np.lib.stride_tricks.sliding_window_view(series.values, t_len + h_len, axis=1)
    view = view[:, ::stride, :].transpose(1, 0, 2)
    return view[:, :, :t_len].copy(), view[:, :, t_len:].copy()


def make_windows(series: RawSeries, t_len: int, h_len: int, stride: int = 1) -> list[Sample]:
    xs, ys = window_arrays(series, t_len, h_len, stride)
    return [Sample(x, y) for x, y in zip(xs, ys)]


def split_bounds(length: int, spec: SplitSpec) -> tuple[int, int]:
    # small epsilon: 0.7 + 0.1 is 0.7999999999999999 in binary floating point
    b1 = math.floor(spec.train * length + 1e-9)
    b2 = math.floor((spec.train + spec.val) * length + 1e-9)
    return b1, b2


def split_chronological(series: RawSeries, spec: SplitSpec, t_len: int, h_len: int):
    """Contiguous train/val/test segments; val and test carry a T-step lead-in."""
    length = series.length
    b1, b2 = split_bounds(length, spec)
    bounds = {"train": (0, b1), "val": (b1 - t_len, b2), "test": (b2 - t_len, length)}
    parts = []
    for name, (lo, hi) in bounds.items():
        if lo < 0 or hi - lo < t_len + h_len:
            raise DataError(f"{name} split [{lo}, {hi}) is too short for one window (T={t_len}, H={h_len})")
        parts.append(series.segment(lo, hi))
    return tuple(parts)


def standardize(series: RawSeries, stats: GlobalStats) -> RawSeries:
    if len(stats.mean) != series.n_var:
        raise DataError(f"stats cover {len(stats.mean)} variates, series has {series.n_var}")
    vals = (series.values - stats.mean[:, None]) / stats.std[:, None]
    return RawSeries(list(series.names), vals, series.origin)


def destandardize(series: RawSeries, stats: GlobalStats) -> RawSeries:
    if len(stats.mean) != series.n_var:
        raise DataError(f"stats cover {len(stats.mean)} variates, series has {series.n_var}")
    vals = series.values * stats.std[:, None] + stats.mean[:, None]
    return RawSeries(list(series.names), vals, series.origin)


SYNTH_NOISE = 0.1


def synth_generate(kind: str, n_var: int, length: int, rng: Rng) -> RawSeries:
    """Synthetic multivariate series.

    ``sine_mixture``: two sinusoids per variate (amplitude in [0.5, 1.5], period
    in [8, 64] steps, random phase) plus N(0, 0.1^2) noise.
    ``random_walk``: cumulative sums of N(0, 1) increments, starting at the
    first increment.
    """
    if n_var < 1 or length < 8:
        raise DataError("synth_generate needs n_var >= 1 and length >= 8")
    names = [f"v{i}" for i in range(n_var)]
    if kind == "sine_mixture":
        steps = np.arange(length)
        amp = rng.uniform((n_var, 2), 0.5, 1.5)
        period = rng.uniform((n_var, 2), 8.0, 64.0)
        phase = rng.uniform((n_var, 2), 0.0, 2.0 * np.pi)
        waves = amp[..., None] * np.sin(2.0 * np.pi * steps / period[..., None] + phase[..., None])
        values = waves.sum(axis=1) + rng.normal((n_var, length), SYNTH_NOISE)
    elif kind == "random_walk":
        values = np.cumsum(rng.normal((n_var, length)), axis=1)
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    return RawSeries(names, values, origin=f"synth:{kind}")
