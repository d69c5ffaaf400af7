"""Point and probabilistic forecast metrics.

All point metrics take forecasts and targets of shape (N, H) or (B, N, H).
Batched inputs are flattened to rows, so per-variate metrics average over
every (window, variate) row.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError


class DegenerateRowWarning(UserWarning):
    pass


def _pair(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"forecast shape {y_hat.shape} does not match target {y.shape}")
    if y.size == 0:
        raise ShapeError("metrics need at least one entry")
    return y_hat, y


def _rows(a):
    return a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a[None, :]


def _row_mean(values, ok, metric):
    bad = int((~ok).sum())
    if bad:
        warnings.warn(f"{metric}: {bad} degenerate row(s) excluded", DegenerateRowWarning, stacklevel=3)
    if not ok.any():
        return float("nan")
    return float(values[ok].mean())


def mse(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y)
    return float(np.mean((y_hat - y) ** 2))


def mae(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y)
    return float(np.mean(np.abs(y_hat - y)))


def r_squared(y_hat, y) -> float:
    """Per-variate 1 - SSE/SST averaged over rows; constant target rows are skipped."""
    y_hat, y = map(_rows, _pair(y_hat, y))
    sst = ((y - y.mean(axis=1, keepdims=True)) ** 2).sum(axis=1)
    sse = ((y_hat - y) ** 2).sum(axis=1)
    ok = sst > 0
    return _row_mean(1.0 - sse / np.where(ok, sst, 1.0), ok, "r_squared")


def pearson_r(y_hat, y) -> float:
    y_hat, y = map(_rows, _pair(y_hat, y))
    a = y_hat - y_hat.mean(axis=1, keepdims=True)
    b = y - y.mean(axis=1, keepdims=True)
    denom = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    ok = denom > 0
    r = (a * b).sum(axis=1) / np.where(ok, denom, 1.0)
    return _row_mean(np.clip(r, -1.0, 1.0), ok, "pearson_r")


def mase(y_hat, y) -> float:
    """Mean |error| over the mean |first difference| of the target, per row."""
    y_hat, y = map(_rows, _pair(y_hat, y))
    if y.shape[1] < 2:
        raise ShapeError("mase needs a horizon of at least 2")
    scale = np.abs(np.diff(y, axis=1)).mean(axis=1)
    ok = scale > 0
    return _row_mean(np.abs(y_hat - y).mean(axis=1) / np.where(ok, scale, 1.0), ok, "mase")


def pinball(y, y_q, q):
    diff = y - y_q
    return np.maximum(q * diff, (q - 1.0) * diff)


def ensemble_quantile(ensemble, q: float):
    """Type-7 empirical quantile over the leading (member) axis."""
    return np.quantile(np.asarray(ensemble, dtype=np.float64), q, axis=0, method="linear")


def q_risk(ensemble, y, q: float) -> float:
    """Normalized quantile loss: sum of pinball losses over sum |y|.

    ``ensemble`` has shape (M, ...) matching ``y`` after the member axis; a
    single point forecast may be passed with M = 1.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")
    ens = np.asarray(ensemble, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if ens.ndim == y.ndim:
        ens = ens[None]
    if ens.shape[0] < 1 or ens.shape[1:] != y.shape:
        raise ShapeError(f"ensemble shape {ens.shape} does not match target {y.shape}")
    denom = np.abs(y).sum()
    if denom == 0:
        raise ZeroDivisionError("q_risk undefined: target is identically zero")
    return float(pinball(y, ensemble_quantile(ens, q), q).sum() / denom)


@dataclass
class MetricReport:
    mse: float
    mae: float
    r2: float
    pearson_r: float
    mase: float
    q_risk: dict[float, float] = field(default_factory=dict)

    @classmethod
    def compute(cls, y_hat, y, ensemble=None, quantiles=()) -> "MetricReport":
        report = cls(mse(y_hat, y), mae(y_hat, y), r_squared(y_hat, y), pearson_r(y_hat, y), mase(y_hat, y))
        if ensemble is not None:
            report.q_risk = {float(q): q_risk(ensemble, y, q) for q in quantiles}
        return report

    def to_text(self) -> str:
        lines = [f"mse: {self.mse:.10g}", f"mae: {self.mae:.10g}", f"r2: {self.r2:.10g}",
                 f"pearson_r: {self.pearson_r:.10g}", f"mase: {self.mase:.10g}"]
        lines += [f"q_risk@{q:g}: {v:.10g}" for q, v in sorted(self.q_risk.items())]
        return "\n".join(lines) + "\n"
