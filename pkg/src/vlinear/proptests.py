"""Executable property checks: rank-1 row-stochastic mixing, the sqrt(i)
dispersion law behind the horizon weights, zero-start vs Gaussian-ensemble
equivalence, and its empirical mirror on a trained toy model.

Each check returns one or more ``PropertyEntry`` rows carrying the measured
statistic next to the tolerance it was judged against.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flowmatch, mixers
from .data import synth_generate
from .linalg import Rng


@dataclass
class PropertyEntry:
    name: str
    statistic: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{self.name:<34} {self.statistic:<14.6g} {self.tolerance:<10.3g} {verdict}{extra}"


@dataclass
class PropertyReport:
    entries: list[PropertyEntry] = field(default_factory=list)

    def extend(self, entries):
        self.entries.extend(entries)
        return self

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_text(self) -> str:
        head = f"{'property':<34} {'statistic':<14} {'tolerance':<10} verdict"
        return "\n".join([head] + [e.line() for e in self.entries]) + "\n"


def _second_singular(m):
    s = np.linalg.svd(m, compute_uv=False)
    return float(s[1]) if s.size > 1 else 0.0


def rank1_violation(m) -> tuple[float, float]:
    """(sigma_2, max |row sum - 1|) of a candidate mixing matrix."""
    return _second_singular(m), float(np.max(np.abs(m.sum(axis=1) - 1.0)))


def check_theorem1(n: int = 8, trials: int = 100, rng: Rng | None = None,
                   logit_scale: float = 3.0) -> list[PropertyEntry]:
    """Probe vecTrans with the identity to recover its N x N matrix and test
    that it is 1 w^T with w >= 0 and |w|_1 = 1. A rank-2 row-stochastic matrix
    is run through the same test as a negative control."""
    if n < 2:
        raise ValueError("check_theorem1 needs n >= 2")
    rng = rng or Rng(0)
    worst_s2 = worst_row = worst_fac = 0.0
    for i in range(trials):
        a = rng.split(f"trial{i}").normal(n, logit_scale)
        m = mixers.vec_trans(np.eye(n), a)
        s2, row = rank1_violation(m)
        w = m[0]
        fac = max(float(np.max(np.abs(m - w[None, :]))), abs(float(np.abs(w).sum()) - 1.0))
        if np.any(w < 0):
            fac = np.inf
        worst_s2, worst_row, worst_fac = max(worst_s2, s2), max(worst_row, row), max(worst_fac, fac)

    ctl = rng.split("control")
    p, q = ctl.uniform(n), ctl.uniform(n)
    p, q = p / p.sum(), q / q.sum()
    c = np.linspace(0.0, 1.0, n)[:, None]
    control = c * p[None, :] + (1.0 - c) * q[None, :]
    ctl_s2, ctl_row = rank1_violation(control)
    ctl_rejected = ctl_s2 > 1e-3 and ctl_row < 1e-12
    return [
        PropertyEntry("theorem1.sigma2", worst_s2, 1e-10, worst_s2 < 1e-10, f"{trials} trials, n={n}"),
        PropertyEntry("theorem1.row_sums", worst_row, 1e-12, worst_row < 1e-12),
        PropertyEntry("theorem1.factor_1wT", worst_fac, 1e-12, worst_fac < 1e-12),
        PropertyEntry("theorem1.rank2_control_sigma2", ctl_s2, 1e-3, ctl_rejected,
                      "control must fail the rank-1 test"),
    ]


def random_head(h: int, rng: Rng, std: float = 1.0):
    p = flowmatch.init_wfm_params(h, rng.split("w"))
    p["wfm.b"] = rng.split("b").normal(h, 0.5)
    p["wfm.s"] = np.array([np.log(np.expm1(std))])  # softplus^-1
    return p


def ensemble_gap(cond, p, k_steps: int, m: int, rng: Rng):
    """Max entrywise |ensemble mean - zero start| and the max member std."""
    zero = flowmatch.infer_deterministic(cond, p, k_steps)
    members, mean = flowmatch.infer_probabilistic(cond, p, k_steps, m, rng)
    return float(np.max(np.abs(mean - zero))), float(np.max(members.std(axis=0)))


def check_theorem3(n: int = 3, h: int = 4, m_list=(1_000, 10_000, 100_000), k_list=(1, 5, 10),
                   rng: Rng | None = None, std: float = 1.0) -> list[PropertyEntry]:
    """Monte-Carlo decay of the ensemble-mean gap for an affine velocity head."""
    rng = rng or Rng(0)
    p = random_head(h, rng.split("head"), std)
    cond = rng.split("cond").normal((n, h))
    m_small, m_mid, m_big = m_list
    entries = []
    for k in k_list:
        gaps = {}
        spread = 0.0
        for m in m_list:
            gaps[m], spread = ensemble_gap(cond, p, k, m, rng.split(f"K{k}.M{m}"))
        ratio = gaps[m_mid] / gaps[m_small]
        bound = 3.0 * spread / np.sqrt(m_big)
        entries.append(PropertyEntry(f"theorem3.decay_ratio.K{k}", ratio, 0.6, ratio < 0.6,
                                     f"gap {gaps[m_small]:.3g} -> {gaps[m_mid]:.3g}"))
        entries.append(PropertyEntry(f"theorem3.gap_bound.K{k}", gaps[m_big], bound, gaps[m_big] < bound,
                                     f"M={m_big}"))
    return entries


def check_theorem2_weights(h: int = 24, realizations: int = 10_000,
                           rng: Rng | None = None) -> list[PropertyEntry]:
    """Horizon weights are i^-0.5, and random-walk dispersion grows as sqrt(i)."""
    if h < 2:
        raise ValueError("check_theorem2_weights needs h >= 2")
    rng = rng or Rng(0)
    oracle = 1.0 / np.sqrt(np.arange(1, h + 1, dtype=np.float64))
    weights = flowmatch.horizon_weights(h)
    weight_ulps = float(np.max(np.abs(weights - oracle) / np.spacing(oracle)))

    walks = synth_generate("random_walk", realizations, max(h + 1, 8), rng.split("walks")).values
    steps = np.arange(1, h + 1)
    sigma = (walks[:, 1:h + 1] - walks[:, :1]).std(axis=0)
    slope = float(np.polyfit(np.log(steps), np.log(sigma), 1)[0])
    law = float(np.max(np.abs(sigma / np.sqrt(steps) - 1.0)))  # unit increments
    return [
        PropertyEntry("theorem2.weights_ulps", weight_ulps, 1.0, weight_ulps <= 1.0, f"H={h}, vs 1/sqrt(i)"),
        PropertyEntry("theorem2.loglog_slope", slope, 0.05, abs(slope - 0.5) < 0.05, "target 0.5"),
        PropertyEntry("theorem2.sqrt_law_rel_err", law, 0.1, law < 0.1, f"{realizations} walks"),
    ]


def check_table3_equivalence(xs, ys, params, basis, config, k_steps: int = 10, sizes=(10, 30, 50),
                             rng: Rng | None = None, tolerance: float = 5e-3) -> list[PropertyEntry]:
    """Relative test-MSE gap between zero-start and Gaussian-ensemble means.

    Only the largest ensemble size is judged against ``tolerance``; the others
    are reported for the averaging trend.
    """
    from .model import forecast, forecast_ensemble

    rng = rng or Rng(0)
    zero = float(np.mean((forecast(xs, params, basis, config, k_steps) - ys) ** 2))
    entries = []
    for m in sizes:
        _, mean = forecast_ensemble(xs, params, basis, config, k_steps, m, rng.split(f"size{m}"))
        gap = abs(float(np.mean((mean - ys) ** 2)) - zero) / zero
        judged = m == max(sizes)
        entries.append(PropertyEntry(f"table3.rel_mse_gap.size{m}", gap, tolerance if judged else np.inf,
                                     gap < tolerance or not judged, f"zero-start mse {zero:.6g}"))
    return entries


def run_all(rng: Rng | None = None, table3=None) -> PropertyReport:
    """All model-free checks; pass ``table3=(xs, ys, params, basis, config)``
    to include the trained-model comparison."""
    rng = rng or Rng(0)
    report = PropertyReport()
    report.extend(check_theorem1(rng=rng.split("t1")))
    report.extend(check_theorem2_weights(rng=rng.split("t2")))
    report.extend(check_theorem3(rng=rng.split("t3")))
    if table3 is not None:
        report.extend(check_table3_equivalence(*table3, rng=rng.split("table3")))
    return report
