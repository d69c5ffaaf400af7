"""Multiply-add accounting and single-thread timing of the token mixers.

Counts are in multiply-adds (one fused unit per product term). Bias additions
and elementwise activations are not counted; row-wise normalizations that
scale every N x D entry are.
"""
from __future__ import annotations

import time
from fractions import Fraction

import numpy as np
from threadpoolctl import threadpool_limits

from . import mixers
from .linalg import FlopLedger, Rng

BENCH_KINDS = ("vectrans", "rank_k", "mhsa", "normlin")


def analytic_flops(kind: str, n: int, d: int, h: int = 1, k: int = 4) -> int:
    """Closed-form multiply-add count of one mixer module forward pass."""
    if min(n, d, h, k) < 1:
        raise ValueError("shapes must be positive")
    if kind == "vectrans":
        return 2 * n * d * d + n * d
    if kind == "mhsa":
        return 2 * n * n * d + 4 * n * d * d
    if kind == "normlin":
        return n * n * d + 2 * n * d * d
    if kind == "rank_k":
        return 2 * n * d * d + 2 * n * d * k + n * k + n * d
    raise ValueError(f"unknown kind {kind!r}; expected one of {BENCH_KINDS}")


def analytic_memory(kind: str, n: int, d: int, h: int = 1, k: int = 4) -> int:
    """Peak live matrix cells of the mixing step (activations plus mixing weights)."""
    if kind == "vectrans":
        return n * d
    if kind == "mhsa":
        return h * n * n + n * d
    if kind == "normlin":
        return n * n + n * d
    if kind == "rank_k":
        return n * k + n * d
    raise ValueError(f"unknown kind {kind!r}; expected one of {BENCH_KINDS}")


def random_mixer(kind: str, n: int, d: int, h: int = 1, k: int = 4, seed: int = 0):
    rng = Rng(seed)
    p = {}
    for name, shape in mixers.mixer_param_shapes(kind, n, d, k).items():
        if name.endswith(".w"):
            bound = np.sqrt(1.0 / shape[0])
            p[name] = rng.uniform(shape, -bound, bound)
        elif name == "A":
            p[name] = rng.uniform(shape, 0.5, 1.5)
        else:
            p[name] = rng.normal(shape, 0.5)
    x = rng.split("input").normal((n, d))
    return x, p


def measured_flops(kind: str, n: int, d: int, h: int = 1, k: int = 4) -> int:
    """Run the mixer once with an instrumented matrix core and return its MAC count."""
    if kind not in BENCH_KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {BENCH_KINDS}")
    x, p = random_mixer(kind, n, d, h, k)
    ledger = FlopLedger()
    mixers.mixer_fwd(kind, x, p, heads=h, ledger=ledger)
    return ledger.total


def time_mixer(kind: str, n: int, d: int, repeats: int = 5, h: int = 1, k: int = 4):
    """Median wall-clock seconds over ``repeats`` runs after a warm-up; returns
    (median, spread, samples). BLAS is pinned to one thread."""
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    x, p = random_mixer(kind, n, d, h, k)
    samples = []
    with threadpool_limits(limits=1):
        mixers.mixer_fwd(kind, x, p, heads=h)
        for _ in range(repeats):
            start = time.perf_counter()
            mixers.mixer_fwd(kind, x, p, heads=h)
            samples.append(time.perf_counter() - start)
    samples = np.array(samples)
    return float(np.median(samples)), float(samples.max() - samples.min()), samples


def linear_fit(xs, ys):
    """Exact least-squares line through integer points: (slope, intercept,
    max |residual|) as Fractions, so an affine count shows residual 0."""
    xs = [Fraction(int(x)) for x in xs]
    ys = [Fraction(int(y)) for y in ys]
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx
    icpt = my - slope * mx
    return slope, icpt, max(abs(y - (slope * x + icpt)) for x, y in zip(xs, ys))


def bench_rows(sizes=(32, 64, 128, 256, 512, 1024), d: int = 64, heads: int = 4, k: int = 4,
               repeats: int = 5, timing: bool = True):
    rows = []
    for kind in BENCH_KINDS:
        for n in sizes:
            median = time_mixer(kind, n, d, repeats, heads, k)[0] if timing else float("nan")
            rows.append({"kind": kind, "n": n, "d": d,
                         "analytic": analytic_flops(kind, n, d, heads, k),
                         "measured": measured_flops(kind, n, d, heads, k),
                         "memory": analytic_memory(kind, n, d, heads, k),
                         "median_s": median})
    return rows


def format_report(rows) -> str:
    out = [f"{'kind':<9} {'N':>6} {'D':>4} {'analytic':>14} {'measured':>14} {'memory':>10} {'median_s':>12}"]
    for r in rows:
        out.append(f"{r['kind']:<9} {r['n']:>6} {r['d']:>4} {r['analytic']:>14} {r['measured']:>14} "
                   f"{r['memory']:>10} {r['median_s']:>12.6g}")
    vec = [r for r in rows if r["kind"] == "vectrans"]
    if len(vec) >= 2:
        slope, icpt, resid = linear_fit([r["n"] for r in vec], [r["measured"] for r in vec])
        out.append(f"vectrans measured fit: slope {slope} per variate, intercept {icpt}, "
                   f"max residual {resid}")
    return "\n".join(out) + "\n"
