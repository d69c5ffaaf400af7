"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed in the terminal summary (and immediately with ``-s``)."""
import os
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from vlinear import bench, cli, metrics, proptests
from vlinear.linalg import Rng
from vlinear.model import forecast
from vlinear.train import load_checkpoint, save_checkpoint
from vlinear.transforms import denorm, fit_ortho_basis, instance_norm, ortho_apply, ortho_inverse_apply

SINE_CONFIG = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "sine_toy.conf")
RESULTS: dict[int, str] = {}


def record(number: int, passed: bool, detail: str):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    return passed


def _train_sine():
    cfg = cli.read_config(SINE_CONFIG)
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        prep = cli.prepare(cfg)
        result, basis, mcfg = cli.fit_model(cfg, prep)
    return cfg, prep, result, basis, mcfg, time.perf_counter() - start


@pytest.fixture(scope="module")
def sine_runs():
    """Two independent invocations of the sine-mixture toy training run."""
    return _train_sine(), _train_sine()


def test_criterion_01_gradcheck():
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        rows = cli.run_gradcheck()
    elapsed = time.perf_counter() - start
    worst = max(r.worst[1] for _, _, r in rows)
    ok = all(r.passed for _, _, r in rows) and len(rows) == 12 and elapsed < 10.0
    record(1, ok, f"12 mixer/loss combinations, worst rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 10s)")
    assert ok


def test_criterion_02_rank_one_mixing():
    entries = proptests.check_theorem1(n=8, trials=100, rng=Rng(0))
    stats = {e.name.split(".")[1]: e for e in entries}
    ok = all(e.passed for e in entries)
    record(2, ok, f"sigma2 {stats['sigma2'].statistic:.1e} (< 1e-10), row sums {stats['row_sums'].statistic:.1e} "
                  f"(< 1e-12), rank-2 control sigma2 {stats['rank2_control_sigma2'].statistic:.3f} rejected")
    assert ok


def test_criterion_03_ensemble_gap_decay():
    start = time.perf_counter()
    entries = proptests.check_theorem3(m_list=(1_000, 10_000, 100_000), k_list=(1, 5, 10), rng=Rng(0))
    elapsed = time.perf_counter() - start
    ratios = [e for e in entries if "decay_ratio" in e.name]
    ok = all(e.statistic < 0.6 for e in ratios) and elapsed < 30.0
    record(3, ok, "gap(1e4)/gap(1e3) " + ", ".join(f"{e.name.rsplit('.', 1)[1]}={e.statistic:.3f}" for e in ratios)
           + f" (< 0.6), {elapsed:.1f}s (< 30s)")
    assert ok


def test_criterion_04_zero_start_vs_ensemble(sine_runs):
    cfg, prep, result, basis, mcfg, _ = sine_runs[0]
    xs, ys = prep.test
    with threadpool_limits(limits=1):
        entries = proptests.check_table3_equivalence(xs, ys, result.params, basis, mcfg, k_steps=10,
                                                     sizes=(10, 30, 50), rng=Rng(0), tolerance=5e-3)
    gap = entries[-1].statistic
    ok = gap < 5e-3
    record(4, ok, f"relative test-MSE gap zero-start vs 50-member mean {gap:.4%} (< 0.5%)")
    assert ok


def test_criterion_05_flops():
    n, d = 100, 64
    printed = (bench.analytic_flops("vectrans", n, d) == 2 * n * d * d + n * d
               and bench.analytic_flops("mhsa", n, d) == 2 * n * n * d + 4 * n * d * d
               and bench.analytic_flops("normlin", n, d) == n * n * d + 2 * n * d * d)
    leading = {"vectrans": lambda n, d: 2 * n * d * d, "mhsa": lambda n, d: 2 * n * n * d + 4 * n * d * d,
               "normlin": lambda n, d: n * n * d + 2 * n * d * d}
    within = all(0.5 <= bench.measured_flops(k, m, d) / f(m, d) <= 2.0
                 for k, f in leading.items() for m in (32, 64, 128, 256))
    sizes = (32, 64, 128, 256)
    _, _, resid = bench.linear_fit(sizes, [bench.measured_flops("vectrans", m, d) for m in sizes])
    ratio = bench.analytic_flops("mhsa", 1024, d) / bench.analytic_flops("vectrans", 1024, d)
    t_mhsa = bench.time_mixer("mhsa", 1024, d, repeats=5, h=1)[0]
    t_vec = bench.time_mixer("vectrans", 1024, d, repeats=5)[0]
    speedup = t_mhsa / t_vec
    ok = printed and within and resid == 0 and ratio > 5 and speedup > 2
    record(5, ok, f"formulas exact {printed}, measured within x2 {within}, vectrans fit residual {resid}, "
                  f"N=1024 ratio {ratio:.1f} (> 5), speedup {speedup:.1f}x (> 2)")
    assert ok


def test_criterion_06_k_step_stability(sine_runs):
    cfg, prep, result, basis, mcfg, _ = sine_runs[0]
    xs, ys = prep.test
    with threadpool_limits(limits=1):
        mses = {k: metrics.mse(forecast(xs, result.params, basis, mcfg, k), ys) for k in (5, 10, 20)}
    variation = (max(mses.values()) - min(mses.values())) / min(mses.values())
    ok = variation < 0.01
    record(6, ok, "test MSE " + ", ".join(f"K={k}: {v:.5f}" for k, v in mses.items())
           + f"; variation {variation:.2%} (< 1%)")
    assert ok


def test_criterion_07_training_sanity(sine_runs):
    (cfg, prep, result, basis, mcfg, elapsed), second = sine_runs
    xs, ys = prep.test
    model_mse = metrics.mse(forecast(xs, result.params, basis, mcfg, cfg["infer.steps"]), ys)
    persistence = metrics.mse(np.repeat(xs[..., -1:], ys.shape[-1], axis=-1), ys)
    other = second[2]
    bitwise = (all(np.array_equal(result.params[k], other.params[k]) for k in result.params)
               and [r.val_mse for r in result.history] == [r.val_mse for r in other.history])
    slowest = max(elapsed, second[5])
    ok = model_mse < 0.5 * persistence and slowest < 60.0 and bitwise
    record(7, ok, f"test MSE {model_mse:.4f} vs persistence {persistence:.4f} "
                  f"(ratio {model_mse / persistence:.3f} < 0.5), {slowest:.1f}s (< 60s), bitwise repeat {bitwise}")
    assert ok


def test_criterion_08_dispersion_law():
    entries = proptests.check_theorem2_weights(h=24, realizations=10_000, rng=Rng(0))
    slope = next(e for e in entries if e.name.endswith("loglog_slope")).statistic
    ok = 0.45 < slope < 0.55
    record(8, ok, f"log-log slope of random-walk dispersion {slope:.4f} over 1e4 walks (in (0.45, 0.55))")
    assert ok


def _brute_point(y_hat, y):
    out = {"mse": 0.0, "mae": 0.0, "r2": 0.0, "r": 0.0, "mase": 0.0}
    rows, h = y.shape
    for a, b in zip(y_hat.tolist(), y.tolist()):
        ma, mb = sum(a) / h, sum(b) / h
        out["mse"] += sum((u - v) ** 2 for u, v in zip(a, b)) / (rows * h)
        out["mae"] += sum(abs(u - v) for u, v in zip(a, b)) / (rows * h)
        sst = sum((v - mb) ** 2 for v in b)
        out["r2"] += (1 - sum((u - v) ** 2 for u, v in zip(a, b)) / sst) / rows
        num = sum((u - ma) * (v - mb) for u, v in zip(a, b))
        out["r"] += num / (sum((u - ma) ** 2 for u in a) * sst) ** 0.5 / rows
        naive = sum(abs(b[i] - b[i - 1]) for i in range(1, h)) / (h - 1)
        out["mase"] += sum(abs(u - v) for u, v in zip(a, b)) / h / naive / rows
    return out


def _brute_q_risk(ens, y, q):
    num = 0.0
    m = ens.shape[0]
    for idx in np.ndindex(y.shape):
        col = sorted(ens[(slice(None),) + idx].tolist())
        pos = q * (m - 1)
        lo = int(pos)
        hi = min(lo + 1, m - 1)
        pred = col[lo] + (pos - lo) * (col[hi] - col[lo])
        diff = y[idx] - pred
        num += max(q * diff, (q - 1) * diff)
    return num / float(np.abs(y).sum())


def test_criterion_09_metric_oracles():
    g = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        y_hat, y = g.normal(size=(5, 10)), g.normal(size=(5, 10))
        ens = y_hat + 0.3 * g.normal(size=(9, 5, 10))
        ref = _brute_point(y_hat, y)
        got = {"mse": metrics.mse(y_hat, y), "mae": metrics.mae(y_hat, y), "r2": metrics.r_squared(y_hat, y),
               "r": metrics.pearson_r(y_hat, y), "mase": metrics.mase(y_hat, y)}
        worst = max([worst] + [abs(got[k] - ref[k]) for k in ref])
        for q in (0.1, 0.5, 0.9):
            worst = max(worst, abs(metrics.q_risk(ens, y, q) - _brute_q_risk(ens, y, q)))
    hand = metrics.q_risk(np.array([1.0]), np.array([2.0]), 0.5)
    ok = worst < 1e-12 and hand == 0.25
    record(9, ok, f"20 random 5x10 instances, max deviation {worst:.1e} (< 1e-12); q_risk hand case {hand!r}")
    assert ok


def test_criterion_10_roundtrips(tmp_path):
    from conftest import tiny_setup

    cfg, p, xs, ys, basis = tiny_setup(seed=3, batch=16)
    path = tmp_path / "m.vlin"
    save_checkpoint(path, p, basis, cfg, {"best_epoch": 1}, np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    ck = load_checkpoint(path)
    bitwise = (all(np.array_equal(ck.params[k], p[k]) for k in p) and np.array_equal(ck.basis.q_in, basis.q_in)
               and np.array_equal(ck.basis.q_out, basis.q_out))
    g = np.random.default_rng(5)
    x = 3.0 * g.normal(size=(16, 3, 8)) + 5.0
    xn, state = instance_norm(x)
    norm_err = float(np.max(np.abs(denorm(xn, state) - x)))
    fitted = fit_ortho_basis(xs, ys)
    ortho_err = float(np.max(np.abs(ortho_inverse_apply(ortho_apply(x, fitted.q_in), fitted.q_in) - x)))
    orth = max(float(np.max(np.abs(q.T @ q - np.eye(len(q))))) for q in (fitted.q_in, fitted.q_out))
    ok = bitwise and norm_err < 1e-10 and ortho_err < 1e-10 and orth < 1e-8
    record(10, ok, f"checkpoint bitwise {bitwise}; instance-norm roundtrip {norm_err:.1e}, ortho roundtrip "
                   f"{ortho_err:.1e} (< 1e-10); orthogonality {orth:.1e} (< 1e-8)")
    assert ok
