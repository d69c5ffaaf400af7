import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlinear import metrics
from vlinear.linalg import ShapeError


def _brute(y_hat, y):
    """Loop-based references, one row at a time."""
    rows = []
    for a, b in zip(y_hat, y):
        n = len(b)
        mb, ma = sum(b) / n, sum(a) / n
        sst = sum((v - mb) ** 2 for v in b)
        sse = sum((u - v) ** 2 for u, v in zip(a, b))
        cov = sum((u - ma) * (v - mb) for u, v in zip(a, b))
        va = sum((u - ma) ** 2 for u in a)
        scale = sum(abs(b[i + 1] - b[i]) for i in range(n - 1)) / (n - 1)
        rows.append((1 - sse / sst, cov / (va * sst) ** 0.5, sum(abs(u - v) for u, v in zip(a, b)) / n / scale))
    flat_a, flat_b = y_hat.ravel(), y.ravel()
    return {"mse": sum((u - v) ** 2 for u, v in zip(flat_a, flat_b)) / flat_a.size,
            "mae": sum(abs(u - v) for u, v in zip(flat_a, flat_b)) / flat_a.size,
            "r2": sum(r[0] for r in rows) / len(rows),
            "r": sum(r[1] for r in rows) / len(rows),
            "mase": sum(r[2] for r in rows) / len(rows)}


def _brute_q_risk(ens, y, q):
    num = 0.0
    for idx in np.ndindex(y.shape):
        col = np.sort(ens[(slice(None),) + idx])
        pos = q * (len(col) - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, len(col) - 1)
        yq = col[lo] + (pos - lo) * (col[hi] - col[lo])
        d = y[idx] - yq
        num += q * d if d >= 0 else (q - 1) * d
    return num / np.abs(y).sum()


class TestPointMetrics:
    def test_random_instances(self):
        g = np.random.default_rng(11)
        for _ in range(20):
            y_hat, y = g.normal(size=(5, 10)), g.normal(size=(5, 10))
            ref = _brute(y_hat, y)
            assert abs(metrics.mse(y_hat, y) - ref["mse"]) < 1e-12
            assert abs(metrics.mae(y_hat, y) - ref["mae"]) < 1e-12
            assert abs(metrics.r_squared(y_hat, y) - ref["r2"]) < 1e-12
            assert abs(metrics.pearson_r(y_hat, y) - ref["r"]) < 1e-12
            assert abs(metrics.mase(y_hat, y) - ref["mase"]) < 1e-12

    def test_perfect_forecast(self, np_rng):
        y = np_rng.normal(size=(3, 6))
        assert metrics.mse(y, y) == 0.0 and metrics.r_squared(y, y) == 1.0
        assert metrics.pearson_r(y, y) == pytest.approx(1.0, abs=1e-15) and metrics.mase(y, y) == 0.0

    def test_batched_flattens_rows(self, np_rng):
        a, b = np_rng.normal(size=(2, 3, 6)), np_rng.normal(size=(2, 3, 6))
        assert metrics.r_squared(a, b) == pytest.approx(metrics.r_squared(a.reshape(6, 6), b.reshape(6, 6)))

    def test_degenerate_rows_warn(self):
        y = np.array([[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]])
        with pytest.warns(metrics.DegenerateRowWarning):
            r2 = metrics.r_squared(y + 0.1, y)
        assert r2 == pytest.approx(1 - 0.03 / 2.0)
        with pytest.warns(metrics.DegenerateRowWarning):
            assert np.isnan(metrics.pearson_r(np.ones((1, 3)), np.ones((1, 3))))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            metrics.mse(np.zeros(3), np.zeros(4))
        with pytest.raises(ShapeError):
            metrics.mase(np.zeros((2, 1)), np.zeros((2, 1)))


class TestQRisk:
    def test_hand_case(self):
        assert metrics.q_risk(np.array([1.0]), np.array([2.0]), 0.5) == 0.25

    def test_random_instances(self):
        g = np.random.default_rng(12)
        for _ in range(20):
            ens, y = g.normal(size=(7, 5, 10)), g.normal(size=(5, 10))
            for q in (0.1, 0.5, 0.9):
                assert abs(metrics.q_risk(ens, y, q) - _brute_q_risk(ens, y, q)) < 1e-12

    def test_point_forecast_median_is_half_mae_ratio(self, np_rng):
        y_hat, y = np_rng.normal(size=(4, 5)), np_rng.normal(size=(4, 5))
        assert metrics.q_risk(y_hat, y, 0.5) == pytest.approx(0.5 * np.abs(y - y_hat).sum() / np.abs(y).sum())

    def test_errors(self):
        with pytest.raises(ValueError):
            metrics.q_risk(np.zeros((2, 3)), np.ones(3), 1.0)
        with pytest.raises(ZeroDivisionError):
            metrics.q_risk(np.ones((2, 3)), np.zeros(3), 0.5)
        with pytest.raises(ShapeError):
            metrics.q_risk(np.ones((2, 4)), np.ones(3), 0.5)

    def test_pinball_asymmetry(self):
        assert metrics.pinball(2.0, 1.0, 0.9) == pytest.approx(0.9)
        assert metrics.pinball(1.0, 2.0, 0.9) == pytest.approx(0.1)


class TestReport:
    def test_compute_and_text(self, np_rng):
        y_hat, y = np_rng.normal(size=(3, 6)), np_rng.normal(size=(3, 6))
        ens = np_rng.normal(size=(5, 3, 6))
        rep = metrics.MetricReport.compute(y_hat, y, ens, (0.1, 0.9))
        text = rep.to_text()
        assert text.splitlines()[0] == f"mse: {metrics.mse(y_hat, y):.10g}"
        assert "q_risk@0.1:" in text and "q_risk@0.9:" in text

    def test_without_ensemble(self, np_rng):
        y = np_rng.normal(size=(2, 4))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert metrics.MetricReport.compute(y, y).q_risk == {}


finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), arrays(np.float64, (3, 5), elements=finite))
def test_metric_ranges(a, b):
    assert metrics.mse(a, b) >= 0.0 and metrics.mae(a, b) >= 0.0
    assert metrics.mae(a, b) ** 2 <= metrics.mse(a, b) + 1e-9
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", metrics.DegenerateRowWarning)
        r = metrics.pearson_r(a, b)
    assert np.isnan(r) or -1.0 <= r <= 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, 3, elements=st.floats(0.5, 100)),
       st.floats(0.01, 0.99))
def test_q_risk_nonnegative(ens, y, q):
    assert metrics.q_risk(ens, y, q) >= 0.0
