import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlinear.linalg import (
    ConvergenceError,
    FlopLedger,
    Rng,
    ShapeError,
    as_mat,
    gaussian_sample,
    jacobi_eigh,
    mat_mul,
    naive_mat_mul,
)


def _loop_product(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatMul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(mat_mul(np.eye(2), m), m)

    def test_row_times_column(self):
        assert mat_mul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0

    def test_random_matches_loop(self, np_rng):
        a, b = np_rng.normal(size=(5, 7)), np_rng.normal(size=(7, 3))
        np.testing.assert_allclose(mat_mul(a, b), _loop_product(a, b), atol=1e-12)
        np.testing.assert_allclose(naive_mat_mul(a, b), _loop_product(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mat_mul(np.ones((2, 3)), np.ones((2, 3)))

    def test_ledger_counts_mkn(self):
        ledger = FlopLedger()
        mat_mul(np.ones((4, 5)), np.ones((5, 6)), ledger, "x")
        assert ledger.total == 4 * 5 * 6
        mat_mul(np.ones((2, 4, 5)), np.ones((5, 6)), ledger, "x")
        assert ledger.counts["x"] == 3 * 4 * 5 * 6

    def test_ledger_rejects_negative(self):
        with pytest.raises(ValueError):
            FlopLedger().add("x", -1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_associativity(self, m, k, n, p, seed):
        g = np.random.default_rng(seed)
        a, b, c = g.normal(size=(m, k)), g.normal(size=(k, n)), g.normal(size=(n, p))
        left = mat_mul(mat_mul(a, b), c)
        right = mat_mul(a, mat_mul(b, c))
        scale = np.abs(a).max() * np.abs(b).max() * np.abs(c).max() * k * n
        np.testing.assert_allclose(left, right, atol=1e-10 * max(scale, 1.0))


class TestAsMat:
    def test_vector_becomes_row(self):
        assert as_mat([1, 2, 3]).shape == (1, 3)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            as_mat([[1.0, np.nan]])

    def test_shape_check(self):
        with pytest.raises(ShapeError):
            as_mat(np.ones((2, 2)), rows=3)


class TestJacobi:
    def test_identity(self):
        vals, q = jacobi_eigh(np.eye(3))
        np.testing.assert_allclose(vals, [1, 1, 1])
        assert np.max(np.abs(q.T @ q - np.eye(3))) < 1e-12

    def test_two_by_two(self):
        vals, _ = jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(vals, [3.0, 1.0], atol=1e-14)

    def test_reconstruction_and_trace(self, np_rng):
        a = np_rng.normal(size=(6, 6))
        s = a + a.T
        vals, q = jacobi_eigh(s)
        np.testing.assert_allclose(q @ np.diag(vals) @ q.T, s, atol=1e-8)
        assert abs(vals.sum() - np.trace(s)) <= 1e-9 * np.abs(s).sum()
        assert np.all(np.diff(vals) <= 0)

    def test_matches_lapack(self, np_rng):
        a = np_rng.normal(size=(12, 12))
        s = a @ a.T
        np.testing.assert_allclose(jacobi_eigh(s)[0], np.linalg.eigvalsh(s)[::-1], atol=1e-10)

    def test_sign_convention(self, np_rng):
        a = np_rng.normal(size=(5, 5))
        _, q = jacobi_eigh(a + a.T)
        idx = np.argmax(np.abs(q), axis=0)
        assert np.all(q[idx, np.arange(5)] > 0)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_sweep_budget(self, np_rng):
        a = np_rng.normal(size=(8, 8))
        with pytest.raises(ConvergenceError):
            jacobi_eigh(a + a.T, max_sweeps=1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_orthogonal_property(self, n, seed):
        a = np.random.default_rng(seed).normal(size=(n, n))
        vals, q = jacobi_eigh(a + a.T)
        assert np.max(np.abs(q.T @ q - np.eye(n))) < 1e-12
        np.testing.assert_allclose(q @ np.diag(vals) @ q.T, a + a.T, atol=1e-9)


class TestRng:
    def test_zero_std(self):
        np.testing.assert_array_equal(gaussian_sample(Rng(3), 4, 5, 0.0), np.zeros((4, 5)))

    def test_reproducible(self):
        np.testing.assert_array_equal(gaussian_sample(Rng(1), 3, 3), gaussian_sample(Rng(1), 3, 3))

    def test_moments(self):
        x = Rng(5).normal(100_000)
        assert abs(x.mean()) < 0.02
        assert abs(x.var() - 1.0) < 0.02

    def test_split_is_stateless_and_distinct(self):
        root = Rng(9)
        a = root.split("a").uniform(4)
        root.uniform(10)  # consuming the parent does not move children
        np.testing.assert_array_equal(a, root.split("a").uniform(4))
        assert not np.array_equal(a, root.split("b").uniform(4))

    def test_permutation(self):
        perm = Rng(2).permutation(20)
        np.testing.assert_array_equal(np.sort(perm), np.arange(20))

    def test_seed_range(self):
        with pytest.raises(ValueError):
            Rng(-1)
