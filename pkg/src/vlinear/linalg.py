"""Dense linear algebra, a Jacobi eigensolver, seeded sampling and MAC counting.

Matrices are plain float64 numpy arrays. ``as_mat`` is the validating
constructor used at module boundaries; inside hot loops arrays are passed
around without re-validation.
"""
from __future__ import annotations

import zlib
from collections import defaultdict

import numpy as np

Mat = np.ndarray


class ShapeError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def as_mat(data, rows: int | None = None, cols: int | None = None) -> Mat:
    """Return ``data`` as a finite 2-D float64 array, optionally shape-checked."""
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    return m


class FlopLedger:
    """Multiply-add counters keyed by kernel label."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, label: str, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC count must be non-negative")
        self.counts[label] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __repr__(self):
        return f"FlopLedger({dict(self.counts)!r})"


def mat_mul(a: Mat, b: Mat, ledger: FlopLedger | None = None, label: str = "matmul") -> Mat:
    """Matrix product with optional MAC accounting.

    Accepts stacked operands (``np.matmul`` broadcasting); the ledger is charged
    ``batch * m * k * n`` for an ``(..., m, k) @ (..., k, n)`` product.
    """
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"{label}: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a, b)
    if ledger is not None:
        k = a.shape[-1]
        ledger.add(label, out.size * k)
    return out


def naive_mat_mul(a: Mat, b: Mat) -> Mat:
    """Triple-loop reference product, used as an oracle."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def _round_robin(m: int):
    """Pairings for m players (m even): m-1 rounds covering every pair once."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        rounds.append([(players[i], players[m - 1 - i]) for i in range(m // 2)])
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(s: Mat, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, Mat]:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi sweeps.

    Rotations are scheduled in round-robin order so that each round is a set
    of disjoint plane rotations applied at once. Returns eigenvalues sorted
    descending and the matching orthonormal eigenvectors as columns of ``q``;
    each column's largest-magnitude entry is made positive.
    """
    a = np.array(s, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > 1e-9:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)

    if n > 1:
        m = n + (n % 2)
        schedule = []
        for pairs in _round_robin(m):
            pq = np.array([pr for pr in pairs if pr[0] < n and pr[1] < n])
            schedule.append((pq[:, 0], pq[:, 1]))
        offmask = ~np.eye(n, dtype=bool)

        for _ in range(max_sweeps):
            if np.max(np.abs(a[offmask])) < tol:
                break
            for p, q in schedule:
                apq = a[p, q]
                active = apq != 0.0
                if not active.any():
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (a[q, q] - a[p, p]) / (2.0 * safe)
                sgn = np.where(theta >= 0.0, 1.0, -1.0)
                t = sgn / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c

                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * ap - sn[:, None] * aq
                a[q, :] = sn[:, None] * ap + c[:, None] * aq
                a[p[active], q[active]] = 0.0
                a[q[active], p[active]] = 0.0

                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
        else:
            if np.max(np.abs(a[offmask])) >= tol:
                raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")

    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    v = v[:, order]
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivots, np.arange(n)])
    signs[signs == 0] = 1.0
    return evals, v * signs


class Rng:
    """Deterministic counter-based generator (Philox) with labelled splitting.

    ``split(label)`` derives an independent child stream from the root seed and
    the label alone, so sub-streams do not depend on how much the parent has
    been consumed.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, label: str | int) -> "Rng":
        tag = label if isinstance(label, int) else zlib.crc32(str(label).encode())
        return Rng(self.seed, self._key + (int(tag),))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Box-Muller Gaussian draws of the given shape."""
        shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
        count = int(np.prod(shape))
        half = (count + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]
        u2 = self._gen.random(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
        return (std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian_sample(rng: Rng, rows: int, cols: int, std: float = 1.0) -> Mat:
    if rows < 1 or cols < 1:
        raise ShapeError("gaussian_sample needs positive dimensions")
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return np.zeros((rows, cols))
    return rng.normal((rows, cols), std)
