"""Front-end transforms: instance normalization, OrthoTrans and dimension extension.

All functions act on the last axis, so they accept a single ``N x T`` window
or a stacked batch ``(B, N, T)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, jacobi_eigh

NORM_EPS = 1e-5


@dataclass(frozen=True)
class InstanceNormState:
    mean: np.ndarray  # (..., N, 1)
    scale: np.ndarray  # sqrt(var + eps), (..., N, 1)
    eps: float = NORM_EPS


@dataclass(frozen=True)
class OrthoBasis:
    q_in: np.ndarray  # T x T
    q_out: np.ndarray  # H x H
    eig_in: np.ndarray | None = None
    eig_out: np.ndarray | None = None


def instance_norm(x: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, InstanceNormState]:
    if x.shape[-1] < 2:
        raise ShapeError("instance_norm needs at least 2 time steps")
    t = x.shape[-1]
    mean = np.add.reduce(x, axis=-1, keepdims=True) / t
    centered = x - mean
    scale = np.sqrt(np.add.reduce(centered * centered, axis=-1, keepdims=True) / t + eps)
    return centered / scale, InstanceNormState(mean, scale, eps)


def denorm(y: np.ndarray, state: InstanceNormState) -> np.ndarray:
    if y.shape[:-1] != state.mean.shape[:-1]:
        raise ShapeError(f"denorm: forecast rows {y.shape[:-1]} do not match state {state.mean.shape[:-1]}")
    return y * state.scale + state.mean


def normalize_target(y: np.ndarray, state: InstanceNormState) -> np.ndarray:
    """Express a target window in the lookback's normalized coordinates."""
    return (y - state.mean) / state.scale


def autocorrelation(rows: np.ndarray) -> np.ndarray:
    """Average outer product r^T r over instance-normalized rows of shape (..., L)."""
    flat = rows.reshape(-1, rows.shape[-1])
    normed, _ = instance_norm(flat)
    acf = normed.T @ normed / flat.shape[0]
    return 0.5 * (acf + acf.T)


def fit_ortho_basis(xs: np.ndarray, ys: np.ndarray, tol: float = 1e-12) -> OrthoBasis:
    """Eigenbases of the lookback and horizon autocorrelation matrices.

    ``xs`` is (S, N, T) and ``ys`` is (S, N, H); a list of ``Sample`` objects
    can be passed through ``stack_samples`` first.
    """
    if len(xs) == 0:
        raise ValueError("fit_ortho_basis needs at least one training sample")
    ev_in, q_in = jacobi_eigh(autocorrelation(xs), tol)
    ev_out, q_out = jacobi_eigh(autocorrelation(ys), tol)
    return OrthoBasis(q_in, q_out, ev_in, ev_out)


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.x for s in samples]), np.stack([s.y for s in samples])


def ortho_apply(x: np.ndarray, q: np.ndarray) -> np.ndarray:
    if x.shape[-1] != q.shape[0]:
        raise ShapeError(f"ortho_apply: width {x.shape[-1]} vs basis {q.shape}")
    return x @ q


def ortho_inverse_apply(z: np.ndarray, q_out: np.ndarray) -> np.ndarray:
    if z.shape[-1] != q_out.shape[1]:
        raise ShapeError(f"ortho_inverse_apply: width {z.shape[-1]} vs basis {q_out.shape}")
    return z @ q_out.T


def dim_extend(x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Scale x by each multiplier and concatenate: block j is phi[j] * x."""
    phi = np.asarray(phi, dtype=np.float64).ravel()
    if phi.size < 1:
        raise ShapeError("dim_extend needs at least one multiplier")
    return np.concatenate([p * x for p in phi], axis=-1)
