"""The flow-matching head: state interpolation, the linear velocity layer
(WFMLin), the weighted final-series loss and its velocity-loss variants, and
Euler inference from the origin or from Gaussian noise.

Head parameters are stored under ``wfm.w`` ((2H+1) x H, rows ordered
cond | state | time), ``wfm.b`` (H,) and ``wfm.s`` (1,), the softplus
pre-activation of the initial-noise standard deviation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Rng, ShapeError

LOSS_KINDS = ("wfm", "vel_weighted", "vel_mse")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class LossSpec:
    kind: str = "wfm"
    alpha: float = -0.5
    beta: float = -0.5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")


def init_wfm_params(horizon: int, rng: Rng) -> dict[str, np.ndarray]:
    fan_in = 2 * horizon + 1
    bound = np.sqrt(1.0 / fan_in)
    return {"wfm.w": rng.uniform((fan_in, horizon), -bound, bound),
            "wfm.b": np.zeros(horizon),
            "wfm.s": np.zeros(1)}


def noise_std(p) -> float:
    return float(_softplus(p["wfm.s"][0]))


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    return t


def _time_column(t, like):
    """Broadcast scalar or per-sample t to shape (..., N, 1) matching ``like``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(like.shape[:-1] + (1,), float(t))
    return np.broadcast_to(t.reshape(t.shape + (1,) * (like.ndim - t.ndim)), like.shape[:-1] + (1,))


def interpolate_state(y_gt, y0, t):
    t = _check_t(t)
    tc = _time_column(t, y_gt)
    return tc * y_gt + (1.0 - tc) * y0


def wfm_velocity(cond, y_t, t, p):
    """Velocity for each variate row: W^T [cond_n | y_t,n | t] + b."""
    w = p["wfm.w"]
    h = cond.shape[-1]
    if y_t.shape != cond.shape or w.shape != (2 * h + 1, h):
        raise ShapeError(f"wfm_velocity: cond {cond.shape}, state {y_t.shape}, weight {w.shape}")
    tc = _time_column(t, cond)
    return cond @ w[:h] + y_t @ w[h:2 * h] + tc * w[2 * h] + p["wfm.b"]


def horizon_weights(h: int, beta: float = -0.5) -> np.ndarray:
    return np.arange(1, h + 1, dtype=np.float64) ** beta


def path_weight(t, alpha: float = -0.5):
    return (2.0 - np.asarray(t, dtype=np.float64)) ** alpha


def _per_sample_weights(residual, t, alpha, beta):
    """Weights for every residual entry: (2-t)^alpha * i^beta / (H*N)."""
    n, h = residual.shape[-2:]
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and residual.ndim == 3:
        pw = path_weight(t, alpha)[:, None, None]
    else:
        pw = _time_column(path_weight(t, alpha), residual)
    return pw * horizon_weights(h, beta) / (h * n)


def weighted_l1(residual, t, alpha=-0.5, beta=-0.5):
    """Path- and horizon-weighted L1, averaged over leading batch axes."""
    w = _per_sample_weights(residual, t, alpha, beta)
    per_sample = (w * np.abs(residual)).sum(axis=(-2, -1))
    return float(np.mean(per_sample))


def wfm_loss(y1_hat, y_gt_norm, t, spec: LossSpec = LossSpec()):
    if spec.kind != "wfm":
        raise ValueError("wfm_loss requires a LossSpec of kind 'wfm'")
    _check_t(t)
    return weighted_l1(y1_hat - y_gt_norm, t, spec.alpha, spec.beta)


def velocity_loss(v_hat, v_gt, t, spec: LossSpec):
    if v_hat.shape != v_gt.shape:
        raise ShapeError(f"velocity_loss: {v_hat.shape} vs {v_gt.shape}")
    if spec.kind == "vel_mse":
        return float(np.mean((v_hat - v_gt) ** 2))
    if spec.kind == "vel_weighted":
        return weighted_l1(v_hat - v_gt, _check_t(t), spec.alpha, spec.beta)
    raise ValueError(f"velocity_loss does not handle kind {spec.kind!r}")


@dataclass
class FlowDraws:
    """Per-sample flow time and standard-normal noise for one training step."""
    t: np.ndarray  # (B,)
    eps: np.ndarray  # (B, N, H)


def draw_flow_noise(rng: Rng, batch: int, n: int, h: int) -> FlowDraws:
    return FlowDraws(rng.uniform(batch), rng.normal((batch, n, h)))


@dataclass
class TrainingTargets:
    t: np.ndarray
    y0: np.ndarray
    y_t: np.ndarray
    draws: FlowDraws
    std: float


def training_step_targets(y_gt_norm, rng: Rng | None, p, spec: LossSpec = LossSpec(),
                          noise: bool = True, draws: FlowDraws | None = None) -> TrainingTargets:
    """Sample t ~ U[0,1] per sample and y0 = Softplus(s) * eps, then interpolate."""
    y = y_gt_norm if y_gt_norm.ndim == 3 else y_gt_norm[None]
    if draws is None:
        draws = draw_flow_noise(rng, *y.shape)
    std = noise_std(p) if noise else 0.0
    y0 = std * draws.eps
    y_t = interpolate_state(y, y0, draws.t)
    return TrainingTargets(draws.t, y0, y_t, draws, std)


def head_loss(cond, y_gt_norm, p, spec: LossSpec, draws: FlowDraws, noise: bool = True) -> float:
    """Forward-only counterpart of ``head_loss_and_grads``."""
    t = draws.t[:, None, None]
    y0 = noise_std(p) * draws.eps if noise else 0.0
    y_t = t * y_gt_norm + (1.0 - t) * y0
    h = cond.shape[-1]
    w = p["wfm.w"]
    v = cond @ w[:h] + y_t @ w[h:2 * h] + t * w[2 * h] + p["wfm.b"]
    if spec.kind == "wfm":
        residual = y_t + (1.0 - t) * v - y_gt_norm
    else:
        residual = v - (y_gt_norm - y0)
    if spec.kind == "vel_mse":
        return float(np.mean(residual ** 2))
    wts = _per_sample_weights(residual, draws.t, spec.alpha, spec.beta)
    return float((wts * np.abs(residual)).sum() / cond.shape[0])


def head_loss_and_grads(cond, y_gt_norm, p, spec: LossSpec, draws: FlowDraws, noise: bool = True):
    """Loss of the head for a batch plus d(loss)/d(cond) and the head gradients.

    ``cond`` and ``y_gt_norm`` are (B, N, H); the loss is the batch mean. The
    noise scale receives gradient through every occurrence of y0.
    """
    b, n, h = cond.shape
    w = p["wfm.w"]
    tgt = training_step_targets(y_gt_norm, None, p, spec, noise, draws)
    t = tgt.t
    v = wfm_velocity(cond, tgt.y_t, t, p)
    one_minus_t = _time_column(1.0 - t, cond)

    if spec.kind == "wfm":
        y1 = tgt.y_t + one_minus_t * v
        residual = y1 - y_gt_norm
    else:
        residual = v - (y_gt_norm - tgt.y0)

    if spec.kind == "vel_mse":
        loss = float(np.mean(residual ** 2))
        dres = 2.0 * residual / residual.size
    else:
        wts = _per_sample_weights(residual, t, spec.alpha, spec.beta)
        loss = float((wts * np.abs(residual)).sum() / b)
        dres = wts * np.sign(residual) / b  # sign(0) = 0

    dy_t = np.zeros_like(cond)
    dy0 = np.zeros_like(cond)
    if spec.kind == "wfm":
        dy_t += dres
        dv = one_minus_t * dres
    else:
        dv = dres
        dy0 += dres

    flat_in = np.concatenate([cond, tgt.y_t, _time_column(t, cond)], axis=-1).reshape(-1, 2 * h + 1)
    grads = {"wfm.w": flat_in.T @ dv.reshape(-1, h), "wfm.b": dv.reshape(-1, h).sum(axis=0)}
    dcond = dv @ w[:h].T
    dy_t += dv @ w[h:2 * h].T
    dy0 += one_minus_t * dy_t
    if noise:
        grads["wfm.s"] = np.array([float((dy0 * draws.eps).sum() * _sigmoid(p["wfm.s"][0]))])
    else:
        grads["wfm.s"] = np.zeros(1)
    return loss, dcond, grads


def infer_deterministic(cond, p, k_steps: int = 10, start=None):
    """K Euler steps of the velocity field from the all-zero state (or ``start``)."""
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    dt = 1.0 / k_steps
    state = np.zeros_like(cond) if start is None else np.array(start, dtype=np.float64)
    for k in range(k_steps):
        state = state + dt * wfm_velocity(cond, state, k * dt, p)
    return state


def infer_sum_form(cond, p, k_steps: int):
    """Zero-start output written as dt * sum of velocities along the trajectory."""
    dt = 1.0 / k_steps
    states = [np.zeros_like(cond)]
    velocities = []
    for k in range(k_steps):
        velocities.append(wfm_velocity(cond, states[-1], k * dt, p))
        states.append(states[-1] + dt * velocities[-1])
    return dt * np.sum(velocities, axis=0)


def infer_probabilistic(cond, p, k_steps: int, m_samples: int, rng: Rng, std: float | None = None):
    """Integrate ``m_samples`` trajectories from y0 = std * eps.

    Returns the stacked ensemble (M, ..., N, H) and its mean. ``std`` defaults
    to Softplus(s).
    """
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    std = noise_std(p) if std is None else float(std)
    start = std * rng.normal((m_samples,) + cond.shape)
    members = infer_deterministic(np.broadcast_to(cond, start.shape), p, k_steps, start)
    return members, members.mean(axis=0)
