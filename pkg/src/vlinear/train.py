"""Analytic gradients, finite-difference verification, ADAM, the early-stopping
training loop and checkpoint persistence."""
from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import flowmatch
from .flowmatch import FlowDraws, LossSpec, draw_flow_noise, head_loss, head_loss_and_grads
from .linalg import Rng
from .model import ModelConfig, encode, encode_bwd, forecast, init_params, param_shapes
from .transforms import OrthoBasis, normalize_target

log = logging.getLogger(__name__)


# -- gradients ---------------------------------------------------------------------

def loss_and_grads(xs, ys, params, basis: OrthoBasis, config: ModelConfig, spec: LossSpec,
                   draws: FlowDraws, noise: bool = True):
    """Batch-mean loss and exact gradients for fixed flow draws.

    Instance-norm statistics and the orthogonal bases are constants.
    """
    out, cache = encode(xs, params, basis, config, keep_cache=True)
    y_norm = normalize_target(ys, out.norm_state)
    loss, dcond, grads = head_loss_and_grads(out.cond, y_norm, params, spec, draws, noise)
    grads.update(encode_bwd(dcond, cache, params, basis, config))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
    return loss, {k: grads[k] for k in params}


def backward(batch, params, basis, config, loss_spec: LossSpec, rng: Rng, noise: bool = True):
    """Loss and gradients for a batch given as a list of Samples or (xs, ys) arrays."""
    xs, ys = _as_arrays(batch)
    if len(xs) == 0:
        raise ValueError("backward needs a non-empty batch")
    draws = draw_flow_noise(rng, *ys.shape)
    return loss_and_grads(xs, ys, params, basis, config, loss_spec, draws, noise)


def batch_loss(xs, ys, params, basis, config, spec, draws, noise=True) -> float:
    out, _ = encode(xs, params, basis, config)
    y_norm = normalize_target(ys, out.norm_state)
    return head_loss(out.cond, y_norm, params, spec, draws, noise)


def _as_arrays(batch):
    if isinstance(batch, tuple):
        return batch
    return np.stack([s.x for s in batch]), np.stack([s.y for s in batch])


# ulps of the loss tolerated as rounding noise in a central difference
ROUNDOFF_ULPS = 16


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    threshold: float
    masked: dict[str, int] = field(default_factory=dict)
    refined: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.per_tensor, key=self.per_tensor.get)
        return name, self.per_tensor[name]

    @property
    def passed(self) -> bool:
        return all(err < self.threshold for err in self.per_tensor.values())


def finite_diff_check(params, probe, basis, config, loss_spec, eps: float = 1e-4,
                      rng: Rng | None = None, threshold: float = 1e-4, noise: bool = True,
                      analytic: dict | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences on every entry.

    Flow time and noise are drawn once and frozen across perturbations.
    Relative error per entry is |g - fd| / max(|g|, 1e-8). Entries where both
    the analytic and the numeric value sit below the rounding floor of the
    difference quotient (a few ulps of the loss over 2*eps) are structurally
    zero and are skipped; their count is reported in ``masked``. Entries that
    miss the threshold are re-estimated with a Richardson-extrapolated central
    difference (steps eps and eps/2, truncation O(eps^4)) before being judged,
    so small gradients near a sign change are not failed on the O(eps^2)
    truncation of the plain quotient; the count is in ``refined``. Pass
    ``analytic`` to check an externally supplied gradient set.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xs, ys = _as_arrays(probe if isinstance(probe, (list, tuple)) else [probe])
    draws = draw_flow_noise(rng or Rng(0), *ys.shape)
    loss0, exact = loss_and_grads(xs, ys, params, basis, config, loss_spec, draws, noise)
    if analytic is None:
        analytic = exact
    floor = ROUNDOFF_ULPS * np.finfo(float).eps * max(abs(loss0), 1e-300) / (2.0 * eps)
    out, _ = encode(xs, params, basis, config)
    y_norm = normalize_target(ys, out.norm_state)
    work = {k: v.copy() for k, v in params.items()}

    def loss_at(name):
        if name.startswith("wfm."):  # head tensors leave cond untouched
            return head_loss(out.cond, y_norm, work, loss_spec, draws, noise)
        return batch_loss(xs, ys, work, basis, config, loss_spec, draws, noise)

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_at(name)
        flat[i] = orig - step
        down = loss_at(name)
        flat[i] = orig
        return (up - down) / (2.0 * step)

    report, masked, refined = {}, {}, {}
    for name, tensor in work.items():
        flat = tensor.reshape(-1)
        numeric = np.array([central(flat, i, eps) for i in range(flat.size)])
        g = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        if g.shape != numeric.shape:
            report[name] = np.inf
            continue
        err = np.abs(g - numeric) / np.maximum(np.abs(g), 1e-8)
        retry = np.flatnonzero(err >= threshold)
        for i in retry:
            numeric[i] = (4.0 * central(flat, i, eps / 2) - numeric[i]) / 3.0
        err[retry] = np.abs(g[retry] - numeric[retry]) / np.maximum(np.abs(g[retry]), 1e-8)
        noise_level = (np.abs(g) < floor) & (np.abs(numeric) < floor)
        masked[name] = int(noise_level.sum())
        refined[name] = int(retry.size)
        report[name] = float(np.max(np.where(noise_level, 0.0, err), initial=0.0))
    return GradCheckReport(report, threshold, masked, refined)


# -- optimizer ------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected ADAM update; returns (new_params, state)."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state


# -- training loop ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    loss: LossSpec = LossSpec()
    noise: bool = True
    k_steps: int = 10

    def __post_init__(self):
        if self.lr < 0 or self.batch < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("lr must be >= 0 and batch, epochs, patience >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float


@dataclass
class TrainResult:
    params: dict
    history: list[EpochRecord]
    best_epoch: int


def evaluate_mse(xs, ys, params, basis, config, k_steps: int = 10, chunk: int = 512) -> float:
    total, count = 0.0, 0
    for i in range(0, len(xs), chunk):
        pred = forecast(xs[i:i + chunk], params, basis, config, k_steps)
        total += float(((pred - ys[i:i + chunk]) ** 2).sum())
        count += pred.size
    return total / count


def train_loop(train, val, basis, model_config: ModelConfig, config: TrainConfig,
               params=None, on_epoch=None) -> TrainResult:
    """Shuffled mini-batch ADAM with early stopping on validation MSE.

    ``train`` and ``val`` are (xs, ys) array pairs. Returns the parameters from
    the best validation epoch. ``on_epoch(epoch, params)`` may return a
    replacement parameter dict (used by tests to inject faults).
    """
    xs, ys = train
    vx, vy = val
    if len(xs) == 0 or len(vx) == 0:
        raise ValueError("train and validation sets must be non-empty")
    root = Rng(config.seed)
    if params is None:
        params = init_params(model_config, root.split("init"))
        params.update(flowmatch.init_wfm_params(model_config.horizon, root.split("init.head")))
    shuffle_rng, noise_rng = root.split("shuffle"), root.split("noise")
    state = AdamState(lr=config.lr)
    best = (np.inf, copy.deepcopy(params), 0)
    history = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(xs))
        losses = []
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            loss, grads = backward((xs[idx], ys[idx]), params, basis, model_config,
                                   config.loss, noise_rng, config.noise)
            params, state = adam_step(params, grads, state)
            losses.append(loss)
        if on_epoch is not None:
            params = on_epoch(epoch, params) or params
        val_mse = evaluate_mse(vx, vy, params, basis, model_config, config.k_steps)
        history.append(EpochRecord(epoch, float(np.mean(losses)), val_mse))
        log.info("epoch %d train_loss %.6f val_mse %.6f", epoch, history[-1].train_loss, val_mse)
        if val_mse < best[0]:
            best = (val_mse, copy.deepcopy(params), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best[1], history, best[2])


# -- checkpoints ------------------------------------------------------------------------------

MAGIC = "VLIN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    basis: OrthoBasis
    model_config: ModelConfig
    meta: dict
    stats_mean: np.ndarray | None = None
    stats_std: np.ndarray | None = None


_MODEL_KEYS = {"n_var": int, "lookback": int, "horizon": int, "d_model": int, "d_ext": int,
               "layers": int, "mixer": str, "rank_k": int, "heads": int, "temporal": str, "seed": int}


def _fmt(v) -> str:
    return "%.17g" % v


def _tensor_block(name, arr) -> list[str]:
    mat = arr.reshape(1, -1) if arr.ndim < 2 else arr
    lines = [f"tensor {name} {mat.shape[0]} {mat.shape[1]}"]
    lines += [" ".join(_fmt(v) for v in row) for row in mat]
    return lines


def save_checkpoint(path, params, basis: OrthoBasis, model_config: ModelConfig, meta: dict | None = None,
                    stats_mean=None, stats_std=None) -> None:
    """Write the text checkpoint.

    Layout: magic line, one line of space-separated key=value config pairs,
    then tensors in ``init_params`` order followed by ``wfm.*``, the two
    orthogonal bases and (if given) the global standardization statistics.
    """
    pairs = [f"{k}={v}" for k, v in model_config.to_dict().items()]
    pairs += [f"{k}={v}" for k, v in (meta or {}).items()]
    lines = [f"{MAGIC}{VERSION}", " ".join(pairs)]
    for name in _tensor_order(model_config):
        lines += _tensor_block(name, params[name])
    lines += _tensor_block("basis.q_in", basis.q_in)
    lines += _tensor_block("basis.q_out", basis.q_out)
    if stats_mean is not None:
        lines += _tensor_block("stats.mean", np.asarray(stats_mean))
        lines += _tensor_block("stats.std", np.asarray(stats_std))
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _tensor_order(config: ModelConfig) -> list[str]:
    return list(param_shapes(config)) + ["wfm.w", "wfm.b", "wfm.s"]


def _expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = dict(param_shapes(config))
    h = config.horizon
    shapes.update({"wfm.w": (2 * h + 1, h), "wfm.b": (h,), "wfm.s": (1,),
                   "basis.q_in": (config.lookback, config.lookback), "basis.q_out": (h, h),
                   "stats.mean": (config.n_var,), "stats.std": (config.n_var,)})
    return shapes


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise CheckpointError("bad magic")
    if lines[0] != f"{MAGIC}{VERSION}":
        raise CheckpointError(f"unsupported checkpoint version {lines[0][len(MAGIC):]!r}")
    if len(lines) < 2:
        raise CheckpointError("truncated checkpoint: missing config line")
    raw = dict(item.split("=", 1) for item in lines[1].split())
    try:
        config = ModelConfig(**{k: typ(raw.pop(k)) for k, typ in _MODEL_KEYS.items()})
    except KeyError as exc:
        raise CheckpointError(f"config line lacks key {exc}") from None
    expected = _expected_shapes(config)
    tensors = {}
    i = 2
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 4 or head[0] != "tensor":
            raise CheckpointError(f"malformed tensor header at line {i + 1}")
        name, rows, cols = head[1], int(head[2]), int(head[3])
        body = lines[i + 1:i + 1 + rows]
        if len(body) < rows:
            raise CheckpointError(f"truncated checkpoint inside tensor {name!r}")
        arr = np.array([[float(v) for v in row.split()] for row in body])
        if arr.shape != (rows, cols):
            raise CheckpointError(f"tensor {name!r} body does not match header {rows}x{cols}")
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r}")
        want = expected[name]
        if int(np.prod(want)) != arr.size or (len(want) == 2 and want != arr.shape):
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config implies {want}")
        tensors[name] = arr.reshape(want)
        i += 1 + rows
    missing = [n for n in _tensor_order(config) + ["basis.q_in", "basis.q_out"] if n not in tensors]
    if missing:
        raise CheckpointError(f"truncated checkpoint: missing tensors {missing}")
    params = {n: tensors[n] for n in _tensor_order(config)}
    basis = OrthoBasis(tensors["basis.q_in"], tensors["basis.q_out"])
    return Checkpoint(params, basis, config, raw, tensors.get("stats.mean"), tensors.get("stats.std"))
