"""The vLinear encoder: front end, stacked mixer/MLP blocks and the projection to
the conditional representation ``cond``.

Parameters live in one flat ordered dict; block tensors are prefixed
``blocks.<l>.<sublayer>.``. The order produced by ``init_params`` is the
canonical order used by checkpoints.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import mixers
from .flowmatch import infer_deterministic, infer_probabilistic
from .linalg import FlopLedger, Rng, ShapeError
from .transforms import (
    InstanceNormState,
    OrthoBasis,
    denorm,
    dim_extend,
    instance_norm,
    ortho_apply,
    ortho_inverse_apply,
)


@dataclass(frozen=True)
class ModelConfig:
    n_var: int
    lookback: int
    horizon: int
    d_model: int = 64
    d_ext: int = 2
    layers: int = 2
    mixer: str = "vectrans"
    rank_k: int = 4
    heads: int = 4
    temporal: str = "mlp"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_var", "lookback", "horizon", "d_model", "d_ext", "rank_k", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.lookback < 2:
            raise ValueError("lookback must be >= 2 for instance normalization")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2 for layer normalization")
        if self.mixer not in mixers.MIXER_KINDS:
            raise ValueError(f"unknown mixer {self.mixer!r}")
        if self.temporal not in ("mlp", "none"):
            raise ValueError(f"unknown temporal kind {self.temporal!r}")
        if self.mixer == "mhsa" and self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def d_ff(self) -> int:
        return 2 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CondOutput:
    cond: np.ndarray
    norm_state: InstanceNormState


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    n, t, h, d = config.n_var, config.lookback, config.horizon, config.d_model
    shapes = {"dimext.phi": (config.d_ext,),
              "embed.w": (config.d_ext * t, d), "embed.b": (d,)}
    for layer in range(config.layers):
        pre = f"blocks.{layer}."
        for key, shp in mixers.mixer_param_shapes(config.mixer, n, d, config.rank_k).items():
            shapes[pre + "mixer." + key] = shp
        shapes[pre + "ln1.gamma"] = (d,)
        shapes[pre + "ln1.beta"] = (d,)
        if config.temporal == "mlp":
            shapes[pre + "mlp.fc1.w"] = (d, config.d_ff)
            shapes[pre + "mlp.fc1.b"] = (config.d_ff,)
            shapes[pre + "mlp.fc2.w"] = (config.d_ff, d)
            shapes[pre + "mlp.fc2.b"] = (d,)
        shapes[pre + "ln2.gamma"] = (d,)
        shapes[pre + "ln2.beta"] = (d,)
    shapes["proj.w"] = (d, h)
    shapes["proj.b"] = (h,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Encoder parameters: fan-in uniform weights, zero biases, unit LN scale,
    zero mixing logits (uniform mixing), unit extension multipliers."""
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "w":
            bound = np.sqrt(1.0 / shape[0])
            params[name] = rng.uniform(shape, -bound, bound)
        elif leaf in ("phi", "gamma"):
            params[name] = np.ones(shape)
        elif leaf == "A":
            params[name] = rng.uniform(shape, 0.5, 1.5)
        else:  # biases, beta, vecTrans logits a, rank-k B, NormLin matrix
            params[name] = np.zeros(shape)
    return params


@lru_cache(maxsize=256)
def _sub_keys(keys: tuple, prefix: str) -> tuple:
    n = len(prefix)
    return tuple((k, k[n:]) for k in keys if k.startswith(prefix))


def sub(params: dict, prefix: str) -> dict:
    """View of the tensors under ``prefix`` with the prefix stripped."""
    return {short: params[k] for k, short in _sub_keys(tuple(params), prefix)}


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except ShapeError as exc:
        raise ShapeError(f"[{name}] {exc}") from None


def encode(x, params, basis: OrthoBasis, config: ModelConfig,
           ledger: FlopLedger | None = None, keep_cache: bool = False):
    """Map lookback windows (..., N, T) to ``cond`` (..., N, H).

    Returns ``(CondOutput, cache)``; ``cache`` is None unless ``keep_cache``.
    """
    if x.shape[-2:] != (config.n_var, config.lookback):
        raise ShapeError(f"[input] expected (..., {config.n_var}, {config.lookback}), got {x.shape}")
    xn, state = _stage("instance_norm", instance_norm, x)
    z = _stage("ortho", ortho_apply, xn, basis.q_in)
    ext = _stage("dim_extend", dim_extend, z, params["dimext.phi"])
    h = _stage("embed", mixers.linear, ext, params["embed.w"], params["embed.b"], ledger, "embed")
    blocks = []
    for layer in range(config.layers):
        pre = f"blocks.{layer}."
        mp = sub(params, pre + "mixer.")
        m, mcache = _stage("mixer", mixers.mixer_fwd, config.mixer, h, mp, config.heads, ledger)
        hv, ln1 = mixers.layer_norm_fwd(h + m, sub(params, pre + "ln1."))
        if config.temporal == "mlp":
            f, fcache = _stage("mlp", mixers.temporal_mlp_fwd, hv, sub(params, pre + "mlp."), ledger)
        else:
            f, fcache = 0.0, None
        h, ln2 = mixers.layer_norm_fwd(hv + f, sub(params, pre + "ln2."))
        blocks.append((mcache, ln1, fcache, ln2))
    proj_in = h
    out = _stage("projection", mixers.linear, h, params["proj.w"], params["proj.b"], ledger, "projection")
    cond = _stage("ortho_inverse", ortho_inverse_apply, out, basis.q_out)
    cache = None
    if keep_cache:
        cache = {"z": z, "ext": ext, "blocks": blocks, "proj_in": proj_in}
    return CondOutput(cond, state), cache


def forward_cond(x, params, basis, config, ledger=None) -> CondOutput:
    return encode(x, params, basis, config, ledger)[0]


def encode_bwd(dcond, cache, params, basis: OrthoBasis, config: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of the encoder parameters given d(loss)/d(cond)."""
    grads = {}
    dout = dcond @ basis.q_out
    dh, grads["proj.w"], grads["proj.b"] = mixers.linear_bwd(dout, cache["proj_in"], params["proj.w"])
    for layer in reversed(range(config.layers)):
        pre = f"blocks.{layer}."
        mcache, ln1, fcache, ln2 = cache["blocks"][layer]
        du2, g = mixers.layer_norm_bwd(dh, ln2, sub(params, pre + "ln2."))
        _merge(grads, pre + "ln2.", g)
        dhv = du2
        if config.temporal == "mlp":
            dmlp_in, g = mixers.temporal_mlp_bwd(du2, fcache, sub(params, pre + "mlp."))
            _merge(grads, pre + "mlp.", g)
            dhv = dhv + dmlp_in
        du1, g = mixers.layer_norm_bwd(dhv, ln1, sub(params, pre + "ln1."))
        _merge(grads, pre + "ln1.", g)
        dmix_in, g = mixers.mixer_bwd(config.mixer, du1, mcache, sub(params, pre + "mixer."))
        _merge(grads, pre + "mixer.", g)
        dh = du1 + dmix_in
    dext, grads["embed.w"], grads["embed.b"] = mixers.linear_bwd(dh, cache["ext"], params["embed.w"])
    t = config.lookback
    z = cache["z"]
    grads["dimext.phi"] = np.array([(dext[..., j * t:(j + 1) * t] * z).sum() for j in range(config.d_ext)])
    return grads


def _merge(grads, prefix, local):
    for k, v in local.items():
        grads[prefix + k] = v


def forecast(x, params, basis, config, k_steps: int = 10) -> np.ndarray:
    """Deterministic zero-start forecast in the input's units."""
    out = forward_cond(x, params, basis, config)
    return denorm(infer_deterministic(out.cond, params, k_steps), out.norm_state)


def forecast_ensemble(x, params, basis, config, k_steps: int, m_samples: int, rng: Rng,
                      std: float | None = None):
    """Gaussian-start ensemble forecasts; returns (members (M, ..., N, H), mean)."""
    out = forward_cond(x, params, basis, config)
    members, _ = infer_probabilistic(out.cond, params, k_steps, m_samples, rng, std)
    state = out.norm_state
    members = members * state.scale + state.mean
    return members, members.mean(axis=0)
