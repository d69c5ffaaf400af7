"""Token mixers (vecTrans, rank-k vecTrans, MHSA, NormLin), the temporal MLP and
layer normalization, each with a hand-written backward pass.

Parameters are plain dicts of arrays keyed by local names (``"pre.w"``,
``"a"``, ...). Every ``*_fwd`` returns ``(out, cache)`` and the matching
``*_bwd(dout, cache, p)`` returns ``(d_input, grads)`` with ``grads`` keyed like
``p``. Inputs may carry any number of leading batch axes; the last two axes
are (tokens N, features D).
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .linalg import FlopLedger, ShapeError, mat_mul

LN_EPS = 1e-5
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def l1_sigmoid(a: np.ndarray) -> np.ndarray:
    """Sigmoid followed by L1 normalization along the last axis."""
    s = sigmoid(a)
    return s / s.sum(axis=-1, keepdims=True)


def l1_sigmoid_bwd(dw: np.ndarray, a: np.ndarray) -> np.ndarray:
    s = sigmoid(a)
    total = s.sum(axis=-1, keepdims=True)
    w = s / total
    ds = (dw - (dw * w).sum(axis=-1, keepdims=True)) / total
    return ds * s * (1.0 - s)


def _rows(x):
    return x.reshape(-1, x.shape[-1])


# -- linear -----------------------------------------------------------------

def linear(x, w, b, ledger: FlopLedger | None = None, label: str = "linear"):
    return mat_mul(x, w, ledger, label) + b


def linear_bwd(dout, x, w):
    dw = _rows(x).T @ _rows(dout)
    db = _rows(dout).sum(axis=0)
    return dout @ w.T, dw, db


# -- vecTrans ---------------------------------------------------------------

def vec_trans(h: np.ndarray, a: np.ndarray, ledger: FlopLedger | None = None) -> np.ndarray:
    """Aggregate tokens with weights L1(Sigmoid(a)) and broadcast to every row.

    The N x N rank-1 matrix is never formed: the (1 x N) weight row multiplies
    ``h`` first.
    """
    if a.shape != (h.shape[-2],):
        raise ShapeError(f"vec_trans: logits shape {a.shape} vs {h.shape[-2]} tokens")
    agg = mat_mul(l1_sigmoid(a)[None, :], h, ledger, "vectrans.aggregate")
    return np.broadcast_to(agg, h.shape).copy()


def _check_width(h, p, key):
    if h.shape[-1] != p[key].shape[0]:
        raise ShapeError(f"feature width {h.shape[-1]} does not match {key} {p[key].shape}")


def vec_trans_module_fwd(h, p, ledger=None):
    _check_width(h, p, "pre.w")
    pre = linear(h, p["pre.w"], p["pre.b"], ledger, "vectrans.pre")
    mixed = vec_trans(pre, p["a"], ledger)
    out = linear(mixed, p["post.w"], p["post.b"], ledger, "vectrans.post")
    return out, (h, pre, mixed)


def vec_trans_module_bwd(dout, cache, p):
    h, pre, mixed = cache
    dmixed, dw_post, db_post = linear_bwd(dout, mixed, p["post.w"])
    w = l1_sigmoid(p["a"])
    dagg = dmixed.sum(axis=-2, keepdims=True)  # (..., 1, D)
    dpre = w[:, None] * dagg
    dweights = (_flat_batch(pre) * _flat_batch(dagg)).sum(axis=(0, 2))
    dh, dw_pre, db_pre = linear_bwd(dpre, h, p["pre.w"])
    grads = {"a": l1_sigmoid_bwd(dweights, p["a"]), "pre.w": dw_pre, "pre.b": db_pre,
             "post.w": dw_post, "post.b": db_post}
    return dh, grads


def _flat_batch(x):
    return x.reshape(-1, *x.shape[-2:])


def vec_trans_module(h, p, ledger=None):
    return vec_trans_module_fwd(h, p, ledger)[0]


# -- rank-k vecTrans ----------------------------------------------------------

def vec_trans_rank_k(h, A, B, ledger=None):
    """Rank-k mixing: A (Sigmoid(B)^T h), rows divided by A (Sigmoid(B)^T 1)."""
    n = h.shape[-2]
    if A.shape != B.shape or A.shape[0] != n:
        raise ShapeError(f"rank-k factors {A.shape}, {B.shape} vs {n} tokens")
    sb = sigmoid(B)
    gathered = mat_mul(sb.T, h, ledger, "rank_k.gather")
    num = mat_mul(A, gathered, ledger, "rank_k.scatter")
    den = mat_mul(A, sb.sum(axis=0)[:, None], ledger, "rank_k.denominator")
    if np.any(den == 0.0):
        raise ZeroDivisionError("rank-k mixing has a zero normalizer row (degenerate A)")
    if ledger is not None:
        ledger.add("rank_k.normalize", num.size)
    return num / den


def rank_k_module_fwd(h, p, ledger=None):
    _check_width(h, p, "pre.w")
    pre = linear(h, p["pre.w"], p["pre.b"], ledger, "rank_k.pre")
    mixed = vec_trans_rank_k(pre, p["A"], p["B"], ledger)
    out = linear(mixed, p["post.w"], p["post.b"], ledger, "rank_k.post")
    return out, (h, pre, mixed)


def rank_k_module_bwd(dout, cache, p):
    h, pre, mixed = cache
    A, B = p["A"], p["B"]
    sb = sigmoid(B)
    colsum = sb.sum(axis=0)
    den = A @ colsum  # (N,)
    gathered = sb.T @ pre  # (..., k, D)

    dmixed, dw_post, db_post = linear_bwd(dout, mixed, p["post.w"])
    dnum = dmixed / den[:, None]
    dden = -(_flat_batch(dmixed * mixed).sum(axis=(0, 2))) / den
    dA = np.einsum("bnd,bkd->nk", _flat_batch(dnum), _flat_batch(gathered))
    dgathered = A.T @ dnum
    dsb = np.einsum("bkd,bnd->nk", _flat_batch(dgathered), _flat_batch(pre))
    dpre = sb @ dgathered
    dA += dden[:, None] * colsum[None, :]
    dsb += (A.T @ dden)[None, :]
    dh, dw_pre, db_pre = linear_bwd(dpre, h, p["pre.w"])
    grads = {"A": dA, "B": dsb * sb * (1.0 - sb), "pre.w": dw_pre, "pre.b": db_pre,
             "post.w": dw_post, "post.b": db_post}
    return dh, grads


# -- NormLin ------------------------------------------------------------------

def normlin_matrix(w):
    return l1_sigmoid(w)


def normlin_forward(h, p, ledger=None):
    """Bare NormLin mixing: L1(Sigmoid(W)) h, without the surrounding linears."""
    if p["mix"].shape != (h.shape[-2], h.shape[-2]):
        raise ShapeError(f"normlin: matrix {p['mix'].shape} vs {h.shape[-2]} tokens")
    return mat_mul(normlin_matrix(p["mix"]), h, ledger, "normlin.mix")


def normlin_module_fwd(h, p, ledger=None):
    _check_width(h, p, "pre.w")
    pre = linear(h, p["pre.w"], p["pre.b"], ledger, "normlin.pre")
    mixed = normlin_forward(pre, p, ledger)
    out = linear(mixed, p["post.w"], p["post.b"], ledger, "normlin.post")
    return out, (h, pre, mixed)


def normlin_module_bwd(dout, cache, p):
    h, pre, mixed = cache
    m = normlin_matrix(p["mix"])
    dmixed, dw_post, db_post = linear_bwd(dout, mixed, p["post.w"])
    dm = np.einsum("bnd,bmd->nm", _flat_batch(dmixed), _flat_batch(pre))
    dpre = m.T @ dmixed
    dh, dw_pre, db_pre = linear_bwd(dpre, h, p["pre.w"])
    grads = {"mix": l1_sigmoid_bwd(dm, p["mix"]), "pre.w": dw_pre, "pre.b": db_pre,
             "post.w": dw_post, "post.b": db_post}
    return dh, grads


# -- multi-head self-attention ------------------------------------------------

def _split_heads(x, heads):
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x):
    x = x.swapaxes(-3, -2)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def mhsa_fwd(h, p, heads: int, ledger=None):
    d = h.shape[-1]
    if heads < 1 or d % heads:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    _check_width(h, p, "q.w")
    q = _split_heads(linear(h, p["q.w"], p["q.b"], ledger, "mhsa.q"), heads)
    k = _split_heads(linear(h, p["k.w"], p["k.b"], ledger, "mhsa.k"), heads)
    v = _split_heads(linear(h, p["v.w"], p["v.b"], ledger, "mhsa.v"), heads)
    scale = 1.0 / np.sqrt(d // heads)
    attn = softmax(mat_mul(q, np.swapaxes(k, -1, -2), ledger, "mhsa.scores") * scale)
    ctx = _merge_heads(mat_mul(attn, v, ledger, "mhsa.context"))
    out = linear(ctx, p["o.w"], p["o.b"], ledger, "mhsa.out")
    return out, (h, q, k, v, attn, ctx, scale)


def mhsa_bwd(dout, cache, p):
    h, q, k, v, attn, ctx, scale = cache
    heads = q.shape[-3]
    dctx, dw_o, db_o = linear_bwd(dout, ctx, p["o.w"])
    dctx = _split_heads(dctx, heads)
    dattn = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    grads = {}
    dh = np.zeros_like(h)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dx, dw, db = linear_bwd(_merge_heads(dproj), h, p[f"{name}.w"])
        dh += dx
        grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
    grads["o.w"], grads["o.b"] = dw_o, db_o
    return dh, grads


def mhsa_forward(h, p, heads: int, ledger=None):
    return mhsa_fwd(h, p, heads, ledger)[0]


def attention_matrices(h, p, heads: int):
    """Per-head softmax attention matrices, shape (..., heads, N, N)."""
    return mhsa_fwd(h, p, heads)[1][4]


# -- temporal MLP ---------------------------------------------------------------

def temporal_mlp_fwd(h, p, ledger=None):
    _check_width(h, p, "fc1.w")
    pre_act = linear(h, p["fc1.w"], p["fc1.b"], ledger, "mlp.fc1")
    act = gelu(pre_act)
    out = linear(act, p["fc2.w"], p["fc2.b"], ledger, "mlp.fc2")
    return out, (h, pre_act, act)


def temporal_mlp_bwd(dout, cache, p):
    h, pre_act, act = cache
    dact, dw2, db2 = linear_bwd(dout, act, p["fc2.w"])
    dh, dw1, db1 = linear_bwd(dact * gelu_grad(pre_act), h, p["fc1.w"])
    return dh, {"fc1.w": dw1, "fc1.b": db1, "fc2.w": dw2, "fc2.b": db2}


def temporal_mlp(h, p, ledger=None):
    return temporal_mlp_fwd(h, p, ledger)[0]


# -- layer norm -------------------------------------------------------------------

def layer_norm_fwd(h, p, eps: float = LN_EPS):
    if h.shape[-1] < 2:
        raise ShapeError("layer_norm needs width >= 2")
    d = h.shape[-1]
    centered = h - np.add.reduce(h, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(np.add.reduce(centered * centered, axis=-1, keepdims=True) / d + eps)
    xhat = centered * inv
    return p["gamma"] * xhat + p["beta"], (xhat, inv)


def layer_norm_bwd(dout, cache, p):
    xhat, inv = cache
    dxhat = dout * p["gamma"]
    dh = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dh, {"gamma": _rows(dout * xhat).sum(axis=0), "beta": _rows(dout).sum(axis=0)}


def layer_norm(h, p, eps: float = LN_EPS):
    return layer_norm_fwd(h, p, eps)[0]


# -- registry ------------------------------------------------------------------------

MIXER_KINDS = ("vectrans", "rank_k", "mhsa", "normlin", "none")


def mixer_param_shapes(kind: str, n: int, d: int, rank: int = 1) -> dict[str, tuple[int, ...]]:
    lin = {"pre.w": (d, d), "pre.b": (d,), "post.w": (d, d), "post.b": (d,)}
    if kind == "vectrans":
        return {"a": (n,), **lin}
    if kind == "rank_k":
        return {"A": (n, rank), "B": (n, rank), **lin}
    if kind == "normlin":
        return {"mix": (n, n), **lin}
    if kind == "mhsa":
        return {f"{x}.{y}": ((d, d) if y == "w" else (d,)) for x in "qkvo" for y in "wb"}
    if kind == "none":
        return {}
    raise ValueError(f"unknown mixer kind {kind!r}")


def mixer_fwd(kind, h, p, heads=1, ledger=None):
    if kind == "vectrans":
        return vec_trans_module_fwd(h, p, ledger)
    if kind == "rank_k":
        return rank_k_module_fwd(h, p, ledger)
    if kind == "normlin":
        return normlin_module_fwd(h, p, ledger)
    if kind == "mhsa":
        return mhsa_fwd(h, p, heads, ledger)
    if kind == "none":
        return np.zeros_like(h), None
    raise ValueError(f"unknown mixer kind {kind!r}")


def mixer_bwd(kind, dout, cache, p):
    if kind == "none":
        return np.zeros_like(dout), {}
    bwd = {"vectrans": vec_trans_module_bwd, "rank_k": rank_k_module_bwd,
           "normlin": normlin_module_bwd, "mhsa": mhsa_bwd}[kind]
    return bwd(dout, cache, p)


def build_explicit_mixing_matrix(p) -> np.ndarray:
    """Dense N x N mixing matrix implied by vecTrans, rank-k or NormLin params."""
    if "a" in p:
        w = l1_sigmoid(p["a"])
        return np.ones((w.size, 1)) @ w[None, :]
    if "A" in p:
        raw = p["A"] @ sigmoid(p["B"]).T
        return raw / raw.sum(axis=1, keepdims=True)
    if "mix" in p:
        return normlin_matrix(p["mix"])
    raise ValueError("parameters describe no explicit mixing matrix")
