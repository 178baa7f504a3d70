"""Dense transformer layer primitives with explicit backward passes.

All functions operate on plain numpy arrays with shapes (batch, tokens,
features) and return gradient dictionaries keyed by parameter name, so the
whole model stays a flat dict of arrays. Forward passes are deterministic and
dtype-preserving (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def linear_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (dx, dw, db); sums the parameter gradients over all leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


def layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, dtype=x.dtype))
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layernorm_bwd(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    lead = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=lead)
    db = dy.sum(axis=lead)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def gelu_fwd(x: np.ndarray):
    c = erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype))
    return 0.5 * x * (1.0 + c), (x, c)


def gelu_bwd(dy: np.ndarray, cache):
    x, c = cache
    pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT2PI, dtype=x.dtype)
    return dy * (0.5 * (1.0 + c) + x * pdf)


def softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(dy: np.ndarray, a: np.ndarray) -> np.ndarray:
    return a * (dy - (dy * a).sum(axis=-1, keepdims=True))


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention_fwd(x: np.ndarray, p: dict, prefix: str, n_heads: int):
    """Multi-head self-attention over (batch, tokens, dim)."""
    q = _split_heads(linear_fwd(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_heads)
    k = _split_heads(linear_fwd(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), n_heads)
    v = _split_heads(linear_fwd(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), n_heads)
    scale = np.asarray(1.0 / np.sqrt(q.shape[-1]), dtype=x.dtype)
    attn = softmax_last((q @ k.transpose(0, 1, 3, 2)) * scale)
    ctx = _merge_heads(attn @ v)
    out = linear_fwd(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    return out, (x, q, k, v, attn, ctx, scale)


def attention_bwd(dy: np.ndarray, cache, p: dict, prefix: str, n_heads: int):
    x, q, k, v, attn, ctx, scale = cache
    grads = {}
    dctx, grads[f"{prefix}.wo"], grads[f"{prefix}.bo"] = linear_bwd(
        dy, ctx, p[f"{prefix}.wo"])
    dctx = _split_heads(dctx, n_heads)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    ds = softmax_bwd(dattn, attn) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dxi, dw, db = linear_bwd(_merge_heads(dproj), x, p[f"{prefix}.w{name}"])
        grads[f"{prefix}.w{name}"] = dw
        grads[f"{prefix}.b{name}"] = db
        dx += dxi
    return dx, grads


def block_fwd(x: np.ndarray, p: dict, prefix: str, n_heads: int):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    h1, c_ln1 = layernorm_fwd(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    a_out, c_attn = attention_fwd(h1, p, f"{prefix}.attn", n_heads)
    x2 = x + a_out
    h2, c_ln2 = layernorm_fwd(x2, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m1 = linear_fwd(h2, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])
    act, c_gelu = gelu_fwd(m1)
    m2 = linear_fwd(act, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    y = x2 + m2
    return y, (c_ln1, c_attn, h1, c_ln2, h2, c_gelu, act, x2)


def block_bwd(dy: np.ndarray, cache, p: dict, prefix: str, n_heads: int):
    c_ln1, c_attn, h1, c_ln2, h2, c_gelu, act, x2 = cache
    grads = {}
    dact, grads[f"{prefix}.mlp.w2"], grads[f"{prefix}.mlp.b2"] = linear_bwd(
        dy, act, p[f"{prefix}.mlp.w2"])
    dm1 = gelu_bwd(dact, c_gelu)
    dh2, grads[f"{prefix}.mlp.w1"], grads[f"{prefix}.mlp.b1"] = linear_bwd(
        dm1, h2, p[f"{prefix}.mlp.w1"])
    dx2, grads[f"{prefix}.ln2.g"], grads[f"{prefix}.ln2.b"] = layernorm_bwd(
        dh2, c_ln2, p[f"{prefix}.ln2.g"])
    dx2 = dx2 + dy
    da_out = dx2
    dh1, attn_grads = attention_bwd(da_out, c_attn, p, f"{prefix}.attn", n_heads)
    grads.update(attn_grads)
    dx, grads[f"{prefix}.ln1.g"], grads[f"{prefix}.ln1.b"] = layernorm_bwd(
        dh1, c_ln1, p[f"{prefix}.ln1.g"])
    dx = dx + dx2
    return dx, grads


def stack_fwd(x: np.ndarray, p: dict, side: str, n_blocks: int, n_heads: int):
    """n_blocks pre-norm blocks followed by a final layer norm."""
    caches = []
    for i in range(n_blocks):
        x, cache = block_fwd(x, p, f"{side}.{i}", n_heads)
        caches.append(cache)
    y, c_norm = layernorm_fwd(x, p[f"{side}.norm.g"], p[f"{side}.norm.b"])
    return y, (caches, c_norm)


def stack_bwd(dy: np.ndarray, cache, p: dict, side: str, n_blocks: int, n_heads: int):
    caches, c_norm = cache
    grads = {}
    dx, grads[f"{side}.norm.g"], grads[f"{side}.norm.b"] = layernorm_bwd(
        dy, c_norm, p[f"{side}.norm.g"])
    for i in reversed(range(n_blocks)):
        dx, block_grads = block_bwd(dx, caches[i], p, f"{side}.{i}", n_heads)
        grads.update(block_grads)
    return dx, grads


def sincos_table_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal table: half sine / half cosine channels."""
    assert dim % 2 == 0
    omega = 1.0 / (10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2)))
    args = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def sincos_table_2d(grid: int, dim: int) -> np.ndarray:
    """2-D sinusoidal positions for a grid x grid patch layout (row-major)."""
    assert dim % 4 == 0
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    row_emb = sincos_table_1d(rows.reshape(-1), dim // 2)
    col_emb = sincos_table_1d(cols.reshape(-1), dim // 2)
    return np.concatenate([row_emb, col_emb], axis=1)
