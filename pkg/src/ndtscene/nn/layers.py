"""Parameterized layers built from autodiff ops.

Every layer reads its weights from a :class:`ParamStore` by name prefix:
``{name}.weight`` / ``{name}.bias`` for linear and layernorm, and the
sub-prefixes documented on each function for composite layers.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ONES, XAVIER, ZEROS, ParamStore

LN_EPS = 1e-5
# attention score matrices above this many entries are evaluated in query
# chunks when no graph is being recorded
ATTENTION_CHUNK_ENTRIES = 1 << 23


def linear(x, params: ParamStore, name: str) -> Tensor:
    w = params.tensor(f"{name}.weight")
    x = ad.as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"{name}: input width {x.shape[-1]} does not match weight {w.shape}")
    y = ad.matmul(x, w)
    if f"{name}.bias" in params:
        y = y + params.tensor(f"{name}.bias")
    return y


def linear_layout(name: str, fan_in: int, fan_out: int, bias: bool = True) -> dict:
    layout = {f"{name}.weight": ((fan_in, fan_out), XAVIER)}
    if bias:
        layout[f"{name}.bias"] = ((fan_out,), ZEROS)
    return layout


def softmax_rows(x) -> Tensor:
    return ad.softmax(x, axis=-1)


def layer_norm(x, params: ParamStore, name: str) -> Tensor:
    x = ad.as_tensor(x)
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.mean(ad.square(centered), axis=-1, keepdims=True)
    normed = centered / ad.sqrt(var + LN_EPS)
    return normed * params.tensor(f"{name}.weight") + params.tensor(f"{name}.bias")


def layer_norm_layout(name: str, dim: int) -> dict:
    return {f"{name}.weight": ((dim,), ONES), f"{name}.bias": ((dim,), ZEROS)}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return ad.transpose(ad.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    dh = q.shape[1] // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = ad.matmul(qh, ad.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    return _merge_heads(ad.matmul(softmax_rows(scores), vh))


def multi_head_attention(q, k, v, params: ParamStore, name: str, heads: int) -> Tensor:
    """Scaled dot-product attention over already-projected ``q``, ``k``, ``v``.

    Heads are split along the feature axis, attended independently with scale
    ``1/sqrt(d/heads)``, concatenated and passed through ``{name}.out``.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    d = q.shape[1]
    if d % heads:
        raise ValueError(f"{name}: width {d} not divisible by {heads} heads")
    if k.shape[1] != d or v.shape[1] != d or k.shape[0] != v.shape[0]:
        raise ValueError(f"{name}: attention shapes q{q.shape} k{k.shape} v{v.shape}")
    nq, nk = q.shape[0], k.shape[0]
    recording = ad.is_grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)
    if recording or heads * nq * nk <= ATTENTION_CHUNK_ENTRIES:
        mixed = _attend(q, k, v, heads)
    else:
        step = max(1, ATTENTION_CHUNK_ENTRIES // (heads * nk))
        parts = [_attend(Tensor(q.data[i:i + step]), k, v, heads).data
                 for i in range(0, nq, step)]
        mixed = Tensor(np.concatenate(parts, axis=0))
    return linear(mixed, params, f"{name}.out")


def attention_layout(name: str, dim: int) -> dict:
    return linear_layout(f"{name}.out", dim, dim)


def ffn(x, params: ParamStore, name: str, residual: bool = True, prenorm: bool = True) -> Tensor:
    """Position-wise feed-forward block: ``x + fc2(gelu(fc1(norm(x))))``."""
    x = ad.as_tensor(x)
    h = layer_norm(x, params, f"{name}.norm") if prenorm else x
    h = linear(ad.gelu(linear(h, params, f"{name}.fc1")), params, f"{name}.fc2")
    return x + h if residual else h


def ffn_layout(name: str, dim: int, hidden: int) -> dict:
    return {**layer_norm_layout(f"{name}.norm", dim),
            **linear_layout(f"{name}.fc1", dim, hidden),
            **linear_layout(f"{name}.fc2", hidden, dim)}


def mlp2(x, params: ParamStore, name: str) -> Tensor:
    """Two-layer MLP head (``fc1`` -> GELU -> ``fc2``)."""
    return linear(ad.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def mlp2_layout(name: str, fan_in: int, hidden: int, fan_out: int) -> dict:
    return {**linear_layout(f"{name}.fc1", fan_in, hidden),
            **linear_layout(f"{name}.fc2", hidden, fan_out)}
