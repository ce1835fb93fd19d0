"""Layer-level building blocks on top of the autograd tape."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .params import ParamStore


class NetContext:
    """Carries one pass's leaf tensors plus mode flags.

    `training` switches dropout; `rng` is the run stream that draws the
    masks (must be None only in eval mode).
    """

    def __init__(self, store: ParamStore, tensors: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None, training: bool = False):
        self.store = store
        self.tensors = tensors if tensors is not None else store.tensors()
        self.rng = rng
        self.training = training

    def t(self, name: str) -> Tensor:
        return self.tensors[name]

    def dense(self, name: str, x: Tensor, lora_active: bool = True) -> Tensor:
        """x @ W + b with optional low-rank delta (alpha/r) * dropout(x) A^T B^T."""
        w = self.tensors[f"{name}.w"]
        y = ag.add_bias(ag.matmul(x, w), self.tensors[f"{name}.b"])
        spec = self.store[f"{name}.w"].lora
        if spec is not None and lora_active and spec.rank > 0:
            a = self.tensors[f"{name}.w.lora_a"]
            b = self.tensors[f"{name}.w.lora_b"]
            xd = ag.dropout(x, spec.dropout, self.rng, self.training)
            delta = ag.matmul(ag.matmul(xd, ag.transpose(a)), ag.transpose(b))
            y = ag.add(y, ag.scale(delta, spec.scaling))
        return y

    def layer_norm(self, name: str, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.tensors[f"{name}.g"], self.tensors[f"{name}.b"])

    def dropout(self, x: Tensor, rate: float) -> Tensor:
        return ag.dropout(x, rate, self.rng, self.training)


def init_dense(store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator) -> None:
    """Glorot-uniform weight, zero bias."""
    limit = np.sqrt(6.0 / (d_in + d_out))
    store.add(f"{name}.w", rng.uniform(-limit, limit, size=(d_in, d_out)))
    store.add(f"{name}.b", np.zeros(d_out))


def init_layer_norm(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}.g", np.ones(dim))
    store.add(f"{name}.b", np.zeros(dim))


def init_transformer_block(store: ParamStore, prefix: str, dim: int, ffn_dim: int,
                           rng: np.random.Generator) -> None:
    init_layer_norm(store, f"{prefix}.ln1", dim)
    for proj in ("q", "k", "v", "o"):
        init_dense(store, f"{prefix}.attn.{proj}", dim, dim, rng)
    init_layer_norm(store, f"{prefix}.ln2", dim)
    init_dense(store, f"{prefix}.ffn.fc1", dim, ffn_dim, rng)
    init_dense(store, f"{prefix}.ffn.fc2", ffn_dim, dim, rng)
    # damp the residual writers so fresh blocks start near the identity
    store[f"{prefix}.attn.o.w"].data *= 0.25
    store[f"{prefix}.ffn.fc2.w"].data *= 0.25


def self_attention(ctx: NetContext, prefix: str, x: Tensor, heads: int,
                   causal: bool) -> Tensor:
    """Scaled-dot-product multi-head self-attention over (T, D) rows."""
    t = x.shape[0]
    q = ctx.dense(f"{prefix}.q", x)
    k = ctx.dense(f"{prefix}.k", x)
    v = ctx.dense(f"{prefix}.v", x)
    mask = causal_mask(t, x.dtype) if causal and t > 1 else None
    merged = ag.multi_head_attention(q, k, v, heads, mask)
    return ctx.dense(f"{prefix}.o", merged)


def transformer_block(ctx: NetContext, prefix: str, x: Tensor, heads: int,
                      causal: bool, dropout_rate: float = 0.0) -> Tensor:
    """Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x))."""
    attn = self_attention(ctx, f"{prefix}.attn", ctx.layer_norm(f"{prefix}.ln1", x), heads, causal)
    x = ag.add(x, ctx.dropout(attn, dropout_rate))
    h = ctx.dense(f"{prefix}.ffn.fc1", ctx.layer_norm(f"{prefix}.ln2", x))
    h = ctx.dense(f"{prefix}.ffn.fc2", ag.silu(h))
    return ag.add(x, ctx.dropout(h, dropout_rate))


_POS_CACHE: dict[tuple[int, int, str], np.ndarray] = {}
_CAUSAL_CACHE: dict[tuple[int, str], np.ndarray] = {}


def sinusoidal_positions(t: int, dim: int, dtype) -> np.ndarray:
    """Fixed sin/cos position table (t, dim); cached per shape/dtype."""
    key = (t, dim, np.dtype(dtype).str)
    cached = _POS_CACHE.get(key)
    if cached is None:
        pos = np.arange(t, dtype=np.float64)[:, None]
        idx = np.arange(dim, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, (2.0 * (idx // 2)) / dim)
        cached = _POS_CACHE[key] = np.where(idx % 2 == 0, np.sin(angle),
                                            np.cos(angle)).astype(dtype)
    return cached


def causal_mask(t: int, dtype) -> np.ndarray:
    """Additive -inf strictly-upper-triangular mask; cached per shape."""
    key = (t, np.dtype(dtype).str)
    cached = _CAUSAL_CACHE.get(key)
    if cached is None:
        cached = np.zeros((t, t), dtype=dtype)
        if t > 1:
            cached[np.triu_indices(t, k=1)] = -np.inf
        _CAUSAL_CACHE[key] = cached
    return cached


def mean_pool(h: Tensor) -> Tensor:
    """Average rows of (T, D) into a context vector (D,)."""
    return ag.mean_rows(h)
