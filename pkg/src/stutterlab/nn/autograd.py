"""Reverse-mode tape over numpy arrays.

Deliberately small: only the primitives the model needs (dense algebra,
row-wise normalizations, gathers, concatenation). Every op stores a
vector-Jacobian closure; `Tensor.backward()` walks the tape once. Arrays
keep whatever dtype they came in with, so the same code runs in float32
for training and float64 for finite-difference verification.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar output through the tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # copy: vjps may hand the same buffer to several parents
                    parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS: tape depth can exceed Python's recursion limit.
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def make_op(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Build a tape node from raw forward output and a vjp closure.

    `vjp(grad_out)` must return one gradient array (or None) per parent.
    The closure is dropped when no parent needs gradients.
    """
    if any(p.requires_grad for p in parents):
        return Tensor(data, _parents=parents, _vjp=vjp)
    return Tensor(data)


def constant(x, dtype=None) -> Tensor:
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# elementwise / algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """(T, D) + (D,) row broadcast; also accepts 1-D x."""
    return make_op(
        x.data + b.data,
        (x, b),
        lambda g: (g, g.sum(axis=0) if g.ndim == 2 else g),
    )


def scale(a: Tensor, s: float) -> Tensor:
    return make_op(a.data * s, (a,), lambda g: (g * s,))


def affine(a: Tensor, mult, shift) -> Tensor:
    """mult * a + shift with constant mult/shift (scalars or arrays)."""
    m = np.asarray(mult, dtype=a.dtype)
    return make_op(a.data * m + np.asarray(shift, dtype=a.dtype), (a,), lambda g: (g * m,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=a.dtype)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b where a is 1-D or 2-D and b is 2-D."""
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        if b.requires_grad:
            gb = np.outer(a.data, g) if a.data.ndim == 1 else a.data.T @ g
        else:
            gb = None
        return ga, gb

    return make_op(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    return make_op(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = np.power(a.data, p)

    def vjp(g):
        if p == 0:
            return (np.zeros_like(a.data),)
        return (g * p * np.power(a.data, p - 1),)

    return make_op(out, (a,), vjp)


def log_clamped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); gradient is zero below the clamp."""
    clamped = np.maximum(a.data, floor)
    out = np.log(clamped)
    inside = a.data > floor
    return make_op(out, (a,), lambda g: (np.where(inside, g / clamped, 0.0),))


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return make_op(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1 - s)),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # direct form saturates correctly at the extremes; silence the overflow
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# row-wise normalizations (last axis)


def softmax_rows(a: Tensor) -> Tensor:
    s = softmax(a.data)

    def vjp(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - dot),)

    return make_op(s, (a,), vjp)


def log_softmax_rows(a: Tensor) -> Tensor:
    ls = log_softmax(a.data)
    s = np.exp(ls)

    def vjp(g):
        return (g - s * np.sum(g, axis=-1, keepdims=True),)

    return make_op(ls, (a,), vjp)


def softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    d = x.data.shape[-1]

    def vjp(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - np.mean(dxhat, axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
            )
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return make_op(out, (x, gain, bias), vjp)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize a 1-D vector."""
    n = float(np.sqrt(np.sum(a.data * a.data))) + eps
    y = a.data / n

    def vjp(g):
        return ((g - y * np.sum(y * g)) / n,)

    return make_op(y, (a,), vjp)


# ---------------------------------------------------------------------------
# structure: gathers, slices, concatenation, reductions


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_op(out, (table,), vjp)


def gather(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = a.data[rows, cols]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return make_op(out, (a,), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return make_op(out, (a,), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return make_op(out, (a,), vjp)


def concat_rows(parts: list[Tensor]) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def vjp(g):
        grads, ofs = [], 0
        for n in sizes:
            grads.append(g[ofs : ofs + n])
            ofs += n
        return tuple(grads)

    return make_op(out, tuple(parts), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def vjp(g):
        grads, ofs = [], 0
        for n in sizes:
            grads.append(g[:, ofs : ofs + n])
            ofs += n
        return tuple(grads)

    return make_op(out, tuple(parts), vjp)


def sum_all(a: Tensor) -> Tensor:
    return make_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.ones_like(a.data) * g,))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a (T, D) matrix -> (D,). Gradient gives 1/T per row."""
    if x.data.ndim != 2 or x.data.shape[0] == 0:
        raise ValueError("mean_rows expects a non-empty 2-D matrix")
    t = x.data.shape[0]
    out = x.data.mean(axis=0)

    def vjp(g):
        return (np.broadcast_to(g / t, x.shape).copy(),)

    return make_op(out, (x,), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng stream")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return mul_const(x, keep)


def add_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Add a constant additive mask (e.g. -inf above the diagonal)."""
    return make_op(a.data + mask, (a,), lambda g: (g,))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    """Fused scaled-dot-product attention over projected (T, D) q/k/v.

    One tape node instead of a dozen per head; the hand-derived backward is
    covered by the finite-difference suite like every other primitive.
    """
    t, d = q.shape
    dh = d // heads
    scale_f = 1.0 / np.sqrt(dh)
    out = np.empty_like(q.data)
    probs: list[np.ndarray] = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = (q.data[:, lo:hi] @ k.data[:, lo:hi].T) * scale_f
        if mask is not None:
            scores = scores + mask
        p = softmax(scores)
        probs.append(p)
        out[:, lo:hi] = p @ v.data[:, lo:hi]

    def vjp(g):
        dq = np.zeros_like(q.data) if q.requires_grad else None
        dk = np.zeros_like(k.data) if k.requires_grad else None
        dv = np.zeros_like(v.data) if v.requires_grad else None
        for h in range(heads):
            lo, hi = h * dh, (h + 1) * dh
            p = probs[h]
            g_h = g[:, lo:hi]
            if dv is not None:
                dv[:, lo:hi] = p.T @ g_h
            if dq is not None or dk is not None:
                dp = g_h @ v.data[:, lo:hi].T
                ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
                if dq is not None:
                    dq[:, lo:hi] = (ds @ k.data[:, lo:hi]) * scale_f
                if dk is not None:
                    dk[:, lo:hi] = (ds.T @ q.data[:, lo:hi]) * scale_f
        return dq, dk, dv

    return make_op(out, (q, k, v), vjp)
