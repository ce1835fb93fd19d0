"""AdamW with decoupled weight decay (paper setting: decay 0)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .params import ParamStore


@dataclass
class OptimState:
    """Moment accumulators exist only for the trainable tensors."""

    lr_max: float = 5e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, lr_max: float = 5e-4, weight_decay: float = 0.0) -> "OptimState":
        st = cls(lr_max=lr_max, weight_decay=weight_decay)
        for name in store.trainable_names():
            st.m[name] = np.zeros_like(store[name].data)
            st.v[name] = np.zeros_like(store[name].data)
        return st


def optimizer_step(store: ParamStore, grads: dict[str, np.ndarray], state: OptimState,
                   lr: float | None = None) -> None:
    """One Adam update with bias correction; frozen tensors are untouched.

    `grads` must cover exactly the trainable set.
    """
    trainable = set(store.trainable_names())
    if set(grads) != trainable:
        extra = sorted(set(grads) - trainable)
        missing = sorted(trainable - set(grads))
        raise ValidationError(
            f"grads must cover exactly the trainable set (extra={extra}, missing={missing})")
    if lr is None:
        lr = state.lr_max

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in grads:
        p = store[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValidationError(f"grad shape mismatch for {name!r}: {g.shape} vs {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.weight_decay * p.data
        p.data = p.data - np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype, copy=False)
