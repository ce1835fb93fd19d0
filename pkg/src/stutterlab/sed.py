"""Stuttering-event-detection branch.

Pools encoder output into a context vector, classifies it with a two-layer
residual head, and trains with focal loss plus a multi-label supervised
contrastive term over projected, L2-normalized features. The classifier's
pre-logit representation doubles as the stutter embedding fed to the LM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import N_EVENT_TYPES
from .errors import ValidationError
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import NetContext, init_dense, init_layer_norm
from .nn.params import ParamStore


@dataclass
class SedConfig:
    hidden_dim: int = 64   # classifier width, also the stutter-embedding source dim
    proj_dim: int = 16     # contrastive feature dim
    dropout: float = 0.1


@dataclass
class FocalParams:
    alpha: tuple[float, ...] = (0.3, 0.3, 0.2, 0.1, 0.1)
    gamma: float = 2.0

    def validate(self) -> None:
        if len(self.alpha) != N_EVENT_TYPES:
            raise ValidationError(f"alpha must have {N_EVENT_TYPES} entries")
        if any(a < 0 for a in self.alpha):
            raise ValidationError("alpha entries must be non-negative")


def init_sed_params(store: ParamStore, cfg: SedConfig, encoder_dim: int,
                    rng: np.random.Generator, prefix: str = "sed") -> None:
    init_dense(store, f"{prefix}.fc1", encoder_dim, cfg.hidden_dim, rng)
    init_layer_norm(store, f"{prefix}.ln1", cfg.hidden_dim)
    init_dense(store, f"{prefix}.fc2", cfg.hidden_dim, cfg.hidden_dim, rng)
    init_layer_norm(store, f"{prefix}.ln2", cfg.hidden_dim)
    init_dense(store, f"{prefix}.out", cfg.hidden_dim, N_EVENT_TYPES, rng)
    init_dense(store, f"{prefix}.proj1", encoder_dim, encoder_dim, rng)
    init_dense(store, f"{prefix}.proj2", encoder_dim, cfg.proj_dim, rng)


def sed_classify(ctx: NetContext, cfg: SedConfig, v: Tensor,
                 prefix: str = "sed") -> tuple[Tensor, Tensor]:
    """Residual two-layer head over the pooled context vector.

    Returns (event logits, h2); h2 is the stutter-embedding source.
    """
    h1 = ctx.dropout(ag.silu(ctx.layer_norm(f"{prefix}.ln1", ctx.dense(f"{prefix}.fc1", v))),
                     cfg.dropout)
    h2 = ctx.layer_norm(f"{prefix}.ln2", ag.add(h1, ctx.dense(f"{prefix}.fc2", h1)))
    logits = ctx.dense(f"{prefix}.out", h2)
    return logits, h2


def sed_project(ctx: NetContext, v: Tensor, prefix: str = "sed") -> Tensor:
    """Nonlinear projection then L2 normalization for contrastive learning."""
    z = ctx.dense(f"{prefix}.proj2", ag.relu(ctx.dense(f"{prefix}.proj1", v)))
    return ag.l2_normalize(z)


def focal_loss(logits: Tensor, labels: np.ndarray, fp: FocalParams) -> Tensor:
    """Per-class sigmoid focal loss, averaged over the batch.

    p_t is the probability assigned to the correct side of each class;
    the (1-p_t)^gamma factor downweights easy classes and alpha rebalances.
    """
    fp.validate()
    labels = np.asarray(labels, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise ValidationError(f"logits/labels shape mismatch {logits.shape} vs {labels.shape}")
    n_samples = 1 if labels.ndim == 1 else labels.shape[0]
    # p_t = sigmoid(x) for positive labels, sigmoid(-x) for negative ones
    p_t = ag.sigmoid(ag.mul_const(logits, 2.0 * labels - 1.0))
    modulation = ag.pow_scalar(ag.affine(p_t, -1.0, 1.0), fp.gamma)
    weighted = ag.mul_const(ag.mul(modulation, ag.log_clamped(p_t)),
                            np.asarray(fp.alpha, dtype=logits.dtype))
    return ag.scale(ag.sum_all(weighted), -1.0 / n_samples)


def bce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Plain per-class binary cross-entropy (the no-focal baseline)."""
    return focal_loss(logits, labels, FocalParams(alpha=(1.0,) * N_EVENT_TYPES, gamma=0.0))


def supcon_loss(z: Tensor, labels: np.ndarray, tau: float,
                include_self: bool = True, check_norm: bool = True) -> Tensor:
    """Multi-label supervised contrastive loss over unit features.

    Positive pairs are ordered (i, j), i != j, sharing at least one event
    label. Each term normalizes exp(z_i.z_j/tau) over similarities to the
    whole batch; `include_self` keeps the k = i term in the denominator
    (the default formulation here). No positive pairs -> loss 0.
    """
    if tau <= 0:
        raise ValidationError("tau must be positive")
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < 2:
        raise ValidationError("supcon_loss needs at least 2 samples")
    if check_norm:
        norms = np.linalg.norm(z.data, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("projected features must be L2-normalized")
    shared = (labels @ labels.T) >= 1
    pos = shared & ~np.eye(n, dtype=bool)
    rows, cols = np.nonzero(pos)
    if rows.size == 0:
        return ag.constant(np.asarray(0.0, dtype=z.dtype))
    sims = ag.scale(ag.matmul(z, ag.transpose(z)), 1.0 / tau)
    if not include_self:
        sims = ag.add_mask(sims, np.where(np.eye(n, dtype=bool), -np.inf, 0.0).astype(z.dtype))
    log_prob = ag.log_softmax_rows(sims)
    picked = ag.gather(log_prob, rows, cols)
    return ag.scale(ag.sum_all(picked), -1.0 / rows.size)


def sed_loss(logits: Tensor, labels: np.ndarray, z: Tensor, fp: FocalParams,
             delta: float, tau: float, include_self: bool = True,
             check_norm: bool = True) -> Tensor:
    """Hybrid SED objective: focal + delta * supervised-contrastive."""
    focal = focal_loss(logits, labels, fp)
    if delta == 0.0:
        return focal
    batch_labels = labels if np.asarray(labels).ndim == 2 else np.asarray(labels)[None, :]
    return ag.add(focal, ag.scale(supcon_loss(z, batch_labels, tau, include_self, check_norm), delta))


def predict_events(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold per-class sigmoid scores into a multi-hot prediction."""
    from .nn.autograd import _sigmoid

    return (_sigmoid(np.asarray(logits, dtype=np.float64)) >= threshold).astype(np.int64)
