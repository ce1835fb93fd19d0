"""Shared acoustic encoder: frame features in, contextual features out.

Stand-in for a pretrained speech encoder: input projection, sinusoidal
positions, then pre-norm self-attention blocks. No downsampling anywhere,
so the output keeps one row per input frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import (NetContext, init_dense, init_layer_norm, init_transformer_block,
                        sinusoidal_positions, transformer_block)
from .nn.params import ParamStore


@dataclass
class EncoderConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 2
    ffn_dim: int = 64
    dropout: float = 0.1

    def validate(self) -> None:
        if self.dim % self.heads != 0:
            raise ValidationError("encoder dim must be divisible by heads")
        if min(self.layers, self.dim, self.heads, self.ffn_dim) <= 0:
            raise ValidationError("encoder config counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("encoder dropout must be in [0, 1)")


def init_encoder_params(store: ParamStore, cfg: EncoderConfig, input_dim: int,
                        rng: np.random.Generator, prefix: str = "encoder") -> None:
    cfg.validate()
    init_dense(store, f"{prefix}.proj", input_dim, cfg.dim, rng)
    for i in range(cfg.layers):
        init_transformer_block(store, f"{prefix}.block{i}", cfg.dim, cfg.ffn_dim, rng)
    init_layer_norm(store, f"{prefix}.ln_f", cfg.dim)


def encode(ctx: NetContext, cfg: EncoderConfig, frames: Tensor,
           prefix: str = "encoder") -> Tensor:
    """(T, D_in) frames -> (T, D) contextual features; row count preserved."""
    t = frames.shape[0]
    if t < 1:
        raise ValidationError("encoder needs at least one frame")
    expected_in = ctx.store[f"{prefix}.proj.w"].data.shape[0]
    if frames.shape[1] != expected_in:
        raise ValidationError(
            f"feature dim mismatch: got {frames.shape[1]}, expected {expected_in}")
    h = ctx.dense(f"{prefix}.proj", frames)
    h = ag.add_mask(h, sinusoidal_positions(t, cfg.dim, h.dtype))
    for i in range(cfg.layers):
        h = transformer_block(ctx, f"{prefix}.block{i}", h, cfg.heads,
                              causal=False, dropout_rate=cfg.dropout)
    return ctx.layer_norm(f"{prefix}.ln_f", h)
