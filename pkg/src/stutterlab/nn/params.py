"""Named parameter storage with freeze flags and optional LoRA adapters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from .autograd import Tensor


@dataclass
class LoraSpec:
    rank: int
    alpha: float
    dropout: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def lora_param_count(d_in: int, d_out: int, rank: int) -> int:
    """Adapter parameter count r*(d_in + d_out); 0 disables the adapter."""
    if d_in <= 0 or d_out <= 0 or rank < 0:
        raise ValidationError("lora_param_count arguments must be positive (rank may be 0)")
    return rank * (d_in + d_out)


@dataclass
class Param:
    data: np.ndarray
    trainable: bool = True
    lora: LoraSpec | None = None


class ParamStore:
    """Ordered name -> Param map.

    LoRA adapters for a base tensor `w` live under `w.lora_a` (rank x d_in)
    and `w.lora_b` (d_out x rank); the base keeps the adapter metadata.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> None:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        self._params[name] = Param(np.asarray(data, dtype=self.dtype), trainable)

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].trainable = flag

    def freeze_prefix(self, prefix: str) -> None:
        for name, p in self._params.items():
            if name.startswith(prefix):
                p.trainable = False

    def set_trainable_prefix(self, prefix: str, flag: bool) -> None:
        for name, p in self._params.items():
            if name.startswith(prefix):
                p.trainable = flag

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def attach_lora(self, name: str, rank: int, alpha: float, dropout: float,
                    rng: np.random.Generator, init_scale: float = 0.01) -> None:
        """Attach a zero-initialized adapter: A ~ N(0, init_scale), B = 0.

        With B = 0 the adapted layer equals its base exactly.
        """
        base = self._params[name]
        if base.data.ndim != 2:
            raise ValidationError(f"LoRA target {name!r} must be a matrix")
        if base.lora is not None:
            raise ValidationError(f"{name!r} already has an adapter")
        d_in, d_out = base.data.shape
        base.lora = LoraSpec(rank, alpha, dropout)
        self.add(f"{name}.lora_a", rng.normal(0.0, init_scale, size=(rank, d_in)))
        self.add(f"{name}.lora_b", np.zeros((d_out, rank)))

    def tensors(self) -> dict[str, Tensor]:
        """Fresh leaf Tensors for one forward/backward pass.

        requires_grad follows the trainable flag, so backward skips frozen
        branches while gradients still flow *through* frozen weights.
        """
        return {n: Tensor(p.data, requires_grad=p.trainable) for n, p in self._params.items()}

    def tensors_all_grad(self) -> dict[str, Tensor]:
        return {n: Tensor(p.data, requires_grad=True) for n, p in self._params.items()}

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ValidationError(f"shape mismatch loading {name!r}")
            p.data = np.asarray(arr, dtype=self.dtype)

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another precision (for 64-bit grad checks)."""
        out = ParamStore(dtype)
        for name, p in self._params.items():
            out._params[name] = Param(p.data.astype(dtype), p.trainable,
                                      None if p.lora is None else LoraSpec(p.lora.rank, p.lora.alpha, p.lora.dropout))
        return out
