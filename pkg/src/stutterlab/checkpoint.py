"""Binary checkpoint: length-prefixed JSON header, float32 body, CRC-32.

Header lists tensor names/shapes/flags plus optimizer, RNG, and config
snapshots; the body is every tensor (parameters, then Adam moments) as
little-endian float32 in header order. The trailing CRC covers everything
before it, so truncation or corruption is rejected before any state loads.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib

import numpy as np

from .encoder import EncoderConfig
from .errors import CheckpointError
from .fusion import LmConfig
from .model import ModelConfig, System
from .nn.optim import OptimState
from .nn.params import LoraSpec
from .sed import SedConfig
from .train import TrainConfig, TrainState

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def _model_cfg_dict(cfg: ModelConfig) -> dict:
    return {
        "feature_dim": cfg.feature_dim,
        "alphabet": cfg.alphabet,
        "encoder": dataclasses.asdict(cfg.encoder),
        "sed": dataclasses.asdict(cfg.sed),
        "lm": dataclasses.asdict(cfg.lm),
    }


def _model_cfg_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        feature_dim=d["feature_dim"],
        alphabet=d["alphabet"],
        encoder=EncoderConfig(**d["encoder"]),
        sed=SedConfig(**d["sed"]),
        lm=LmConfig(**d["lm"]),
    )


def save_checkpoint(state: TrainState, path) -> None:
    system = state.system
    store = system.store
    tensor_meta = []
    for name in store.names():
        p = store[name]
        tensor_meta.append({
            "name": name,
            "shape": list(p.data.shape),
            "trainable": p.trainable,
            "lora": None if p.lora is None else dataclasses.asdict(p.lora),
        })
    optim_names = sorted(state.optim.m)
    train_cfg = dataclasses.asdict(state.cfg)
    train_cfg["alpha"] = list(train_cfg["alpha"])
    header = {
        "version": FORMAT_VERSION,
        "step": state.step,
        "phase": state.phase,
        "lora_attached": system.lora_attached,
        "model": _model_cfg_dict(system.cfg),
        "train": train_cfg,
        "optim": {
            "lr_max": state.optim.lr_max,
            "weight_decay": state.optim.weight_decay,
            "beta1": state.optim.beta1,
            "beta2": state.optim.beta2,
            "eps": state.optim.eps,
            "step": state.optim.step,
            "names": optim_names,
        },
        "rng_state": state.rng.bit_generator.state,
        "tensors": tensor_meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    for name in store.names():
        body += np.ascontiguousarray(store[name].data, dtype="<f4").tobytes()
    for name in optim_names:
        body += np.ascontiguousarray(state.optim.m[name], dtype="<f4").tobytes()
    for name in optim_names:
        body += np.ascontiguousarray(state.optim.v[name], dtype="<f4").tobytes()
    payload = _LEN.pack(len(header_bytes)) + header_bytes + bytes(body)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload + struct.pack("<I", crc))


def load_checkpoint(path, seed_hint: int = 0) -> TrainState:
    """Rebuild a TrainState bit-exactly; rejects bad CRC or version."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _LEN.size + 4:
        raise CheckpointError("checkpoint truncated: too short for header")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError("checkpoint integrity check failed (CRC mismatch)")
    header_len = _LEN.unpack(payload[: _LEN.size])[0]
    try:
        header = json.loads(payload[_LEN.size : _LEN.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header unreadable: {exc}") from exc
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version: found {version}, expected {FORMAT_VERSION}")

    model_cfg = _model_cfg_from_dict(header["model"])
    train_dict = dict(header["train"])
    train_dict["alpha"] = tuple(train_dict["alpha"])
    train_cfg = TrainConfig(**train_dict)
    system = System(model_cfg, seed=train_cfg.seed)

    body = payload[_LEN.size + header_len :]
    offset = 0

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(body):
            raise CheckpointError("checkpoint truncated: body shorter than header claims")
        arr = np.frombuffer(body[offset : offset + nbytes], dtype="<f4").reshape(shape)
        offset += nbytes
        return arr.copy()

    store = system.store
    existing = set(store.names())
    for meta in header["tensors"]:
        name = meta["name"]
        if name not in existing:
            # adapters are created at the phase boundary; recreate before load
            if name.endswith(".lora_a") or name.endswith(".lora_b"):
                base = name.rsplit(".lora_", 1)[0]
                if store[base].lora is None:
                    lora = header_lora_for(header, base)
                    store[base].lora = lora
                store.add(name, np.zeros(meta["shape"]))
            else:
                raise CheckpointError(f"checkpoint tensor {name!r} not in model")
        p = store[name]
        p.data = take(meta["shape"]).astype(store.dtype)
        p.trainable = bool(meta["trainable"])
        if meta["lora"] is not None:
            p.lora = LoraSpec(**meta["lora"])
    system.lora_attached = bool(header.get("lora_attached", False))

    optim_meta = header["optim"]
    optim = OptimState(lr_max=optim_meta["lr_max"], weight_decay=optim_meta["weight_decay"],
                       beta1=optim_meta["beta1"], beta2=optim_meta["beta2"],
                       eps=optim_meta["eps"], step=optim_meta["step"])
    shapes = {m["name"]: m["shape"] for m in header["tensors"]}
    for name in optim_meta["names"]:
        optim.m[name] = take(shapes[name])
    for name in optim_meta["names"]:
        optim.v[name] = take(shapes[name])
    if offset != len(body):
        raise CheckpointError("checkpoint body longer than header claims")

    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng_state"]
    return TrainState(system=system, cfg=train_cfg, optim=optim, rng=rng,
                      step=header["step"], phase=header["phase"])


def header_lora_for(header: dict, base_name: str) -> LoraSpec:
    for meta in header["tensors"]:
        if meta["name"] == base_name and meta["lora"] is not None:
            return LoraSpec(**meta["lora"])
    raise CheckpointError(f"adapter tensors present but no LoRA metadata for {base_name!r}")
