"""Single JSON run configuration: schema-validated, unknown keys rejected.

Defaults mirror the reference hyperparameters (loss weights, focal alphas,
learning rate, LoRA shape, decoding constraints). Seeds must be explicit in
config files: no state ever comes from entropy.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .corpus import CorpusSpec
from .encoder import EncoderConfig
from .errors import ValidationError
from .evaluate import EvalOptions
from .fusion import LmConfig
from .model import ModelConfig
from .sed import SedConfig
from .train import TrainConfig

_TUPLE_FIELDS = {"frames_per_token", "severity_mix", "scenario_mix", "event_type_mix", "alpha"}


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sed: SedConfig = field(default_factory=SedConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def validate(self) -> None:
        self.corpus.validate()
        self.encoder.validate()
        self.lm.validate()
        self.train.validate()
        if self.eval.beam_width <= 0:
            raise ValidationError("eval.beam_width must be positive")
        if self.eval.max_len <= 0:
            raise ValidationError("eval.max_len must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.corpus.feature_dim,
            alphabet=self.corpus.alphabet,
            encoder=self.encoder,
            sed=self.sed,
            lm=self.lm,
        )

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        for section in doc.values():
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
        return doc


def _build_section(cls, section_name: str, doc: dict):
    known = {f.name for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ValidationError(f"unknown key {section_name}.{key}")
    kwargs = {}
    for key, value in doc.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def run_config_from_dict(doc: dict, require_seed: bool = True) -> RunConfig:
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    sections = {f.name: f for f in fields(RunConfig)}
    for key in doc:
        if key not in sections:
            raise ValidationError(f"unknown key {key}")
    types = {"corpus": CorpusSpec, "encoder": EncoderConfig, "sed": SedConfig,
             "lm": LmConfig, "train": TrainConfig, "eval": EvalOptions}
    kwargs = {}
    for name, cls in types.items():
        kwargs[name] = _build_section(cls, name, doc.get(name, {}))
    cfg = RunConfig(**kwargs)
    if require_seed:
        if "seed" not in doc.get("corpus", {}):
            raise ValidationError("missing field corpus.seed")
        if "seed" not in doc.get("train", {}):
            raise ValidationError("missing field train.seed")
    cfg.validate()
    return cfg


def load_run_config(path, require_seed: bool = True) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
    return run_config_from_dict(doc, require_seed)
