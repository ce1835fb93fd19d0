"""Full-system wiring: shared encoder feeding the CTC, SED, and LM branches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Utterance
from .ctc import CtcVocab, Hypothesis, ctc_greedy_decode, ctc_loss
from .encoder import EncoderConfig, encode, init_encoder_params
from .errors import ValidationError
from .fusion import (PROMPT_TEXT, EmbeddingSequence, LmConfig, Tokenizer, assemble,
                     attach_lm_lora, init_fusion_params, init_lm_params, lm_loss,
                     speech_embed, stutter_embed)
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import NetContext, init_dense, mean_pool
from .nn.params import ParamStore
from .sed import SedConfig, init_sed_params, sed_classify, sed_project


@dataclass
class ModelConfig:
    feature_dim: int = 8
    alphabet: str = "ABCDEFGHIJKLMNOP"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sed: SedConfig = field(default_factory=SedConfig)
    lm: LmConfig = field(default_factory=LmConfig)


@dataclass
class BranchOutputs:
    """Per-utterance tape outputs the trainer combines into batch losses."""

    l_ctc: Tensor
    l_llm: Tensor | None
    sed_logits: Tensor
    z: Tensor
    hypothesis: Hypothesis


class Modes:
    """Per-component train/eval switches for one forward pass."""

    def __init__(self, encoder_train: bool = False, sed_train: bool = False,
                 lm_train: bool = False):
        self.encoder_train = encoder_train
        self.sed_train = sed_train
        self.lm_train = lm_train

    @staticmethod
    def eval() -> "Modes":
        return Modes(False, False, False)


class System:
    """Parameter store plus the branch forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        cfg.encoder.validate()
        cfg.lm.validate()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.alphabet)
        self.vocab = CtcVocab(cfg.alphabet)
        self.prompt_ids = self.tokenizer.encode(PROMPT_TEXT)
        self.store = ParamStore(dtype)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
        init_encoder_params(self.store, cfg.encoder, cfg.feature_dim, rng)
        init_dense(self.store, "ctc.out", cfg.encoder.dim, self.vocab.size, rng)
        init_sed_params(self.store, cfg.sed, cfg.encoder.dim, rng)
        init_fusion_params(self.store, cfg.encoder.dim, cfg.sed.hidden_dim, cfg.lm.dim, rng)
        init_lm_params(self.store, cfg.lm, self.tokenizer.vocab_size, rng)
        self.lora_attached = False

    def attach_lora(self, rng: np.random.Generator) -> list[str]:
        names = attach_lm_lora(self.store, self.cfg.lm, rng)
        self.lora_attached = True
        return names

    def contexts(self, tensors: dict[str, Tensor], rng: np.random.Generator | None,
                 modes: Modes) -> dict[str, NetContext]:
        return {
            "enc": NetContext(self.store, tensors, rng, modes.encoder_train),
            "sed": NetContext(self.store, tensors, rng, modes.sed_train),
            "lm": NetContext(self.store, tensors, rng, modes.lm_train),
        }

    def forward_utterance(self, ctxs: dict[str, NetContext], utt: Utterance,
                          with_lm_loss: bool = True) -> BranchOutputs:
        """All branch outputs for one utterance in train layout."""
        frames = Tensor(np.asarray(utt.frames, dtype=self.store.dtype))
        h_s = encode(ctxs["enc"], self.cfg.encoder, frames)
        ctc_logits = ctxs["enc"].dense("ctc.out", h_s)
        target = self.vocab.encode(utt.fluent_text)
        l_ctc = ctc_loss(ctc_logits, target)
        hyp = ctc_greedy_decode(ctc_logits.data, self.vocab)

        v = mean_pool(h_s)
        sed_logits, h2 = sed_classify(ctxs["sed"], self.cfg.sed, v)
        z = sed_project(ctxs["sed"], v)

        l_llm = None
        if with_lm_loss:
            e_s = speech_embed(ctxs["lm"], h_s)
            e_d = stutter_embed(ctxs["lm"], h2)
            seq = assemble(ctxs["lm"], "train", e_s, e_d,
                           self.tokenizer.encode(hyp.text), self.prompt_ids,
                           self.tokenizer.encode(utt.fluent_text))
            l_llm = lm_loss(ctxs["lm"], self.cfg.lm, seq)
        return BranchOutputs(l_ctc, l_llm, sed_logits, z, hyp)

    def infer_sequence(self, ctxs: dict[str, NetContext], utt: Utterance,
                       drop_ctc: bool = False, drop_sed: bool = False,
                       ) -> tuple[EmbeddingSequence, Hypothesis, np.ndarray]:
        """Inference-mode prefix plus the CTC hypothesis and SED scores."""
        frames = Tensor(np.asarray(utt.frames, dtype=self.store.dtype))
        h_s = encode(ctxs["enc"], self.cfg.encoder, frames)
        ctc_logits = ctxs["enc"].dense("ctc.out", h_s)
        hyp = ctc_greedy_decode(ctc_logits.data, self.vocab)
        v = mean_pool(h_s)
        sed_logits, h2 = sed_classify(ctxs["sed"], self.cfg.sed, v)
        e_s = speech_embed(ctxs["lm"], h_s)
        e_d = None if drop_sed else stutter_embed(ctxs["lm"], h2)
        seq = assemble(ctxs["lm"], "infer", e_s, e_d,
                       self.tokenizer.encode(hyp.text), self.prompt_ids,
                       drop_ctc=drop_ctc, drop_sed=drop_sed)
        return seq, hyp, sed_logits.data

    def check_corpus_vocabulary(self, corpus: list[Utterance]) -> None:
        allowed = set(self.cfg.alphabet)
        for utt in corpus:
            extra = set(utt.fluent_text) - allowed
            if extra:
                raise ValidationError(
                    f"corpus/checkpoint vocabulary mismatch: {utt.id} uses {sorted(extra)}")
