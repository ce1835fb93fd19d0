"""Fusion of speech, stutter, hypothesis, prompt, and transcript streams
into one embedding sequence for a small autoregressive LM.

The LM consumes embeddings directly (not ids): speech rows and the stutter
vector are projected into LM space, token segments go through the LM's
embedding table. Training masks the loss to the transcript span plus its
closing end-of-turn marker; inference decodes with beam search under a
repetition penalty and an n-gram repeat ban.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import (NetContext, causal_mask, init_dense, init_layer_norm,
                        init_transformer_block, sinusoidal_positions, transformer_block)
from .nn.params import ParamStore

PROMPT_TEXT = ("Please transcribe the stuttered speech into fluent text "
               "based on the provided multimodal information")

PAD, EOS, IM_START, IM_END, USER, ASSISTANT = range(6)
SPECIAL_NAMES = ("<pad>", "<eos>", "<|im_start|>", "<|im_end|>", "user", "assistant")
N_SPECIALS = len(SPECIAL_NAMES)

# segment-type vocabulary for the fused template
SEGMENT_TYPES = ("marker", "user", "assistant", "S", "D", "C", "P", "T")
SEGMENT_INDEX = {name: i for i, name in enumerate(SEGMENT_TYPES)}


class Tokenizer:
    """Character vocabulary over the base alphabet plus template specials."""

    def __init__(self, base_alphabet: str, extra_text: str = PROMPT_TEXT):
        chars = sorted(set(base_alphabet) | set(extra_text))
        self._char_to_id = {c: N_SPECIALS + i for i, c in enumerate(chars)}
        self._id_to_char = {i: c for c, i in self._char_to_id.items()}
        self.base_alphabet = base_alphabet

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + len(self._char_to_id)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._char_to_id[c] for c in text]
        except KeyError as exc:
            raise ValidationError(f"character {exc.args[0]!r} not in tokenizer vocabulary") from exc

    def decode(self, ids, skip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < N_SPECIALS:
                if not skip_special:
                    out.append(SPECIAL_NAMES[i])
                continue
            out.append(self._id_to_char[i])
        return "".join(out)


@dataclass
class LmConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 2
    ffn_dim: int = 128
    max_positions: int = 512
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1

    def validate(self) -> None:
        if self.dim % self.heads != 0:
            raise ValidationError("lm dim must be divisible by heads")
        if min(self.layers, self.dim, self.heads, self.ffn_dim, self.max_positions) <= 0:
            raise ValidationError("lm config counts must be positive")
        if self.lora_rank < 0:
            raise ValidationError("lora_rank must be >= 0")


LORA_TARGETS = ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.fc1", "ffn.fc2")


def init_lm_params(store: ParamStore, cfg: LmConfig, vocab_size: int,
                   rng: np.random.Generator, prefix: str = "lm") -> None:
    """Token/position/segment tables and blocks; output head tied to tokens.

    Two position tables: absolute, and segment-relative (index within each
    segment run) so cross-segment alignment is first-order addressable.
    """
    cfg.validate()
    store.add(f"{prefix}.embed", rng.normal(0.0, 0.3, size=(vocab_size, cfg.dim)))
    store.add(f"{prefix}.pos", rng.normal(0.0, 0.05, size=(cfg.max_positions, cfg.dim)))
    store.add(f"{prefix}.seg", rng.normal(0.0, 0.1, size=(len(SEGMENT_TYPES), cfg.dim)))
    for i in range(cfg.layers):
        init_transformer_block(store, f"{prefix}.block{i}", cfg.dim, cfg.ffn_dim, rng)
    init_layer_norm(store, f"{prefix}.ln_f", cfg.dim)


def attach_lm_lora(store: ParamStore, cfg: LmConfig, rng: np.random.Generator,
                   prefix: str = "lm") -> list[str]:
    """Adapters on every attention and feed-forward dense layer."""
    if cfg.lora_rank == 0:
        return []
    attached = []
    for i in range(cfg.layers):
        for target in LORA_TARGETS:
            name = f"{prefix}.block{i}.{target}.w"
            store.attach_lora(name, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng)
            attached.extend([f"{name}.lora_a", f"{name}.lora_b"])
    return attached


def init_fusion_params(store: ParamStore, encoder_dim: int, sed_hidden: int,
                       lm_dim: int, rng: np.random.Generator) -> None:
    init_dense(store, "fusion.speech.fc1", encoder_dim, lm_dim, rng)
    init_dense(store, "fusion.speech.fc2", lm_dim, lm_dim, rng)
    init_dense(store, "fusion.stutter", sed_hidden, lm_dim, rng)


def speech_embed(ctx: NetContext, h_s: Tensor) -> Tensor:
    """Two-dense projection with ReLU between; one row per frame."""
    return ctx.dense("fusion.speech.fc2", ag.relu(ctx.dense("fusion.speech.fc1", h_s)))


def stutter_embed(ctx: NetContext, h_sed: Tensor) -> Tensor:
    """Single dense map of the SED hidden state into one LM position."""
    row = ag.reshape(h_sed, (1, h_sed.shape[-1])) if h_sed.data.ndim == 1 else h_sed
    return ctx.dense("fusion.stutter", row)


@dataclass
class EmbeddingSequence:
    embeddings: Tensor            # (L, D_lm)
    tags: list[str]               # per-position segment tag
    mask: np.ndarray              # bool (L,); True where the loss applies
    token_ids: np.ndarray         # int64 (L,); -1 at non-token positions

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def segment_ids(self) -> np.ndarray:
        return np.asarray([SEGMENT_INDEX[t] for t in self.tags], dtype=np.int64)

    @property
    def relative_ids(self) -> np.ndarray:
        """Index within each contiguous segment run (restarts at boundaries)."""
        rel = np.zeros(len(self.tags), dtype=np.int64)
        for i in range(1, len(self.tags)):
            rel[i] = rel[i - 1] + 1 if self.tags[i] == self.tags[i - 1] else 0
        return rel

    def segment_order(self) -> list[str]:
        """Run-collapsed tag sequence, e.g. [marker, user, S, D, C, P, ...].

        Marker positions are single tokens and never merge, so adjacent
        <|im_end|> <|im_start|> read back as two marker entries.
        """
        order = []
        for tag in self.tags:
            if tag == "marker" or not order or order[-1] != tag:
                order.append(tag)
        return order


def assemble(ctx: NetContext, mode: str, e_s: Tensor, e_sed: Tensor | None,
             ctc_ids: list[int], prompt_ids: list[int],
             target_ids: list[int] | None = None,
             drop_ctc: bool = False, drop_sed: bool = False,
             prefix: str = "lm") -> EmbeddingSequence:
    """Build the fused input sequence for one utterance.

    Layout: <|im_start|> user <S> <D> <C> <P> <|im_end|> <|im_start|>
    assistant, then in train mode <T> <|im_end|> with the loss mask on the
    transcript and its terminator. Ablation flags drop the <C> / <D>
    segments at inference.
    """
    if mode == "train" and target_ids is None:
        raise ValidationError("train mode requires transcript token ids")
    if mode == "infer" and target_ids is not None:
        raise ValidationError("infer mode forbids transcript token ids")
    if mode not in ("train", "infer"):
        raise ValidationError(f"unknown mode {mode!r}")

    table = ctx.tensors[f"{prefix}.embed"]
    parts: list[Tensor] = []
    tags: list[str] = []
    ids: list[int] = []

    def add_tokens(tok_ids: list[int], tag: str) -> None:
        if not tok_ids:
            return
        parts.append(ag.embedding(table, np.asarray(tok_ids, dtype=np.int64)))
        tags.extend([tag] * len(tok_ids))
        ids.extend(tok_ids)

    def add_vectors(vecs: Tensor, tag: str) -> None:
        parts.append(vecs)
        tags.extend([tag] * vecs.shape[0])
        ids.extend([-1] * vecs.shape[0])

    add_tokens([IM_START], "marker")
    add_tokens([USER], "user")
    add_vectors(e_s, "S")
    if not drop_sed:
        if e_sed is None:
            raise ValidationError("e_sed required unless drop_sed is set")
        add_vectors(e_sed, "D")
    if not drop_ctc:
        add_tokens(list(ctc_ids), "C")
    add_tokens(list(prompt_ids), "P")
    add_tokens([IM_END], "marker")
    add_tokens([IM_START], "marker")
    add_tokens([ASSISTANT], "assistant")
    mask_from = len(ids)
    if mode == "train":
        add_tokens(list(target_ids), "T")
        add_tokens([IM_END], "marker")

    mask = np.zeros(len(ids), dtype=bool)
    if mode == "train":
        mask[mask_from:] = True  # transcript plus its closing <|im_end|>
    return EmbeddingSequence(
        embeddings=ag.concat_rows(parts),
        tags=tags,
        mask=mask,
        token_ids=np.asarray(ids, dtype=np.int64),
    )


def lm_forward(ctx: NetContext, cfg: LmConfig, embeddings: Tensor,
               segment_ids: np.ndarray | None = None,
               relative_ids: np.ndarray | None = None,
               prefix: str = "lm", lora_active: bool = True) -> Tensor:
    """Causal transformer over embedding inputs -> (L, vocab) logits.

    Absolute positions, segment-relative positions, and segment types are
    learned tables; the output head shares the token embedding table
    (logits = h @ E^T).
    """
    t = embeddings.shape[0]
    if t > cfg.max_positions:
        raise ValidationError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    h = ag.add(embeddings, ag.slice_rows(ctx.tensors[f"{prefix}.pos"], 0, t))
    if segment_ids is not None:
        h = ag.add(h, ag.embedding(ctx.tensors[f"{prefix}.seg"], segment_ids))
    if relative_ids is not None:
        # fixed sinusoidal encoding of within-segment offsets: its linear
        # shift structure makes cross-segment alignment cheap to express
        table = sinusoidal_positions(cfg.max_positions, cfg.dim, h.dtype)
        h = ag.add_mask(h, 0.7 * table[relative_ids])
    for i in range(cfg.layers):
        h = transformer_block_lora(ctx, f"{prefix}.block{i}", h, cfg.heads, lora_active)
    h = ctx.layer_norm(f"{prefix}.ln_f", h)
    return ag.matmul(h, ag.transpose(ctx.tensors[f"{prefix}.embed"]))


def transformer_block_lora(ctx: NetContext, block: str, x: Tensor, heads: int,
                           lora_active: bool) -> Tensor:
    """Pre-norm causal block; LoRA-aware dense calls, no block dropout."""
    t = x.shape[0]
    xn = ctx.layer_norm(f"{block}.ln1", x)
    q = ctx.dense(f"{block}.attn.q", xn, lora_active)
    k = ctx.dense(f"{block}.attn.k", xn, lora_active)
    v = ctx.dense(f"{block}.attn.v", xn, lora_active)
    merged = ag.multi_head_attention(q, k, v, heads, causal_mask(t, x.dtype))
    x = ag.add(x, ctx.dense(f"{block}.attn.o", merged, lora_active))
    h = ctx.dense(f"{block}.ffn.fc1", ctx.layer_norm(f"{block}.ln2", x), lora_active)
    h = ctx.dense(f"{block}.ffn.fc2", ag.silu(h), lora_active)
    return ag.add(x, h)


def lm_loss(ctx: NetContext, cfg: LmConfig, seq: EmbeddingSequence,
            prefix: str = "lm", lora_active: bool = True) -> Tensor:
    """Cross-entropy over masked positions only, next-token shifted."""
    positions = np.flatnonzero(seq.mask)
    if positions.size == 0:
        raise ValidationError("loss mask is empty")
    if positions[0] == 0:
        raise ValidationError("masked position 0 has no predictor")
    logits = lm_forward(ctx, cfg, seq.embeddings, seq.segment_ids, seq.relative_ids,
                        prefix, lora_active)
    log_probs = ag.log_softmax_rows(logits)
    picked = ag.gather(log_probs, positions - 1, seq.token_ids[positions])
    return ag.scale(ag.sum_all(picked), -1.0 / positions.size)


def apply_repetition_penalty(logits: np.ndarray, generated: list[int],
                             penalty: float) -> np.ndarray:
    """Divide positive logits (multiply negative ones) for seen tokens."""
    out = logits.astype(np.float64, copy=True)
    for tok in set(generated):
        out[tok] = out[tok] / penalty if out[tok] > 0 else out[tok] * penalty
    return out


def banned_ngram_tokens(generated: list[int], n: int) -> set[int]:
    """Tokens that would complete an n-gram already present in `generated`."""
    if n <= 0 or len(generated) < n - 1:
        return set()
    prefix = tuple(generated[len(generated) - (n - 1):])
    banned = set()
    for i in range(len(generated) - n + 1):
        if tuple(generated[i:i + n - 1]) == prefix:
            banned.add(generated[i + n - 1])
    return banned


def generate(ctx: NetContext, cfg: LmConfig, prefix_seq: EmbeddingSequence,
             tokenizer: Tokenizer, beam_width: int = 2, rep_penalty: float = 1.5,
             no_repeat_n: int = 3, max_len: int = 48,
             prefix: str = "lm", lora_active: bool = True) -> str:
    """Beam search continuation of an inference-mode prefix.

    Beams score by total log-probability (no length normalization); stop on
    <eos>, <|im_end|>, or max_len. The repetition penalty and the n-gram ban
    look only at each beam's own generated suffix.
    """
    if max_len <= 0:
        raise ValidationError("max_len must be positive")
    if np.any(prefix_seq.mask):
        raise ValidationError("generation requires an inference-mode prefix")
    table = ctx.tensors[f"{prefix}.embed"]
    prefix_data = prefix_seq.embeddings.data
    prefix_segs = prefix_seq.segment_ids
    prefix_rels = prefix_seq.relative_ids
    t_seg = SEGMENT_INDEX["T"]
    stop_ids = (EOS, IM_END)

    beams: list[tuple[list[int], float, bool]] = [([], 0.0, False)]
    for _ in range(max_len):
        if all(done for _, _, done in beams):
            break
        candidates: list[tuple[float, int, list[int], bool]] = []
        for ids, score, done in beams:
            if done:
                candidates.append((score, -1, ids, True))
                continue
            if ids:
                emb = np.concatenate([prefix_data, table.data[np.asarray(ids)]], axis=0)
                segs = np.concatenate([prefix_segs, np.full(len(ids), t_seg, dtype=np.int64)])
                rels = np.concatenate([prefix_rels, np.arange(len(ids), dtype=np.int64)])
            else:
                emb, segs, rels = prefix_data, prefix_segs, prefix_rels
            logits = lm_forward(ctx, cfg, Tensor(emb), segs, rels, prefix, lora_active).data[-1]
            logits = apply_repetition_penalty(logits, ids, rep_penalty)
            for tok in banned_ngram_tokens(ids, no_repeat_n):
                logits[tok] = -np.inf
            log_probs = ag.log_softmax(logits)
            order = np.argsort(-log_probs, kind="stable")[: max(beam_width, 2)]
            for tok in order:
                tok = int(tok)
                if not np.isfinite(log_probs[tok]):
                    continue
                candidates.append((score + float(log_probs[tok]), tok, ids, False))
        # highest score first; token id breaks exact ties deterministically
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for cand_score, tok, ids, done in candidates[:beam_width]:
            if done:
                beams.append((ids, cand_score, True))
            else:
                new_ids = ids + [tok]
                beams.append((new_ids, cand_score, tok in stop_ids))
    best = max(beams, key=lambda b: b[1])
    return tokenizer.decode(best[0], skip_special=True)
