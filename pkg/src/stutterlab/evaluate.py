"""Metrics and reports: CER by severity/scenario, per-event F1, ablations.

CER cells are micro-averaged (summed edit distance over summed reference
length), never means of per-utterance rates. F1 is utterance-level
multi-label at a configurable sigmoid threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import EVENT_ORDER, Utterance
from .encoder import encode
from .errors import ValidationError
from .fusion import generate
from .model import Modes, System
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import NetContext, mean_pool
from .nn.optim import OptimState, optimizer_step
from .nn.params import ParamStore
from .sed import (FocalParams, SedConfig, init_sed_params, predict_events, sed_classify,
                  sed_loss, sed_project)
from .train import TrainState

# Paper-scale reference points, displayed in reports for orientation only;
# desk-scale synthetic runs are not expected to reproduce them.
PAPER_REFERENCE = {"cer_all_percent": 5.45, "f1_avg_percent": 73.63}

CER_CELLS = ("mild", "moderate", "severe", "conversation", "command", "all")
F1_KEYS = EVENT_ORDER + ("avg",)


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance, iterative two-row DP."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    """Per-utterance character error rate against the fluent reference."""
    if not reference:
        return 0.0 if not hypothesis else 1.0
    return levenshtein(reference, hypothesis) / len(reference)


def f1_per_class(preds: np.ndarray, trues: np.ndarray) -> tuple[dict[str, float], dict[str, bool]]:
    """F1 per event class plus unweighted macro average.

    Returns (scores in [0, 1], zero-division flags); a class with no
    predictions and no positives scores 0 and is flagged.
    """
    preds = np.asarray(preds)
    trues = np.asarray(trues)
    if preds.shape != trues.shape or preds.ndim != 2 or preds.shape[1] != len(EVENT_ORDER):
        raise ValidationError("preds/trues must both be (N, 5)")
    scores: dict[str, float] = {}
    flags: dict[str, bool] = {}
    for k, name in enumerate(EVENT_ORDER):
        tp = int(np.sum((preds[:, k] == 1) & (trues[:, k] == 1)))
        fp = int(np.sum((preds[:, k] == 1) & (trues[:, k] == 0)))
        fn = int(np.sum((preds[:, k] == 0) & (trues[:, k] == 1)))
        denom = 2 * tp + fp + fn
        flags[name] = denom == 0
        scores[name] = 0.0 if denom == 0 else 2 * tp / denom
    scores["avg"] = sum(scores[n] for n in EVENT_ORDER) / len(EVENT_ORDER)
    flags["avg"] = any(flags[n] for n in EVENT_ORDER)
    return scores, flags


@dataclass
class EvalOptions:
    beam_width: int = 2
    rep_penalty: float = 1.5
    no_repeat_n: int = 3
    max_len: int = 48
    sed_threshold: float = 0.5
    ablate_ctc: bool = False
    ablate_sed: bool = False


@dataclass
class Report:
    cer: dict[str, float | None]           # percentages per cell
    cer_counts: dict[str, int]
    f1: dict[str, float]                   # percentages per class + avg
    f1_flags: dict[str, bool]
    n_utterances: int
    options: dict = field(default_factory=dict)
    paper_reference: dict = field(default_factory=lambda: dict(PAPER_REFERENCE))

    def to_json_dict(self) -> dict:
        return {
            "cer_percent": self.cer,
            "cer_counts": self.cer_counts,
            "f1_percent": self.f1,
            "f1_zero_division_flags": self.f1_flags,
            "n_utterances": self.n_utterances,
            "options": self.options,
            "paper_reference": self.paper_reference,
        }

    def render_text(self) -> str:
        def fmt(v):
            return "  n/a" if v is None else f"{v:5.2f}"

        lines = [
            "CER (%) by severity and scenario",
            "  " + "  ".join(f"{c:>12}" for c in CER_CELLS),
            "  " + "  ".join(f"{fmt(self.cer[c]):>12}" for c in CER_CELLS),
            "  counts: " + "  ".join(f"{c}={self.cer_counts[c]}" for c in CER_CELLS),
            "",
            "F1 (%) per stuttering event type",
            "  " + "  ".join(f"{k:>8}" for k in F1_KEYS),
            "  " + "  ".join(f"{self.f1[k]:8.2f}" for k in F1_KEYS),
        ]
        flagged = [k for k, v in self.f1_flags.items() if v and k != "avg"]
        if flagged:
            lines.append("  zero-division classes: " + ", ".join(flagged))
        lines.append("")
        lines.append(f"paper reference (full-scale): CER all "
                     f"{self.paper_reference['cer_all_percent']}%, "
                     f"F1 avg {self.paper_reference['f1_avg_percent']}%")
        return "\n".join(lines) + "\n"


def evaluate(state: TrainState, corpus: list[Utterance], opts: EvalOptions | None = None,
             decode_fn=None, transcript_path=None) -> Report:
    """Decode and score a corpus against the reference fluent transcripts.

    `decode_fn(utt, hypothesis_text)` overrides generation when supplied
    (oracle plumbing for tests). `transcript_path` additionally writes the
    decoded outputs as UTF-8 "<utterance-id>\\t<text>" lines.
    """
    opts = opts or EvalOptions()
    system = state.system
    if not corpus:
        raise ValidationError("evaluation corpus is empty")
    system.check_corpus_vocabulary(corpus)
    transcripts: list[tuple[str, str]] = []

    dist_sums = {c: 0 for c in CER_CELLS}
    len_sums = {c: 0 for c in CER_CELLS}
    counts = {c: 0 for c in CER_CELLS}
    preds = np.zeros((len(corpus), len(EVENT_ORDER)), dtype=np.int64)
    trues = np.asarray([u.events for u in corpus], dtype=np.int64)

    for i, utt in enumerate(corpus):
        # no tape needed at eval: plain constant tensors
        tensors = {n: Tensor(system.store[n].data) for n in system.store.names()}
        ctxs = system.contexts(tensors, None, Modes.eval())
        seq, hyp, sed_scores = system.infer_sequence(
            ctxs, utt, drop_ctc=opts.ablate_ctc, drop_sed=opts.ablate_sed)
        preds[i] = predict_events(sed_scores, opts.sed_threshold)
        if decode_fn is not None:
            text = decode_fn(utt, hyp.text)
        else:
            text = generate(ctxs["lm"], system.cfg.lm, seq, system.tokenizer,
                            beam_width=opts.beam_width, rep_penalty=opts.rep_penalty,
                            no_repeat_n=opts.no_repeat_n, max_len=opts.max_len)
        transcripts.append((utt.id, text))
        d = levenshtein(utt.fluent_text, text)
        for cell in (utt.severity, utt.scenario, "all"):
            dist_sums[cell] += d
            len_sums[cell] += len(utt.fluent_text)
            counts[cell] += 1

    if transcript_path is not None:
        with open(transcript_path, "w", encoding="utf-8") as fh:
            for utt_id, text in transcripts:
                fh.write(f"{utt_id}\t{text}\n")

    cer_cells: dict[str, float | None] = {}
    for cell in CER_CELLS:
        cer_cells[cell] = None if counts[cell] == 0 else 100.0 * dist_sums[cell] / len_sums[cell]
    scores, flags = f1_per_class(preds, trues)
    return Report(
        cer=cer_cells,
        cer_counts=counts,
        f1={k: 100.0 * v for k, v in scores.items()},
        f1_flags=flags,
        n_utterances=len(corpus),
        options={"ablate_ctc": opts.ablate_ctc, "ablate_sed": opts.ablate_sed,
                 "beam_width": opts.beam_width, "rep_penalty": opts.rep_penalty,
                 "no_repeat_n": opts.no_repeat_n, "sed_threshold": opts.sed_threshold},
    )


def pooled_features(system: System, corpus: list[Utterance]) -> np.ndarray:
    """Frozen-encoder context vectors, one row per utterance."""
    out = np.zeros((len(corpus), system.cfg.encoder.dim), dtype=system.store.dtype)
    for i, utt in enumerate(corpus):
        tensors = {n: Tensor(system.store[n].data) for n in system.store.names()}
        ctx = NetContext(system.store, tensors, None, training=False)
        h = encode(ctx, system.cfg.encoder, Tensor(np.asarray(utt.frames, dtype=system.store.dtype)))
        out[i] = mean_pool(h).data
    return out


def train_sed_variant(system: System, train_corpus: list[Utterance],
                      fp: FocalParams, delta: float, tau: float,
                      steps: int = 1500, batch_size: int = 32, lr: float = 1e-3,
                      seed: int = 7, include_self: bool = True) -> ParamStore:
    """Retrain a fresh SED head on frozen encoder features.

    This is the loss-ablation harness: the same features and schedule with
    different (focal, contrastive) settings isolates the loss contribution.
    """
    feats = pooled_features(system, train_corpus)
    labels = np.asarray([u.events for u in train_corpus], dtype=system.store.dtype)
    cfg = system.cfg.sed
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 4])))
    store = ParamStore(system.store.dtype)
    init_sed_params(store, cfg, system.cfg.encoder.dim, rng)
    optim = OptimState.for_store(store, lr)
    n = len(train_corpus)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=n < batch_size)
        tensors = store.tensors()
        ctx = NetContext(store, tensors, rng, training=True)
        logit_rows, z_rows = [], []
        for i in idx:
            v = Tensor(feats[int(i)])
            logits, _ = sed_classify(ctx, cfg, v)
            logit_rows.append(ag.reshape(logits, (1, -1)))
            z_rows.append(ag.reshape(sed_project(ctx, v), (1, -1)))
        loss = sed_loss(ag.concat_rows(logit_rows), labels[idx], ag.concat_rows(z_rows),
                        fp, delta, tau, include_self, check_norm=False)
        loss.backward()
        grads = {name: (tensors[name].grad if tensors[name].grad is not None
                        else np.zeros_like(tensors[name].data))
                 for name in store.trainable_names()}
        optimizer_step(store, grads, optim, lr)
    return store


def sed_variant_f1(system: System, head_store: ParamStore, test_corpus: list[Utterance],
                   threshold: float = 0.5) -> tuple[dict[str, float], dict[str, bool]]:
    """Score a retrained SED head on a held-out corpus (fractions, not %)."""
    feats = pooled_features(system, test_corpus)
    trues = np.asarray([u.events for u in test_corpus], dtype=np.int64)
    preds = np.zeros_like(trues)
    tensors = {n: Tensor(head_store[n].data) for n in head_store.names()}
    ctx = NetContext(head_store, tensors, None, training=False)
    for i in range(len(test_corpus)):
        logits, _ = sed_classify(ctx, system.cfg.sed, Tensor(feats[i]))
        preds[i] = predict_events(logits.data, threshold)
    return f1_per_class(preds, trues)
