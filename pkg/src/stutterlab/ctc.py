"""CTC loss via log-space forward-backward, plus oracles and greedy decoding.

The loss marginalizes over every blank-augmented alignment that collapses
to the target (collapse = merge adjacent duplicates, then drop blanks).
`ctc_brute_force` recomputes the same quantity by exhaustive path
enumeration and is the correctness oracle for the recursion.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .nn.autograd import Tensor, log_softmax, make_op

BLANK = 0

NEG_INF = -np.inf


@dataclass
class CtcVocab:
    """Blank is id 0; alphabet characters map to ids 1..V."""

    alphabet: str

    def encode(self, text: str) -> list[int]:
        return [self.alphabet.index(c) + 1 for c in text]

    def decode(self, ids: list[int]) -> str:
        return "".join(self.alphabet[i - 1] for i in ids)

    @property
    def size(self) -> int:
        # includes the blank
        return len(self.alphabet) + 1


@dataclass
class Hypothesis:
    text: str
    frame_ids: list[int] = field(default_factory=list)


def collapse(path, blank: int = BLANK) -> tuple[int, ...]:
    """Merge adjacent duplicates, then remove blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def _check_feasible(t: int, target: list[int]) -> None:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    if t < len(target) + repeats:
        raise ValidationError(
            f"target too long for T: need {len(target) + repeats} frames, have {t}")


def _extended(target: list[int]) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_forward_backward(logits: np.ndarray, target: list[int]) -> tuple[float, np.ndarray]:
    """Negative log path-sum and its exact gradient w.r.t. the logits."""
    t_frames = logits.shape[0]
    _check_feasible(t_frames, target)
    lp = log_softmax(logits)
    ext = _extended(target)
    s = ext.size

    # skip transition s-2 -> s allowed when ext[s] is a label differing from ext[s-2]
    skip_ok = np.zeros(s, dtype=bool)
    if s > 2:
        skip_ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    emit = lp[:, ext]  # (T, S)

    alpha = np.full((t_frames, s), NEG_INF, dtype=logits.dtype)
    alpha[0, 0] = emit[0, 0]
    if s > 1:
        alpha[0, 1] = emit[0, 1]
    step = np.full(s, NEG_INF, dtype=logits.dtype)
    skip = np.full(s, NEG_INF, dtype=logits.dtype)
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        step[1:] = prev[:-1]
        if s > 2:
            np.copyto(skip[2:], prev[:-2], where=skip_ok[2:])
        alpha[t] = emit[t] + np.logaddexp(np.logaddexp(prev, step), skip)

    log_z = float(np.logaddexp(alpha[-1, -1], alpha[-1, -2])) if s > 1 else float(alpha[-1, -1])
    if not math.isfinite(log_z):
        raise ValidationError("target has no feasible alignment")

    beta = np.full((t_frames, s), NEG_INF, dtype=logits.dtype)
    beta[-1, -1] = emit[-1, -1]
    if s > 1:
        beta[-1, -2] = emit[-1, -2]
    step = np.full(s, NEG_INF, dtype=logits.dtype)
    skip = np.full(s, NEG_INF, dtype=logits.dtype)
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1]
        step[:-1] = nxt[1:]
        if s > 2:
            skip[:-2] = np.where(skip_ok[2:], nxt[2:], NEG_INF)
        beta[t] = emit[t] + np.logaddexp(np.logaddexp(nxt, step), skip)

    # state posteriors: alpha and beta both include the emission at t
    with np.errstate(invalid="ignore"):
        gamma = np.exp(alpha + beta - emit - log_z)
    gamma = np.where(np.isfinite(alpha + beta), gamma, 0.0)

    # dL/dlogit = softmax - sum of posteriors of states emitting that symbol
    probs = np.exp(lp)
    occ = np.zeros_like(logits)
    np.add.at(occ.T, ext, gamma.T)
    grad = probs - occ
    return -log_z, grad.astype(logits.dtype, copy=False)


def ctc_loss(logits: Tensor, target: list[int]) -> Tensor:
    """Tape node around the forward-backward recursion."""
    if not np.all(np.isfinite(logits.data)):
        raise ValidationError("logits must be finite")
    loss, grad = ctc_forward_backward(logits.data, list(target))
    value = np.asarray(loss, dtype=logits.dtype)
    return make_op(value, (logits,), lambda g: (g * grad,))


def ctc_brute_force(frame_probs: np.ndarray, target: list[int], max_paths: int = 10_000_000) -> float:
    """-log of the exact path sum by enumerating all label sequences."""
    t_frames, v = frame_probs.shape
    if v ** t_frames > max_paths:
        raise ValidationError(f"instance too large: {v}^{t_frames} paths")
    target = tuple(target)
    total = 0.0
    for path in itertools.product(range(v), repeat=t_frames):
        if collapse(path) != target:
            continue
        p = 1.0
        for t, sym in enumerate(path):
            p *= frame_probs[t, sym]
        total += p
    if total <= 0.0:
        return math.inf
    return -math.log(total)


def ctc_greedy_decode(logits: np.ndarray, vocab: CtcVocab | None = None) -> Hypothesis:
    """Per-frame argmax (ties to the lowest id), collapse, drop blanks."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    frame_ids = [int(i) for i in np.argmax(data, axis=-1)]
    ids = list(collapse(frame_ids))
    if vocab is None:
        text = "".join(chr(ord("a") + i - 1) for i in ids)
    else:
        text = vocab.decode(ids)
    return Hypothesis(text=text, frame_ids=frame_ids)
