"""Joint training: warm-up phase, then the frozen-backbone joint phase.

Phase A trains encoder + CTC head + LM base (+ fusion projections) on the
CTC and LM losses so the from-scratch stand-ins reach useful quality.
Phase B freezes encoder and LM base, attaches LoRA adapters, and optimizes
the full weighted objective over the CTC head, SED branch, fusion
projections, and adapters. Everything is driven by one seeded RNG stream,
so runs repeat bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Utterance
from .errors import NumericalError, ValidationError
from .model import Modes, System
from .nn import autograd as ag
from .nn.optim import OptimState, optimizer_step
from .sed import FocalParams, sed_loss

LOG_COLUMNS = ("step", "l_llm", "l_ctc", "l_sed", "l_total", "lr")

# paper-scale step budget, recorded for reference; desk default is scaled down
PAPER_MAX_STEPS = 25_000


@dataclass
class TrainConfig:
    beta: float = 0.3
    mu: float = 0.1
    delta: float = 0.3
    tau: float = 0.1
    gamma: float = 2.0
    alpha: tuple[float, ...] = (0.3, 0.3, 0.2, 0.1, 0.1)
    supcon_include_self: bool = True
    max_steps: int = 5000
    batch_size: int = 8
    lr_max: float = 5e-4
    weight_decay: float = 0.0
    warmup_frac: float = 0.05
    phase_a_frac: float = 0.7
    # short-utterance curriculum over the first part of phase A: length
    # buckets graduate from short to full so alignment forms early
    curriculum_frac: float = 0.4
    curriculum_tokens: tuple[int, int] = (8, 14)
    seed: int = 2024

    def validate(self) -> None:
        if min(self.beta, self.mu, self.delta) < 0:
            raise ValidationError("beta, mu, delta must be non-negative")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        FocalParams(tuple(self.alpha), self.gamma).validate()
        if self.max_steps <= 0 or self.batch_size <= 0:
            raise ValidationError("max_steps and batch_size must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0 or not 0.0 <= self.phase_a_frac <= 1.0:
            raise ValidationError("warmup_frac and phase_a_frac must be in [0, 1]")
        if not 0.0 <= self.curriculum_frac <= 1.0:
            raise ValidationError("curriculum_frac must be in [0, 1]")
        if len(self.curriculum_tokens) != 2 or self.curriculum_tokens[0] > self.curriculum_tokens[1]:
            raise ValidationError("curriculum_tokens must be an increasing pair")
        if self.lr_max <= 0:
            raise ValidationError("lr_max must be positive")

    @property
    def phase_a_steps(self) -> int:
        return int(round(self.phase_a_frac * self.max_steps))


def total_loss(l_llm: float, l_ctc: float, l_sed: float, beta: float, mu: float) -> float:
    """Weighted sum of the three branch losses."""
    for name, value in (("llm", l_llm), ("ctc", l_ctc), ("sed", l_sed)):
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {name} loss: {value}")
    return l_llm + beta * l_ctc + mu * l_sed


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay to zero."""
    warmup = max(1, int(round(cfg.warmup_frac * cfg.max_steps)))
    if step <= warmup:
        return cfg.lr_max * step / warmup
    progress = (step - warmup) / max(1, cfg.max_steps - warmup)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class TrainState:
    system: System
    cfg: TrainConfig
    optim: OptimState
    rng: np.random.Generator
    step: int = 0
    phase: str = "A"
    log: list[dict] = field(default_factory=list)


def _set_phase_a(system: System) -> None:
    store = system.store
    for name in store.names():
        store.set_trainable(name, not name.startswith("sed."))


def _set_phase_b(system: System, rng: np.random.Generator) -> None:
    store = system.store
    store.set_trainable_prefix("encoder.", False)
    store.set_trainable_prefix("lm.", False)
    store.set_trainable_prefix("sed.", True)
    store.set_trainable_prefix("ctc.", True)
    store.set_trainable_prefix("fusion.", True)
    if not system.lora_attached:
        system.attach_lora(rng)  # new adapter tensors are trainable by default


def init_train_state(system: System, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 3])))
    _set_phase_a(system)
    if cfg.phase_a_steps == 0:
        _set_phase_b(system, rng)
        phase = "B"
    else:
        phase = "A"
    optim = OptimState.for_store(system.store, cfg.lr_max, cfg.weight_decay)
    return TrainState(system, cfg, optim, rng, step=0, phase=phase)


def train_step(state: TrainState, corpus: list[Utterance]) -> dict:
    """One optimizer update; returns the log row."""
    cfg = state.cfg
    system = state.system
    state.step += 1
    if state.phase == "A" and state.step > cfg.phase_a_steps:
        _set_phase_b(system, state.rng)
        state.optim = OptimState.for_store(system.store, cfg.lr_max, cfg.weight_decay)
        state.phase = "B"

    pool = _curriculum_pool(corpus, state.step, cfg)
    n = len(pool)
    take = min(cfg.batch_size, n)
    idx = state.rng.choice(n, size=take, replace=n < cfg.batch_size)
    batch = [pool[int(i)] for i in idx]

    modes = Modes(encoder_train=state.phase == "A", sed_train=state.phase == "B",
                  lm_train=state.phase == "B")
    tensors = system.store.tensors()
    ctxs = system.contexts(tensors, state.rng, modes)

    outs = [system.forward_utterance(ctxs, utt) for utt in batch]
    l_llm = ag.scale(_sum([o.l_llm for o in outs]), 1.0 / take)
    l_ctc = ag.scale(_sum([o.l_ctc for o in outs]), 1.0 / take)
    sed_logits = ag.concat_rows([ag.reshape(o.sed_logits, (1, -1)) for o in outs])
    z = ag.concat_rows([ag.reshape(o.z, (1, -1)) for o in outs])
    labels = np.asarray([u.events for u in batch], dtype=system.store.dtype)
    l_sed = sed_loss(sed_logits, labels, z, FocalParams(tuple(cfg.alpha), cfg.gamma),
                     cfg.delta, cfg.tau, cfg.supcon_include_self, check_norm=False)

    if state.phase == "A":
        objective = ag.add(l_llm, ag.scale(l_ctc, cfg.beta))
    else:
        objective = ag.add(ag.add(l_llm, ag.scale(l_ctc, cfg.beta)), ag.scale(l_sed, cfg.mu))
    objective_value = objective.item()
    if not math.isfinite(objective_value):
        raise NumericalError(f"non-finite training objective at step {state.step}")
    # validates per-branch finiteness and records the combined value
    l_total = total_loss(l_llm.item(), l_ctc.item(), l_sed.item(), cfg.beta,
                         cfg.mu if state.phase == "B" else 0.0)

    objective.backward()
    grads = {}
    for name in system.store.trainable_names():
        g = tensors[name].grad
        grads[name] = g if g is not None else np.zeros_like(tensors[name].data)
    lr = lr_at(state.step, cfg)
    optimizer_step(system.store, grads, state.optim, lr)

    row = {"step": state.step, "l_llm": l_llm.item(), "l_ctc": l_ctc.item(),
           "l_sed": l_sed.item(), "l_total": l_total, "lr": lr}
    state.log.append(row)
    return row


def _sum(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ag.add(acc, t)
    return acc


def _curriculum_pool(corpus: list[Utterance], step: int, cfg: TrainConfig) -> list[Utterance]:
    """Length-graduated sampling pool for the early warm-up steps."""
    span = int(cfg.curriculum_frac * cfg.phase_a_steps)
    if span == 0 or step > span:
        return corpus
    cap = cfg.curriculum_tokens[0] if step <= span // 2 else cfg.curriculum_tokens[1]
    pool = [u for u in corpus if len(u.fluent_text) <= cap]
    return pool if pool else corpus


def train(system: System, corpus: list[Utterance], cfg: TrainConfig,
          progress=None) -> TrainState:
    """Run both phases to max_steps on a fresh state."""
    if not corpus:
        raise ValidationError("training corpus is empty")
    state = init_train_state(system, cfg)
    return resume_training(state, corpus, progress)


def resume_training(state: TrainState, corpus: list[Utterance], progress=None,
                    stop_at: int | None = None) -> TrainState:
    """Run to max_steps, or pause at `stop_at` without altering the schedule."""
    if not corpus:
        raise ValidationError("training corpus is empty")
    target = state.cfg.max_steps if stop_at is None else min(stop_at, state.cfg.max_steps)
    while state.step < target:
        row = train_step(state, corpus)
        if progress is not None:
            progress(row)
    return state


def log_to_csv(log: list[dict]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in log:
        lines.append(",".join(_fmt(row[c]) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))
