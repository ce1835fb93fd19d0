"""Synthetic stuttered-utterance corpus: generation, serialization, loading.

Each utterance is a frame matrix (token prototypes + Gaussian noise), a
fluent transcript, a disfluent transcript carrying single-character event
markers, and a 5-way multi-hot event label. Generation is a pure function
of the spec: utterance i draws from its own PCG64 stream derived from
(seed, i), so ordering and parallelism cannot change the output.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusParseError, SchemaError, ValidationError

# Event order is fixed everywhere: prolongation, block, sound repetition,
# word/phrase repetition, interjection.
EVENT_ORDER = ("/p", "/b", "/r", "[]", "/i")
N_EVENT_TYPES = 5

SEVERITIES = ("mild", "moderate", "severe")
SCENARIOS = ("conversation", "command")

# Single reserved marker characters in the disfluent transcript.
MARK_PROLONG = "~"   # suffix on the prolonged character
MARK_BLOCK = "#"     # silent interruption before the character
MARK_SOUND_REP = "^" # partial-onset repetition before the character
MARK_FILLER = "@"    # inserted filler before the character
BRACKET_OPEN, BRACKET_CLOSE = "[", "]"
MARKER_CHARS = MARK_PROLONG + MARK_BLOCK + MARK_SOUND_REP + MARK_FILLER

# Token counts per scenario: short commands vs long conversational turns.
COMMAND_TOKENS = (3, 6)
CONVERSATION_TOKENS = (10, 25)

# Severity from realized event density (injected events / fluent tokens).
MILD_BELOW = 0.07
SEVERE_ABOVE = 0.15

JSONL_FIELDS = ("id", "frames", "fluent_text", "disfluent_text", "events", "severity", "scenario")


@dataclass
class Utterance:
    id: str
    frames: np.ndarray          # (T, D_in) float32
    fluent_text: str
    disfluent_text: str
    events: list[int]           # multi-hot in EVENT_ORDER
    severity: str
    scenario: str


@dataclass
class CorpusSpec:
    n_utterances: int = 2500
    alphabet_size: int = 16
    frames_per_token: tuple[int, int] = (2, 4)
    feature_dim: int = 8
    severity_mix: tuple[float, float, float] = (0.4, 0.35, 0.25)
    scenario_mix: tuple[float, float] = (0.5, 0.5)
    event_rate_by_severity: dict[str, float] = field(
        default_factory=lambda: {"mild": 0.04, "moderate": 0.11, "severe": 0.25})
    event_type_mix: tuple[float, ...] = (0.28, 0.06, 0.20, 0.25, 0.21)
    noise_sigma: float = 0.1
    # articulation offset added to /p, /r, and [] event frames: prolonged,
    # partially articulated, and re-attempted sounds differ in content, not
    # just duration. 0 disables. Blocks and fillers carry no offset; their
    # prototypes (silence, filler) are already distinct.
    event_color_scale: float = 0.6
    # utterance-wide delivery offset per event type present (carryover
    # tension): disfluent utterances differ globally, not only at the event.
    # Blocks leave a much weaker global trace (see block_tension_factor),
    # keeping the rarest class the hardest one.
    tension_scale: float = 1.0
    block_tension_factor: float = 0.08
    seed: int = 20250401

    def validate(self) -> None:
        if self.n_utterances <= 0:
            raise ValidationError("n_utterances must be positive")
        if not 1 <= self.alphabet_size <= len(string.ascii_uppercase):
            raise ValidationError("alphabet_size must be in 1..26")
        lo, hi = self.frames_per_token
        if not (1 <= lo <= hi):
            raise ValidationError("frames_per_token must be a range with 1 <= lo <= hi")
        if self.feature_dim <= 0:
            raise ValidationError("feature_dim must be positive")
        _check_probs("severity_mix", self.severity_mix, 3)
        _check_probs("scenario_mix", self.scenario_mix, 2)
        _check_probs("event_type_mix", self.event_type_mix, N_EVENT_TYPES)
        if set(self.event_rate_by_severity) != set(SEVERITIES):
            raise ValidationError("event_rate_by_severity must have keys mild/moderate/severe")
        for sev, rate in self.event_rate_by_severity.items():
            if not 0.0 <= rate <= 1.0:
                raise ValidationError(f"event_rate_by_severity[{sev}] must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        if self.event_color_scale < 0:
            raise ValidationError("event_color_scale must be non-negative")
        if self.tension_scale < 0:
            raise ValidationError("tension_scale must be non-negative")
        if self.block_tension_factor < 0:
            raise ValidationError("block_tension_factor must be non-negative")
        if not isinstance(self.seed, int):
            raise ValidationError("seed must be an integer")

    @property
    def alphabet(self) -> str:
        # uppercase keeps transcript characters visually and tokenwise apart
        # from the (lowercase) prompt text
        return string.ascii_uppercase[: self.alphabet_size]


def _check_probs(name: str, probs, n: int) -> None:
    if len(probs) != n:
        raise ValidationError(f"{name} must have {n} entries")
    if any(p < 0 for p in probs):
        raise ValidationError(f"{name} entries must be non-negative")
    if abs(sum(probs) - 1.0) > 1e-9:
        raise ValidationError(f"{name} must sum to 1 (got {sum(probs)})")


@dataclass
class EventDraw:
    """One injected event: type plus its pre-drawn size parameter.

    `factor` multiplies the frame run for /p; `length` is the inserted frame
    count for /b and /i and the onset-copy count for /r. [] needs neither.
    """

    kind: str
    factor: int | None = None
    length: int | None = None


class TokenAcoustics:
    """Fixed per-token prototype vectors; a frame is prototype + noise.

    Prototypes are corpus-level constants drawn once from the corpus seed.
    Row `alphabet_size` is the filler prototype; silence is the zero vector.
    """

    def __init__(self, spec: CorpusSpec):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0])))
        self.prototypes = rng.normal(0.0, 1.0, size=(spec.alphabet_size + 1, spec.feature_dim))
        self.alphabet = spec.alphabet
        self.run_range = spec.frames_per_token
        self.sigma = spec.noise_sigma
        self.feature_dim = spec.feature_dim
        self.colors = {}
        for kind in ("/p", "/r", "[]"):
            direction = rng.normal(0.0, 1.0, size=spec.feature_dim)
            direction /= np.linalg.norm(direction)
            self.colors[kind] = direction * spec.event_color_scale
        self.tension = np.zeros((N_EVENT_TYPES, spec.feature_dim))
        for k in range(N_EVENT_TYPES):
            direction = rng.normal(0.0, 1.0, size=spec.feature_dim)
            direction /= np.linalg.norm(direction)
            factor = spec.block_tension_factor if EVENT_ORDER[k] == "/b" else 1.0
            self.tension[k] = direction * spec.tension_scale * factor

    def proto(self, token: str) -> np.ndarray:
        return self.prototypes[self.alphabet.index(token)]

    @property
    def filler(self) -> np.ndarray:
        return self.prototypes[-1]

    def emit(self, proto: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        return proto[None, :] + rng.normal(0.0, self.sigma, size=(n, self.feature_dim))

    def draw_run(self, rng: np.random.Generator) -> int:
        lo, hi = self.run_range
        return int(rng.integers(lo, hi + 1))


def apply_stutter_events(fluent_tokens: list[str], draws: list[EventDraw | None],
                         rng: np.random.Generator, acoustics: TokenAcoustics,
                         ) -> tuple[np.ndarray, str, list[int]]:
    """Expand fluent tokens into frames and a marked disfluent transcript.

    Per token: /b and /i insert silence or filler frames (plus marker) before
    it, /r prepends copies of the token's onset frame (marker only), /p
    multiplies the token's frame run, and [] re-emits the token after itself
    wrapped in brackets.
    """
    if not fluent_tokens:
        raise ValidationError("fluent_tokens must be non-empty")
    rows: list[np.ndarray] = []
    text: list[str] = []
    events = [0] * N_EVENT_TYPES
    for token, draw in zip(fluent_tokens, draws):
        proto = acoustics.proto(token)
        run = acoustics.draw_run(rng)
        if draw is not None:
            events[EVENT_ORDER.index(draw.kind)] = 1
        if draw is not None and draw.kind == "/b":
            rows.append(acoustics.emit(np.zeros(acoustics.feature_dim), draw.length, rng))
            text.append(MARK_BLOCK)
        if draw is not None and draw.kind == "/i":
            rows.append(acoustics.emit(acoustics.filler, draw.length, rng))
            text.append(MARK_FILLER)
        if draw is not None and draw.kind == "/r":
            onset = acoustics.emit(proto + acoustics.colors["/r"], 1, rng)
            rows.extend([onset] * draw.length)
            text.append(MARK_SOUND_REP)
        if draw is not None and draw.kind == "/p":
            rows.append(acoustics.emit(proto + acoustics.colors["/p"], run * draw.factor, rng))
            text.append(token + MARK_PROLONG)
        else:
            rows.append(acoustics.emit(proto, run, rng))
            text.append(token)
        if draw is not None and draw.kind == "[]":
            rows.append(acoustics.emit(proto + acoustics.colors["[]"], run, rng))
            text.append(BRACKET_OPEN + token + BRACKET_CLOSE)
    frames = np.concatenate(rows, axis=0)
    return frames, "".join(text), events


def strip_markers(disfluent_text: str) -> str:
    """Remove event markers, bracketed repetitions, and filler characters."""
    s = re.sub(r"\[[^\]]*\]", "", disfluent_text)
    return s.translate({ord(c): None for c in MARKER_CHARS})


def count_events_from_markers(disfluent_text: str) -> list[int]:
    """Independent per-type event counts recovered from the markers alone."""
    return [
        disfluent_text.count(MARK_PROLONG),
        disfluent_text.count(MARK_BLOCK),
        disfluent_text.count(MARK_SOUND_REP),
        len(re.findall(r"\[[^\]]*\]", disfluent_text)),
        disfluent_text.count(MARK_FILLER),
    ]


def severity_from_density(density: float) -> str:
    if density < MILD_BELOW:
        return "mild"
    if density <= SEVERE_ABOVE:
        return "moderate"
    return "severe"


def _utterance_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1, index])))


def generate_utterance(spec: CorpusSpec, acoustics: TokenAcoustics, index: int) -> Utterance:
    rng = _utterance_stream(spec.seed, index)
    scenario = SCENARIOS[_pick(rng, spec.scenario_mix)]
    lo, hi = CONVERSATION_TOKENS if scenario == "conversation" else COMMAND_TOKENS
    n_tokens = int(rng.integers(lo, hi + 1))
    tokens = [spec.alphabet[int(k)] for k in rng.integers(0, spec.alphabet_size, size=n_tokens)]
    drawn_severity = SEVERITIES[_pick(rng, spec.severity_mix)]
    rate = spec.event_rate_by_severity[drawn_severity]
    draws: list[EventDraw | None] = []
    for _ in range(n_tokens):
        if rng.random() >= rate:
            draws.append(None)
            continue
        kind = EVENT_ORDER[_pick(rng, spec.event_type_mix)]
        if kind == "/p":
            draws.append(EventDraw(kind, factor=int(rng.integers(2, 5))))
        elif kind in ("/b", "/i"):
            draws.append(EventDraw(kind, length=int(rng.integers(2, 5))))
        elif kind == "/r":
            draws.append(EventDraw(kind, length=int(rng.integers(1, 3))))
        else:
            draws.append(EventDraw(kind))
    frames, disfluent, events = apply_stutter_events(tokens, draws, rng, acoustics)
    if any(events):
        # carryover tension: event types present color the whole delivery
        frames = frames + acoustics.tension[np.asarray(events, dtype=bool)].sum(axis=0)
    density = sum(1 for d in draws if d is not None) / n_tokens
    return Utterance(
        id=f"utt-{index:06d}",
        frames=frames.astype(np.float32),
        fluent_text="".join(tokens),
        disfluent_text=disfluent,
        events=events,
        severity=severity_from_density(density),
        scenario=scenario,
    )


def generate_corpus(spec: CorpusSpec) -> list[Utterance]:
    """Deterministic corpus generation; per-utterance RNG streams."""
    spec.validate()
    acoustics = TokenAcoustics(spec)
    return [generate_utterance(spec, acoustics, i) for i in range(spec.n_utterances)]


def _pick(rng: np.random.Generator, probs) -> int:
    """Index draw from a probability vector using one uniform variate."""
    u = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


# ---------------------------------------------------------------------------
# JSON Lines serialization


def utterance_to_record(utt: Utterance) -> dict:
    return {
        "id": utt.id,
        "frames": [[float(x) for x in row] for row in utt.frames],
        "fluent_text": utt.fluent_text,
        "disfluent_text": utt.disfluent_text,
        "events": list(utt.events),
        "severity": utt.severity,
        "scenario": utt.scenario,
    }


def record_to_utterance(rec: dict) -> Utterance:
    if not isinstance(rec, dict):
        raise SchemaError("record must be a JSON object")
    missing = [f for f in JSONL_FIELDS if f not in rec]
    if missing:
        raise SchemaError(f"missing field {missing[0]!r}")
    unknown = [k for k in rec if k not in JSONL_FIELDS]
    if unknown:
        raise SchemaError(f"unknown field {unknown[0]!r}")
    events = rec["events"]
    if not isinstance(events, list) or len(events) != N_EVENT_TYPES:
        raise SchemaError("events must have 5 entries")
    if any(e not in (0, 1) for e in events):
        raise SchemaError("events entries must be 0 or 1")
    if rec["severity"] not in SEVERITIES:
        raise SchemaError(f"severity must be one of {SEVERITIES}")
    if rec["scenario"] not in SCENARIOS:
        raise SchemaError(f"scenario must be one of {SCENARIOS}")
    frames = rec["frames"]
    if not frames or any(len(row) != len(frames[0]) for row in frames):
        raise SchemaError("frames must be a non-empty rectangular matrix")
    return Utterance(
        id=str(rec["id"]),
        frames=np.asarray(frames, dtype=np.float32),
        fluent_text=str(rec["fluent_text"]),
        disfluent_text=str(rec["disfluent_text"]),
        events=[int(e) for e in events],
        severity=rec["severity"],
        scenario=rec["scenario"],
    )


def write_jsonl(corpus: list[Utterance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in corpus:
            fh.write(json.dumps(utterance_to_record(utt)) + "\n")


def read_jsonl(path) -> list[Utterance]:
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(line_no, f"malformed JSON ({exc.msg})") from exc
            try:
                corpus.append(record_to_utterance(rec))
            except SchemaError as exc:
                raise CorpusParseError(line_no, str(exc)) from exc
    return corpus
