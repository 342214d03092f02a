"""Autoregressive sampling: nucleus filtering, temperature boost, sliding window, condition schedules."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write_bytes
from .midi import write_midi
from .model import ConditionError, Transformer
from .tokenizer import START, ConditionPair, condition_tokens, decode


@dataclass(frozen=True)
class SamplerConfig:
    p: float = 0.7
    temperature: float = 1.2
    min_nucleus: int = 3
    temp_boost: float = 1.1
    max_tokens: int = 4096
    seed: int = 0
    music_only: bool = True  # never sample <START>, <PAD> or condition tokens

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError("p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_tokens < 0:
            raise ValueError("max_tokens must be >= 0")


def effective_temperature(cfg: SamplerConfig, prev_nucleus_size: int | None) -> float:
    if prev_nucleus_size is not None and prev_nucleus_size < cfg.min_nucleus:
        return cfg.temperature * cfg.temp_boost
    return cfg.temperature


def nucleus(probs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and renormalized probabilities of the top-p nucleus.

    Ids are sorted by descending probability, ties by ascending id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    reach = np.nonzero(cum >= p * cum[-1])[0]
    k = int(reach[0]) + 1 if len(reach) else len(order)
    ids = order[:k]
    kept = probs[ids]
    return ids, kept / kept.sum()


def nucleus_sample(logits, cfg: SamplerConfig, prev_nucleus_size: int | None,
                   rng: np.random.Generator) -> tuple[int, int]:
    """Sample one token; returns (token id, nucleus size)."""
    z = np.asarray(logits, dtype=np.float64) / effective_temperature(cfg, prev_nucleus_size)
    z = z - np.max(z)
    probs = np.exp(z)
    probs /= probs.sum()
    ids, q = nucleus(probs, cfg.p)
    u = rng.random()
    j = min(int(np.searchsorted(np.cumsum(q), u, side="right")), len(ids) - 1)
    return int(ids[j]), len(ids)


class ConditionSchedule:
    """Piecewise condition over token indices, step or linear between breakpoints."""

    def __init__(self, breakpoints: Sequence[tuple[int, float, float]], mode: str = "step"):
        if not breakpoints:
            raise ValueError("schedule needs at least one breakpoint")
        if mode not in ("step", "linear"):
            raise ValueError("mode must be 'step' or 'linear'")
        pts = [(int(t), float(v), float(a)) for t, v, a in breakpoints]
        if pts[0][0] != 0:
            raise ValueError("first breakpoint must be at token 0")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ValueError("breakpoint token indices must be strictly increasing")
        for _, v, a in pts:
            ConditionPair(v, a)
        self.points = pts
        self.mode = mode
        self._t = np.array([p[0] for p in pts], dtype=np.float64)
        self._v = np.array([p[1] for p in pts])
        self._a = np.array([p[2] for p in pts])

    @classmethod
    def constant(cls, valence: float, arousal: float) -> "ConditionSchedule":
        return cls([(0, valence, arousal)])

    @classmethod
    def from_json(cls, obj) -> "ConditionSchedule":
        """Accepts a bare list of breakpoints or ``{"mode": ..., "breakpoints": [...]}``."""
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        mode = "step"
        if isinstance(obj, dict):
            mode = obj.get("mode", "step")
            obj = obj.get("breakpoints", obj.get("points"))
            if obj is None:
                raise ValueError("schedule object needs a 'breakpoints' list")
        return cls([(d["token"], d["valence"], d["arousal"]) for d in obj], mode)

    @classmethod
    def load(cls, path) -> "ConditionSchedule":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def at(self, index: int) -> ConditionPair:
        if self.mode == "step" or len(self.points) == 1:
            k = int(np.searchsorted(self._t, index, side="right")) - 1
            return ConditionPair(float(self._v[k]), float(self._a[k]))
        v = float(np.interp(index, self._t, self._v))
        a = float(np.interp(index, self._t, self._a))
        return ConditionPair(v, a)


def _as_schedule(s) -> ConditionSchedule | None:
    if s is None or isinstance(s, ConditionSchedule):
        return s
    if isinstance(s, ConditionPair):
        return ConditionSchedule.constant(s.valence, s.arousal)
    v, a = s
    return ConditionSchedule.constant(v, a)


def seed_tokens(model: Transformer, schedule: ConditionSchedule | None) -> list[int]:
    if model.cfg.variant == "discrete-token":
        return condition_tokens(schedule.at(0)) + [START]
    return [START]


def generate_batch(model: Transformer, schedules: Sequence, cfg: SamplerConfig,
                   primer: Sequence[int] | None = None,
                   sample_ids: Sequence[int] | None = None) -> list[list[int]]:
    """Generate one sequence per schedule (``None`` entries for vanilla), in lockstep.

    Sample ``i`` draws from ``default_rng([cfg.seed, sample_ids[i]])`` (ids
    default to 0..B-1), so each output depends only on its id, not on the
    batch it ran in.
    """
    scheds = [_as_schedule(s) for s in schedules]
    if not scheds:
        return []
    cond_model = model.cfg.conditional
    for s in scheds:
        if cond_model and s is None:
            raise ConditionError(f"{model.cfg.variant} model needs a condition schedule")
        if not cond_model and s is not None:
            raise ConditionError("vanilla model takes no condition")
    continuous = model.cfg.variant in ("continuous-token", "continuous-concatenated")
    L = model.cfg.max_len
    B = len(scheds)
    ids = range(B) if sample_ids is None else sample_ids
    if len(ids) != B:
        raise ValueError("one sample id per schedule")
    rngs = [np.random.default_rng([cfg.seed, int(i)]) for i in ids]
    prefix = [seed_tokens(model, s) + list(primer or []) for s in scheds]
    if len({len(p) for p in prefix}) != 1:
        raise ValueError("all sequences in a batch need equal-length seeds")
    n0 = len(prefix[0])
    seqs = np.zeros((B, n0 + cfg.max_tokens), dtype=np.int64)
    seqs[:, :n0] = prefix
    prev = [None] * B
    ban = np.zeros(model.cfg.vocab_size, dtype=bool)
    if cfg.music_only:
        ban[START:] = True
    model.eval()
    with T.no_grad():
        for step in range(cfg.max_tokens):
            end = n0 + step
            window = seqs[:, max(0, end - L):end]
            cond = None
            if continuous:
                cond = np.stack([s.at(step).as_array() for s in scheds])
            logits = model.forward(window, cond, last_only=True).data[:, -1, :]
            logits = np.where(ban, -np.inf, logits.astype(np.float64))
            for b in range(B):
                tok, prev[b] = nucleus_sample(logits[b], cfg, prev[b], rngs[b])
                seqs[b, end] = tok
    return [row[n0:].tolist() for row in seqs]


def generate(model: Transformer, schedule=None, cfg: SamplerConfig | None = None,
             primer: Sequence[int] | None = None) -> list[int]:
    """``cfg.max_tokens`` new tokens (the seed prefix is not included)."""
    cfg = cfg or SamplerConfig()
    return generate_batch(model, [schedule], cfg, primer)[0]


def write_outputs(tokens: Sequence[int], out_prefix) -> tuple[str, str]:
    """Token file (one id per line) and a rendered MIDI file."""
    out_prefix = os.fspath(out_prefix)
    tok_path, mid_path = out_prefix + ".tokens", out_prefix + ".mid"
    atomic_write_bytes(tok_path, "".join(f"{int(t)}\n" for t in tokens).encode())
    atomic_write_bytes(mid_path, write_midi(decode(tokens)))
    return tok_path, mid_path
