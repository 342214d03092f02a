"""Chunk sampling, augmentation and the teacher-forced training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .midi import N_PITCHES, NoteEvent, bar_boundaries
from .model import Transformer
from .optim import Adam, NonFiniteGradientError, clip_grad_norm
from .tokenizer import (
    NOTE_OFF_OFFSET,
    PAD,
    SHIFT_OFFSET,
    START,
    ConditionPair,
    bar_token_offsets,
    condition_tokens,
    encode,
)

log = logging.getLogger(__name__)

IGNORE = -100
CHUNK_LEN = 1216


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class SongData:
    """A tokenized song ready for chunk sampling."""

    name: str
    tokens: np.ndarray
    bar_offsets: np.ndarray
    condition: ConditionPair | None = None


def song_data(name, events: Sequence[NoteEvent], condition=None, tempo_map=None,
              timesig_map=None) -> SongData:
    tokens = encode(events)
    bars = bar_boundaries(events, tempo_map, timesig_map)
    offsets = bar_token_offsets(tokens, bars) if tokens else np.zeros(0, dtype=np.int64)
    return SongData(name, np.asarray(tokens, dtype=np.int64), np.asarray(offsets, dtype=np.int64), condition)


@dataclass
class TrainChunk:
    input: np.ndarray
    target: np.ndarray
    condition: ConditionPair | None
    bar_aligned: bool


def _make_chunk(seq: np.ndarray, n_prefix: int, length: int, condition, bar_aligned) -> TrainChunk:
    seq = seq[:length + 1]
    if len(seq) < length + 1:
        seq = np.concatenate([seq, np.full(length + 1 - len(seq), PAD, dtype=np.int64)])
    inp = seq[:-1].copy()
    tgt = seq[1:].copy()
    tgt[tgt == PAD] = IGNORE
    # control tokens inside the prefix are given, never predicted
    tgt[:max(n_prefix - 1, 0)] = IGNORE
    return TrainChunk(inp, tgt, condition, bar_aligned)


def sample_chunk(song: SongData, rng: np.random.Generator, length: int = CHUNK_LEN,
                 discrete_tokens: bool = False, bar_aligned: bool | None = None) -> TrainChunk:
    """Draw one training chunk.

    With probability 0.5 (unless ``bar_aligned`` forces the choice) the chunk
    starts on a random bar and gets ``<START>`` in front, preceded by the two
    condition tokens when ``discrete_tokens``. Otherwise it starts at a
    uniformly random token with no prefix.
    """
    toks = np.asarray(song.tokens, dtype=np.int64)
    if len(toks) == 0:
        raise ValueError(f"song {song.name!r} has no tokens")
    if bar_aligned is None:
        bar_aligned = bool(rng.random() < 0.5)
    if bar_aligned:
        bars = song.bar_offsets if len(song.bar_offsets) else np.zeros(1, dtype=np.int64)
        start = int(bars[rng.integers(len(bars))])
        prefix = [START]
        if discrete_tokens:
            if song.condition is None:
                raise ValueError(f"song {song.name!r} has no condition for discrete tokens")
            prefix = condition_tokens(song.condition) + prefix
    else:
        start = int(rng.integers(len(toks)))
        prefix = []
    seq = np.concatenate([np.asarray(prefix, dtype=np.int64), toks[start:start + length + 1]])
    return _make_chunk(seq, len(prefix), length, song.condition, bar_aligned)


def fixed_chunk(song: SongData, length: int = CHUNK_LEN, discrete_tokens: bool = False) -> TrainChunk:
    """The bar-aligned chunk from the beginning of the song."""
    prefix = [START]
    if discrete_tokens:
        prefix = condition_tokens(song.condition) + prefix
    seq = np.concatenate([np.asarray(prefix, dtype=np.int64), song.tokens[:length + 1]])
    return _make_chunk(seq, len(prefix), length, song.condition, True)


def transpose_augment(tokens, shift: int) -> np.ndarray:
    """Shift pitched instruments by ``shift`` semitones; drums are untouched.

    Notes pushed outside 21..108 are dropped (their on and off tokens both).
    """
    toks = np.asarray(tokens, dtype=np.int64)
    if shift == 0:
        return toks.copy()
    is_note = toks < SHIFT_OFFSET
    within = toks % NOTE_OFF_OFFSET
    inst = within // N_PITCHES
    pitch_idx = within % N_PITCHES
    moves = is_note & (inst != 0)
    new_idx = pitch_idx + shift
    keep = ~moves | ((new_idx >= 0) & (new_idx < N_PITCHES))
    out = np.where(moves, toks + shift, toks)
    return out[keep]


def random_transpose(tokens, rng: np.random.Generator) -> np.ndarray:
    return transpose_augment(tokens, int(rng.integers(-3, 4)))


@dataclass
class TrainSpec:
    lr: float = 2e-5
    lr_low: float = 2e-6
    batch_size: int = 4
    clip_norm: float = 1.0
    steps: int = 1000
    window: int = 1000  # steps per plateau window
    plateau_windows: int = 3
    plateau_tol: float = 1e-3
    augment: bool = True
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.lr_low <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class PlateauSchedule:
    """Drops the learning rate once when training loss stops improving.

    Losses are averaged per window; after at least ``n_windows`` windows, if
    the latest window mean is within ``tol`` (relative) of the mean
    ``n_windows - 1`` windows earlier, the rate drops to ``low`` for good.
    """

    def __init__(self, high, low, window=1000, n_windows=3, tol=1e-3):
        self.lr = high
        self.low = low
        self.window = window
        self.n_windows = n_windows
        self.tol = tol
        self.means: list[float] = []
        self._acc: list[float] = []
        self.dropped_at: int | None = None

    def update(self, step: int, loss: float) -> float:
        self._acc.append(loss)
        if len(self._acc) == self.window:
            self.means.append(float(np.mean(self._acc)))
            self._acc = []
            if self.dropped_at is None and len(self.means) >= self.n_windows:
                old, new = self.means[-self.n_windows], self.means[-1]
                if (old - new) < self.tol * abs(old):
                    self.lr = self.low
                    self.dropped_at = step
        return self.lr


@dataclass
class FitResult:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    checkpoint: str | None = None


def _batch_arrays(chunks: Sequence[TrainChunk]):
    inp = np.stack([c.input for c in chunks])
    tgt = np.stack([c.target for c in chunks])
    cond = None
    if all(c.condition is not None for c in chunks):
        cond = np.stack([c.condition.as_array() for c in chunks])
    return inp, tgt, cond


def lm_loss(model: Transformer, chunks: Sequence[TrainChunk]) -> T.Tensor:
    inp, tgt, cond = _batch_arrays(chunks)
    needs = model.cfg.variant in ("continuous-token", "continuous-concatenated")
    logits = model.forward(inp, cond if needs else None)
    return T.cross_entropy(logits, tgt, ignore_index=IGNORE)


def _save(model, path, step):
    if path:
        model.save(path, extra={"step": step})
        return path
    return None


def train_loop(model, batch_fn: Callable[[np.random.Generator], object],
               loss_fn: Callable[[object, object], T.Tensor], spec: TrainSpec,
               callback: Callable[[int, object], bool] | None = None) -> FitResult:
    """Seeded optimization loop shared by generators and the regressor.

    ``batch_fn(rng)`` draws a batch, ``loss_fn(model, batch)`` builds the
    loss graph. ``callback(step, model)`` returning True stops training.
    """
    rng = np.random.default_rng(spec.seed)
    opt = Adam(model.params, lr=spec.lr)
    sched = PlateauSchedule(spec.lr, spec.lr_low, spec.window, spec.plateau_windows, spec.plateau_tol)
    result = FitResult()
    model.train()
    logf = open(spec.log_path, "a") if spec.log_path else None
    try:
        for step in range(spec.steps):
            t0 = time.perf_counter()
            batch = batch_fn(rng)
            opt.zero_grad()
            loss = loss_fn(model, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                path = _save(model, spec.checkpoint_path, step)
                raise TrainingAborted(f"non-finite loss at step {step}", path)
            loss.backward()
            names = [k for k, p in model.params.items() if p.grad is not None]
            grads, _ = clip_grad_norm([model.params[k].grad for k in names], spec.clip_norm)
            try:
                opt.step(dict(zip(names, grads)))
            except NonFiniteGradientError as exc:
                path = _save(model, spec.checkpoint_path, step)
                raise TrainingAborted(str(exc), path) from exc
            result.losses.append(value)
            result.lrs.append(opt.lr)
            opt.lr = sched.update(step, value)
            result.steps = step + 1
            if logf:
                n_tok = getattr(batch, "n_tokens", None) or 0
                dt = time.perf_counter() - t0
                logf.write(json.dumps({"step": step, "loss": value, "lr": result.lrs[-1],
                                       "tokens_per_s": n_tok / dt if dt > 0 else 0.0}) + "\n")
                logf.flush()
            if spec.checkpoint_every and (step + 1) % spec.checkpoint_every == 0:
                result.checkpoint = _save(model, spec.checkpoint_path, step + 1)
            if callback is not None and callback(step, model):
                result.stopped_early = True
                break
    finally:
        if logf:
            logf.close()
        model.eval()
    if spec.checkpoint_path:
        result.checkpoint = _save(model, spec.checkpoint_path, result.steps)
    return result


class _Batch(list):
    @property
    def n_tokens(self):
        return sum(int((c.target != IGNORE).sum()) for c in self)


def fit(model: Transformer, data: Sequence[SongData] | Sequence[TrainChunk], spec: TrainSpec,
        callback=None) -> FitResult:
    """Train a generator on songs (chunks drawn per step) or on a fixed chunk list.

    Fixed chunks are cycled in order, ``batch_size`` at a time.
    """
    if not data:
        raise ValueError("no training data")
    discrete = model.cfg.variant == "discrete-token"
    length = model.cfg.max_len
    if model.cfg.conditional and isinstance(data[0], SongData):
        missing = [s.name for s in data if s.condition is None]
        if missing:
            raise ValueError(f"{len(missing)} songs lack conditions, e.g. {missing[0]}")
    fixed = isinstance(data[0], TrainChunk)
    cursor = [0]

    def batch_fn(rng):
        if fixed:
            out = _Batch()
            for _ in range(spec.batch_size):
                out.append(data[cursor[0] % len(data)])
                cursor[0] += 1
            return out
        out = _Batch()
        for _ in range(spec.batch_size):
            song = data[int(rng.integers(len(data)))]
            if spec.augment:
                shift = int(rng.integers(-3, 4))
                if shift:
                    song = SongData(song.name, transpose_augment(song.tokens, shift),
                                    _shifted_bars(song, shift), song.condition)
            out.append(sample_chunk(song, rng, length, discrete))
        return out

    return train_loop(model, batch_fn, lm_loss, spec, callback)


def _shifted_bars(song: SongData, shift: int) -> np.ndarray:
    """Bar offsets after transposition removed some tokens."""
    toks = np.asarray(song.tokens, dtype=np.int64)
    within = toks % NOTE_OFF_OFFSET
    moves = (toks < SHIFT_OFFSET) & (within // N_PITCHES != 0)
    new_idx = within % N_PITCHES + shift
    dropped = moves & ((new_idx < 0) | (new_idx >= N_PITCHES))
    if not dropped.any():
        return song.bar_offsets
    before = np.concatenate([[0], np.cumsum(dropped)])
    out = song.bar_offsets - before[song.bar_offsets]
    return np.unique(out)


def teacher_forced_accuracy(model: Transformer, chunks: Sequence[TrainChunk]) -> float:
    """Top-1 next-token accuracy over non-ignored targets, in eval mode."""
    was = model.training
    model.eval()
    hits = total = 0
    with T.no_grad():
        for c in chunks:
            inp, tgt, cond = _batch_arrays([c])
            needs = model.cfg.variant in ("continuous-token", "continuous-concatenated")
            logits = model.forward(inp, cond if needs else None).data[0]
            valid = tgt[0] != IGNORE
            hits += int((logits.argmax(-1)[valid] == tgt[0][valid]).sum())
            total += int(valid.sum())
    model.train(was)
    return hits / max(total, 1)


__all__ = [
    "CHUNK_LEN", "IGNORE", "SongData", "TrainChunk", "TrainSpec", "TrainingAborted", "PlateauSchedule",
    "FitResult", "song_data", "sample_chunk", "fixed_chunk", "transpose_augment", "random_transpose",
    "fit", "train_loop", "lm_loss", "teacher_forced_accuracy",
]

