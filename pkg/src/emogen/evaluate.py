"""Held-out prediction metrics and regression-based emotion error of generated samples."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write_bytes
from .generate import SamplerConfig, generate_batch
from .model import EmotionRegressor, RegressorConfig, Transformer
from .tokenizer import PAD, START, ConditionPair, condition_tokens, strip_non_music
from .training import IGNORE, SongData, TrainSpec, train_loop

GRID_VALUES = (-0.8, -0.4, 0.0, 0.4, 0.8)
WINDOW = 1216
STRIDE = 608


@dataclass
class PredictionMetrics:
    nll: float
    top1: float
    top5: float
    n_chunks: int
    n_tokens: int

    def to_json(self) -> dict:
        return self.__dict__.copy()


def prediction_chunks(song: SongData, length: int, discrete_tokens: bool = False):
    """Sequential non-overlapping (input, target) chunks of ``[START] + song``.

    For discrete-token models the condition tokens lead the sequence and
    their targets are ignored.
    """
    prefix = [START]
    if discrete_tokens:
        prefix = condition_tokens(song.condition) + prefix
    seq = np.concatenate([np.asarray(prefix, dtype=np.int64), np.asarray(song.tokens, dtype=np.int64)])
    inp_all = seq[:-1]
    tgt_all = seq[1:].copy()
    tgt_all[:len(prefix) - 1] = IGNORE
    out = []
    for s in range(0, len(inp_all), length):
        inp = inp_all[s:s + length]
        tgt = tgt_all[s:s + length]
        n = len(inp)
        if n < length:
            inp = np.concatenate([inp, np.full(length - n, PAD, dtype=np.int64)])
            tgt = np.concatenate([tgt, np.full(length - n, IGNORE, dtype=np.int64)])
        out.append((inp, tgt))
    return out


def topn_hits(logits: np.ndarray, targets: np.ndarray, n: int) -> np.ndarray:
    """Whether each target ranks within the n highest logits, ties broken by lower id."""
    t_logit = np.take_along_axis(logits, targets[:, None], axis=1)
    ids = np.arange(logits.shape[1])[None, :]
    above = (logits > t_logit) | ((logits == t_logit) & (ids < targets[:, None]))
    return above.sum(axis=1) < n


def eval_prediction(model: Transformer, songs: Sequence[SongData], batch_size: int = 4) -> PredictionMetrics:
    if not songs:
        raise ValueError("empty test set")
    L = model.cfg.max_len
    discrete = model.cfg.variant == "discrete-token"
    continuous = model.cfg.variant in ("continuous-token", "continuous-concatenated")
    items = []
    for s in songs:
        for inp, tgt in prediction_chunks(s, L, discrete):
            items.append((inp, tgt, s.condition))
    nll = 0.0
    hit1 = hit5 = count = 0
    model.eval()
    with T.no_grad():
        for b in range(0, len(items), batch_size):
            group = items[b:b + batch_size]
            inp = np.stack([g[0] for g in group])
            tgt = np.stack([g[1] for g in group]).reshape(-1)
            cond = np.stack([g[2].as_array() for g in group]) if continuous else None
            logits = model.forward(inp, cond).data.astype(np.float64)
            logits = logits.reshape(-1, logits.shape[-1])
            valid = tgt != IGNORE
            z, t = logits[valid], tgt[valid]
            m = z.max(axis=1, keepdims=True)
            lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
            nll += float((lse - z[np.arange(len(t)), t]).sum())
            hit1 += int(topn_hits(z, t, 1).sum())
            hit5 += int(topn_hits(z, t, 5).sum())
            count += len(t)
    count = max(count, 1)
    return PredictionMetrics(nll / count, hit1 / count, hit5 / count, len(items), count)


# ------------------------------------------------------------ regressor


def window_starts(n: int, window: int = WINDOW, stride: int = STRIDE) -> list[int]:
    """Window starts with the given stride plus, if needed, one aligned to the end."""
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return starts


def regressor_batch(songs: Sequence[SongData], rng: np.random.Generator, batch_size: int, length: int):
    inp = np.full((batch_size, length), PAD, dtype=np.int64)
    tgt = np.zeros((batch_size, 2))
    for i in range(batch_size):
        s = songs[int(rng.integers(len(songs)))]
        toks = strip_non_music(s.tokens)
        start = int(rng.integers(max(1, len(toks) - length + 1)))
        w = toks[start:start + length]
        inp[i, :len(w)] = w
        tgt[i] = s.condition.as_array()
    return inp, tgt


def regressor_loss(model: EmotionRegressor, batch) -> T.Tensor:
    inp, tgt = batch
    return T.mse(model.forward(inp), tgt)


def train_regressor(songs: Sequence[SongData], cfg: RegressorConfig | None = None,
                    spec: TrainSpec | None = None, seed: int = 0, callback=None):
    """Fit an emotion regressor on labeled songs; returns (model, FitResult)."""
    cfg = cfg or RegressorConfig()
    spec = spec or TrainSpec(seed=seed)
    songs = [s for s in songs if s.condition is not None and len(s.tokens)]
    if not songs:
        raise ValueError("no labeled songs")
    model = EmotionRegressor(cfg, seed=seed)
    result = train_loop(model, lambda rng: regressor_batch(songs, rng, spec.batch_size, cfg.max_len),
                        regressor_loss, spec, callback)
    return model, result


def _predict_windows(regressor, windows: list[list[int]], length: int) -> np.ndarray:
    if isinstance(regressor, EmotionRegressor):
        inp = np.full((len(windows), length), PAD, dtype=np.int64)
        for i, w in enumerate(windows):
            inp[i, :len(w)] = w
        regressor.eval()
        with T.no_grad():
            return np.asarray(regressor.forward(inp).data, dtype=np.float64)
    return np.asarray(regressor(windows), dtype=np.float64).reshape(len(windows), 2)


def predict_emotion(regressor, tokens: Sequence[int], window: int | None = None,
                    stride: int | None = None) -> ConditionPair:
    """Average of per-window predictions, clamped to [-1, 1].

    ``regressor`` is an ``EmotionRegressor`` or any callable mapping a list of
    token windows to an (n, 2) array.
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("no tokens to score")
    if window is None:
        window = regressor.cfg.max_len if isinstance(regressor, EmotionRegressor) else WINDOW
    stride = stride or window // 2
    windows = [tokens[s:s + window] for s in window_starts(len(tokens), window, stride)]
    v, a = np.clip(_predict_windows(regressor, windows, window).mean(axis=0), -1.0, 1.0)
    return ConditionPair(float(v), float(a))


def emotion_error(pred: ConditionPair, target: ConditionPair) -> float:
    return (abs(pred.valence - target.valence) + abs(pred.arousal - target.arousal)) / 2.0


@dataclass
class GridConfig:
    n_samples: int = 8
    values: tuple = GRID_VALUES
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    batch_size: int = 8
    window: int | None = None


def inference_error_grid(generators: Mapping[str, Transformer], regressor, cfg: GridConfig | None = None,
                         generate_fn: Callable = generate_batch) -> dict:
    """Emotion error for every (valence, arousal) grid pair and model.

    Samples are stripped of non-music tokens before scoring. Each sample has
    a fixed id (pair index * n_samples + k) so results do not depend on
    batching.
    """
    cfg = cfg or GridConfig()
    pairs = [ConditionPair(v, a) for v in cfg.values for a in cfg.values]
    report = {}
    for name, model in generators.items():
        if not model.cfg.conditional:
            raise ValueError(f"{name}: grid evaluation needs a conditional model")
        jobs = [(pi, k) for pi in range(len(pairs)) for k in range(cfg.n_samples)]
        errors = np.zeros((len(pairs), cfg.n_samples))
        for b in range(0, len(jobs), cfg.batch_size):
            group = jobs[b:b + cfg.batch_size]
            samples = generate_fn(model, [pairs[pi] for pi, _ in group], cfg.sampler,
                                  sample_ids=[pi * cfg.n_samples + k for pi, k in group])
            for (pi, k), toks in zip(group, samples):
                music = strip_non_music(toks)
                pred = predict_emotion(regressor, music or [0], cfg.window)
                errors[pi, k] = emotion_error(pred, pairs[pi])
        per_pair = [{"valence": p.valence, "arousal": p.arousal, "error": float(errors[i].mean()),
                     "samples": errors[i].tolist()} for i, p in enumerate(pairs)]
        report[name] = {"per_pair": per_pair, "mean_error": float(errors.mean())}
    return report


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "valence", "arousal", "error"])
    for name, r in report.items():
        for row in r["per_pair"]:
            w.writerow([name, row["valence"], row["arousal"], f"{row['error']:.6f}"])
    return buf.getvalue()


def write_report(report: dict, out_prefix) -> tuple[str, str]:
    jpath, cpath = f"{out_prefix}.json", f"{out_prefix}.csv"
    atomic_write_bytes(jpath, json.dumps(report, indent=2, sort_keys=True).encode())
    atomic_write_bytes(cpath, report_csv(report).encode())
    return jpath, cpath


__all__ = [
    "PredictionMetrics", "GridConfig", "prediction_chunks", "topn_hits", "eval_prediction",
    "window_starts", "train_regressor", "predict_emotion", "emotion_error", "inference_error_grid",
    "report_csv", "write_report",
]

