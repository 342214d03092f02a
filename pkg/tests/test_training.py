import json
import math

import numpy as np
import pytest

from emogen import tensor as T
from emogen import tokenizer as tk
from emogen.model import ModelConfig, Transformer
from emogen.synthetic import make_corpus
from emogen.tokenizer import PAD, START, ConditionPair
from emogen.training import (
    IGNORE,
    PlateauSchedule,
    SongData,
    TrainingAborted,
    TrainSpec,
    fit,
    fixed_chunk,
    lm_loss,
    sample_chunk,
    song_data,
    teacher_forced_accuracy,
    train_loop,
    transpose_augment,
)

SMALL = ModelConfig(1, 16, 2, 32, 32, dropout=0.0)


def _song(n=100, cond=ConditionPair(0.5, -0.5)):
    toks = np.arange(n, dtype=np.int64) % 880
    return SongData("s", toks, np.array([0, 10, 40, 90]), cond)


def _corpus(n=6):
    return [song_data(s.name, s.events, s.condition) for s in make_corpus(n, seed=0, duration_ms=6000)]


def test_bar_aligned_chunk_starts_with_start(rng):
    for _ in range(20):
        c = sample_chunk(_song(), rng, 32, bar_aligned=True)
        assert c.input[0] == START and c.bar_aligned
        assert c.input[1] in (0, 10, 40, 90)


def test_discrete_bar_aligned_prefix(rng):
    c = sample_chunk(_song(), rng, 32, discrete_tokens=True, bar_aligned=True)
    assert c.input[:3].tolist() == [1010, 1013, START]
    # the given condition tokens and <START> are not prediction targets
    assert c.target[:2].tolist() == [IGNORE, IGNORE]
    assert c.target[2] == c.input[3]


def test_random_offset_has_no_start(rng):
    for _ in range(50):
        c = sample_chunk(_song(), rng, 32, discrete_tokens=True, bar_aligned=False)
        assert START not in c.input and not any(tk.is_condition(int(t)) for t in c.input)
        assert not c.bar_aligned


def test_coin_flip_is_fair(rng):
    n = sum(sample_chunk(_song(), rng, 32).bar_aligned for _ in range(2000))
    assert 900 < n < 1100


def test_short_song_padding():
    c = fixed_chunk(_song(5), 16)
    assert len(c.input) == len(c.target) == 16
    assert c.input[:6].tolist() == [START, 0, 1, 2, 3, 4]
    assert np.all(c.input[6:] == PAD)
    assert c.target[:5].tolist() == [0, 1, 2, 3, 4]
    assert np.all(c.target[5:] == IGNORE)


def test_target_is_input_shifted(rng):
    for _ in range(50):
        c = sample_chunk(_song(300), rng, 64)
        valid = c.target[:-1] != IGNORE
        assert np.array_equal(c.target[:-1][valid], c.input[1:][valid])


def test_transpose_examples():
    on, off = tk.note_on_id(1, 60), tk.note_off_id(1, 60)
    assert transpose_augment([on, 900, off], 0).tolist() == [on, 900, off]
    assert transpose_augment([on, 900, off], 3).tolist() == [on + 3, 900, off + 3]
    assert tk.note_on_id(1, 63) == on + 3
    hi_on, hi_off = tk.note_on_id(1, 107), tk.note_off_id(1, 107)
    assert transpose_augment([hi_on, 900, hi_off], 3).tolist() == [900]
    drum = tk.note_on_id(0, 107)
    assert transpose_augment([drum], 3).tolist() == [drum]


def test_transpose_stays_in_vocab(rng):
    for _ in range(100):
        toks = rng.integers(0, 1005, size=200)
        out = transpose_augment(toks, int(rng.integers(-3, 4)))
        assert out.min() >= 0 and out.max() < 1005


def test_transpose_keeps_instrument_block(rng):
    toks = np.array([tk.note_on_id(i, p) for i in range(1, 5) for p in (21, 60, 108)])
    for s in range(-3, 4):
        out = transpose_augment(toks, s)
        assert np.all(out // 88 == np.array([t // 88 for t in toks
                                             if 21 <= (t % 88) + 21 + s <= 108]))


def test_plateau_fires_once_after_three_windows():
    s = PlateauSchedule(2e-5, 2e-6, window=2, n_windows=3, tol=1e-3)
    lrs = [s.update(i, 1.0) for i in range(20)]
    # flat loss: first chance is the end of the third window
    assert lrs[:5] == [2e-5] * 5 and lrs[5] == 2e-6
    assert set(lrs) == {2e-5, 2e-6} and s.dropped_at == 5
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_plateau_not_fired_while_improving():
    s = PlateauSchedule(2e-5, 2e-6, window=10, n_windows=3, tol=1e-3)
    lrs = [s.update(i, 10.0 * 0.99 ** i) for i in range(100)]
    assert set(lrs) == {2e-5}


def test_loss_mask_zero_gradient(rng):
    with T.precision(np.float64):
        m = Transformer(SMALL, seed=0)
        c = fixed_chunk(_song(5), 16)
        logits = T.Tensor(m.forward(c.input[None]).data, requires_grad=True)
        loss = T.cross_entropy(logits, c.target[None], ignore_index=IGNORE)
        loss.backward()
    g = logits.grad[0]
    assert np.all(g[5:] == 0) and np.all(np.abs(g[:5]).sum(-1) > 0)


def test_initial_loss_near_uniform():
    m = Transformer(ModelConfig(2, 64, 4, 128, 64, dropout=0.0), seed=0)
    chunks = [fixed_chunk(s, 64) for s in _corpus(4)]
    loss = float(lm_loss(m, chunks).data)
    assert abs(loss - math.log(1007)) < 0.2


def test_fit_deterministic_and_decreasing():
    data = _corpus()
    runs = []
    for _ in range(2):
        m = Transformer(SMALL, seed=0)
        runs.append(fit(m, data, TrainSpec(lr=3e-3, steps=30, batch_size=2, seed=5)).losses)
    assert runs[0] == runs[1]
    assert np.mean(runs[0][-5:]) < np.mean(runs[0][:5])


def test_fit_conditional_requires_labels():
    m = Transformer(SMALL.for_variant("continuous-token"))
    with pytest.raises(ValueError):
        fit(m, [SongData("x", np.arange(10), np.array([0]))], TrainSpec(steps=1))


def test_fit_writes_log_and_checkpoint(tmp_path):
    m = Transformer(SMALL.for_variant("discrete-token"))
    spec = TrainSpec(lr=1e-3, steps=4, batch_size=2, checkpoint_every=2,
                     checkpoint_path=str(tmp_path / "m.ckpt"), log_path=str(tmp_path / "log.jsonl"))
    res = fit(m, _corpus(), spec)
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2, 3]
    assert set(rows[0]) == {"step", "loss", "lr", "tokens_per_s"}
    back = Transformer.load(res.checkpoint)
    assert np.array_equal(back.params["head.w"].data, m.params["head.w"].data)


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    m = Transformer(SMALL)

    def bad_loss(model, batch):
        return T.Tensor(np.float32(np.nan))

    with pytest.raises(TrainingAborted) as exc:
        train_loop(m, lambda rng: None, bad_loss, TrainSpec(steps=3, checkpoint_path=str(tmp_path / "c.ckpt")))
    assert exc.value.checkpoint == str(tmp_path / "c.ckpt")
    assert (tmp_path / "c.ckpt").exists()


def test_callback_stops_early():
    m = Transformer(SMALL)
    chunks = [fixed_chunk(s, 32) for s in _corpus(2)]
    res = fit(m, chunks, TrainSpec(lr=1e-3, steps=50, batch_size=2), callback=lambda step, model: step == 2)
    assert res.stopped_early and res.steps == 3
    assert 0.0 <= teacher_forced_accuracy(m, chunks) <= 1.0
