"""Acceptance criteria, one test and one printed PASS/FAIL line each.

The heavy checks (overfit, conditioning, directional ordering) train small
models from scratch on the synthetic corpus and take several minutes each on
one CPU core. The lines are echoed in the "acceptance criteria" section at the
end of the pytest run.
"""
import math
import statistics
import time

import numpy as np
from scipy.stats import spearmanr

import conftest
from conftest import random_events, smf, tempo, track
from emogen import gradcheck, synthetic
from emogen import tokenizer as tk
from emogen.corpus import SongRecord, build_manifest, iqr_filter, quantile
from emogen.evaluate import GridConfig, inference_error_grid, window_starts
from emogen.generate import SamplerConfig, generate_batch, write_outputs
from emogen.midi import MidiFeatures, events_from_notes, notes_from_events, parse_midi, write_midi
from emogen.model import (
    ModelConfig,
    Transformer,
    parameter_count_formula,
    parameter_shapes,
    relative_attention,
)
from emogen import tensor as T
from emogen.tensor import Tensor
from emogen.tokenizer import ConditionPair, bin_condition, decode, encode
from emogen.training import TrainSpec, fit, fixed_chunk, lm_loss, song_data, teacher_forced_accuracy

GRID = (-0.8, -0.4, 0.0, 0.4, 0.8)


def report(name, ok, detail, soft=False):
    status = "PASS" if ok else ("FAIL (soft, reported only)" if soft else "FAIL")
    line = f"{status:5s} | {name} | {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# ------------------------------------------------------------ 1. vocabulary


def test_vocabulary_exactness():
    t0 = time.perf_counter()
    names = dict(line.split("\t") for line in tk.vocab_table().splitlines())
    inst = ("DRUMS", "PIANO", "GUITAR", "BASS", "STRINGS")
    expected = {}
    for i, nm in enumerate(inst):
        for p in range(21, 109):
            expected[i * 88 + p - 21] = f"NOTE_ON_{nm}_{p}"
            expected[440 + i * 88 + p - 21] = f"NOTE_OFF_{nm}_{p}"
    for k in range(125):
        expected[880 + k] = f"TIME_SHIFT_{(k + 1) * 8}"
    expected[1005], expected[1006] = "<START>", "<PAD>"
    for b in range(5):
        expected[1007 + b] = f"VALENCE_{b - 2:+d}"
        expected[1012 + b] = f"AROUSAL_{b - 2:+d}"
    ids_ok = all(tk.note_on_id(i, p) == i * 88 + p - 21 and tk.note_off_id(i, p) == 440 + i * 88 + p - 21
                 for i in range(5) for p in range(21, 109))
    ids_ok &= all(tk.shift_id((k + 1) * 8) == 880 + k for k in range(125))
    ok = (tk.BASE_VOCAB_SIZE == 1007 and tk.COND_VOCAB_SIZE == 1017 and ids_ok
          and {int(k): v for k, v in names.items()} == expected)
    dt = time.perf_counter() - t0
    report("vocabulary exactness", ok and dt < 1, f"base {tk.BASE_VOCAB_SIZE}, extended {tk.COND_VOCAB_SIZE}, "
           f"{len(expected)} ids enumerated, {dt:.3f}s")
    assert ok and dt < 1


# ------------------------------------------------------------ 2. tokenizer round trip


def _fixture_files():
    """Handwritten SMF files covering the parser's corner cases."""
    on, off = b"\x90", b"\x80"
    return [
        smf([track([(0, tempo(500_000)), (0, b"\xc0\x00"), (0, on + b"\x3c\x64"), (480, off + b"\x3c\x40")])]),
        smf([track([(0, tempo(500_000)), (480, tempo(1_000_000))]),
             track([(0, b"\x90\x40\x50"), (960, b"\x80\x40\x00")])]),
        smf([track([(0, b"\x90\x3c\x50"), (96, b"\x3c\x00"), (0, b"\x3e\x50"), (96, b"\x3e\x00")])]),
        smf([track([(0, b"\xc1\x21"), (0, b"\x99\x24\x50"), (0, b"\x91\x28\x50"),
                    (96, b"\x89\x24\x00"), (0, b"\x81\x28\x00")])]),
        smf([track([(0, b"\x90\x3c\x50"), (96, b"\x90\x3c\x50"), (96, b"\x80\x3c\x00")])]),
        smf([track([(0, tempo(612_345)), (0, b"\xc2\x30"), (7, b"\x92\x30\x40"), (333, b"\x92\x34\x40"),
                    (1, b"\x82\x30\x00"), (1001, b"\x82\x34\x00")])], division=96, fmt=0),
        smf([track([(0, b"\xff\x58\x04\x06\x03\x18\x08"), (0, b"\x90\x3c\x50"), (2880, b"\x80\x3c\x00")])]),
        smf([track([(0, tempo(400_000)), (0, b"\xc0\x18"), (5, b"\x90\x15\x50"), (10_000, b"\x80\x15\x00"),
                    (0, b"\x90\x6c\x50"), (30, b"\x80\x6c\x00")])], division=960),
    ]


def _random_smf(rng):
    """Raw SMF with random division, tempo changes, programs and channels.

    Notes last at least division/16 ticks (over 15 ms at the fastest tempo
    drawn): a note shorter than one 8 ms grid step has no positive-length
    encoding within the time tolerance.
    """
    division = int(rng.choice([24, 96, 120, 384, 480, 960]))
    tempo_track, t = [(0, tempo(int(rng.integers(250_000, 1_500_000))))], 0
    for _ in range(int(rng.integers(0, 4))):
        d = int(rng.integers(1, 8 * division))
        tempo_track.append((d, tempo(int(rng.integers(250_000, 1_500_000)))))
    tracks = [track(tempo_track)]
    for ch in rng.choice(16, size=int(rng.integers(1, 5)), replace=False):
        ch = int(ch)
        ev = [(0, bytes([0xC0 | ch, int(rng.integers(0, 128))]))]
        t_abs, pending = 0, []
        for _ in range(int(rng.integers(1, 40))):
            start = t_abs + int(rng.integers(0, 2 * division))
            pitch = int(rng.integers(21, 109))
            end = start + int(rng.integers(division // 16 + 1, 4 * division))
            pending.append((start, 1, pitch))
            pending.append((end, 0, pitch))
            t_abs = start
        pending.sort()
        last = 0
        for when, kind, pitch in pending:
            status = (0x90 if kind else 0x80) | ch
            ev.append((when - last, bytes([status, pitch, 80 if kind else 0])))
            last = when
        tracks.append(track(ev))
    return smf(tracks, division=division)


def _times_close(a, b, tol):
    from collections import defaultdict

    qa, qb = defaultdict(list), defaultdict(list)
    for e in a:
        qa[(e.kind, e.instrument, e.pitch)].append(e.time_ms)
    for e in b:
        qb[(e.kind, e.instrument, e.pitch)].append(e.time_ms)
    if qa.keys() != qb.keys():
        return False, math.inf
    worst = 0.0
    for k in qa:
        if len(qa[k]) != len(qb[k]):
            return False, math.inf
        worst = max(worst, float(np.max(np.abs(np.array(sorted(qa[k])) - np.array(sorted(qb[k]))))))
    return worst <= tol, worst


def test_sub_grid_note_is_dropped():
    ev = parse_midi(smf([track([(0, b"\x90\x3c\x50"), (2, b"\x80\x3c\x00")])]))
    assert len(ev) == 2 and ev[1].time_ms - ev[0].time_ms < 4
    assert decode(encode(ev)) == []


def test_tokenizer_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    files = _fixture_files()
    files += [_random_smf(rng) for _ in range(100)]
    for _ in range(20):
        # overlap resolution can leave sub-grid fragments; keep notes of at least one step
        notes = notes_from_events(random_events(rng, n_notes=int(rng.integers(1, 120))))
        files.append(write_midi(events_from_notes(n for n in notes if n[3] - n[2] >= 8)))
    worst, bad = 0.0, 0
    for data in files:
        ev = parse_midi(data)
        ok, err = _times_close(ev, decode(encode(ev)), 4.0)
        bad += not ok
        worst = max(worst, err)
    dt = time.perf_counter() - t0
    ok = bad == 0 and len(files) >= 100 and dt < 30
    report("tokenizer round trip", ok, f"{len(files)} files, {bad} failing, worst time error {worst:.3f} ms, "
           f"{dt:.1f}s")
    assert ok


# ------------------------------------------------------------ 3. gradient checks


def test_gradient_checks():
    t0 = time.perf_counter()
    results = gradcheck.run(seeds=(0, 1, 2, 3, 4))
    dt = time.perf_counter() - t0
    worst_op = max(results, key=results.get)
    ok = all(v < 1e-4 for v in results.values()) and dt < 120
    report("gradient checks", ok, f"{len(results)} ops x 5 seeds, worst {worst_op} {results[worst_op]:.2e}, "
           f"{dt:.1f}s")
    assert ok


# ------------------------------------------------------------ 4. relative attention


def _naive_attention(q, k, v, table):
    B, H, L, dh = q.shape
    out = np.zeros_like(q)
    for b in range(B):
        for h in range(H):
            for i in range(L):
                z = np.array([(q[b, h, i] @ k[b, h, j] + q[b, h, i] @ table[h, i - j]) / math.sqrt(dh)
                              for j in range(i + 1)])
                w = np.exp(z - z.max())
                out[b, h, i] = (w / w.sum()) @ v[b, h, :i + 1]
    return out


def test_relative_attention_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        L = int(rng.integers(1, 9))
        B, H, dh = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 9))
        q, k, v = (rng.standard_normal((B, H, L, dh)).astype(np.float32) for _ in range(3))
        table = rng.standard_normal((H, 8, dh)).astype(np.float32)
        got = relative_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(table)).data
        ref = _naive_attention(*(x.astype(np.float64) for x in (q, k, v, table)))
        worst = max(worst, float(np.max(np.abs(got - ref))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt < 10
    report("relative attention equivalence", ok, f"20 trials L<=8, max abs diff {worst:.2e}, {dt:.2f}s")
    assert ok


# ------------------------------------------------------------ 5. causality


def test_causality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    base = ModelConfig(2, 32, 4, 64, 64, dropout=0.1)
    failures, trials = 0, 0
    for variant in ("vanilla", "discrete-token", "continuous-token", "continuous-concatenated"):
        m = Transformer(base.for_variant(variant), seed=int(rng.integers(1000)))
        for _ in range(50):
            L = int(rng.integers(2, 40))
            toks = rng.integers(0, m.cfg.vocab_size, size=(1, L))
            cond = rng.uniform(-1, 1, size=(1, 2)) if variant.startswith("continuous") else None
            j = int(rng.integers(0, L))
            other = toks.copy()
            other[0, j] = (other[0, j] + int(rng.integers(1, m.cfg.vocab_size))) % m.cfg.vocab_size
            a = m.forward(toks, cond).data
            b = m.forward(other, cond).data
            failures += not np.array_equal(a[:, :j], b[:, :j])
            trials += 1
    dt = time.perf_counter() - t0
    ok = failures == 0 and dt < 60
    report("causality", ok, f"{trials} trials over 4 variants, {failures} violations, {dt:.1f}s")
    assert ok


# ------------------------------------------------------------ 6. parameter count


def test_parameter_count():
    t0 = time.perf_counter()
    full = ModelConfig.full_scale()
    n_full = sum(int(np.prod(s)) for s in parameter_shapes(full).values())
    rel = abs(n_full - 145e6) / 145e6
    toy_ok = True
    for variant in ("vanilla", "discrete-token", "continuous-token", "continuous-concatenated"):
        for cfg in (ModelConfig(2, 64, 4, 256, 128), ModelConfig(3, 48, 6, 96, 200)):
            cfg = cfg.for_variant(variant)
            toy_ok &= Transformer(cfg).num_parameters() == parameter_count_formula(cfg)
    toy_ok &= parameter_count_formula(full) == n_full
    dt = time.perf_counter() - t0
    ok = rel <= 0.05 and toy_ok and dt < 10
    report("parameter count", ok, f"full-scale config {n_full:,} ({rel:.2%} from 145M), toy configs exact: {toy_ok}, "
           f"{dt:.2f}s")
    assert ok


# ------------------------------------------------------------ 7. overfit


def test_overfit_sanity():
    t0 = time.perf_counter()
    songs = synthetic.make_corpus(8, seed=1, duration_ms=60_000)
    chunks = [fixed_chunk(song_data(s.name, s.events, s.condition)) for s in songs]
    model = Transformer(ModelConfig(2, 128, 4, 512, 1216, dropout=0.0), seed=0)
    with T.no_grad():
        initial = float(lm_loss(model, chunks).data)
    trace = []

    def check(step, m):
        if (step + 1) % 25:
            return False
        acc = teacher_forced_accuracy(m, chunks)
        trace.append((step + 1, acc))
        return acc >= 0.95

    fit(model, chunks, TrainSpec(lr=1e-3, batch_size=4, steps=2000, augment=False, seed=0), check)
    step, acc = trace[-1]
    dt = time.perf_counter() - t0
    init_ok = abs(initial - math.log(1007)) <= 0.2
    ok = acc >= 0.95 and init_ok
    report("overfit sanity", ok, f"initial loss {initial:.3f} (ln 1007 = {math.log(1007):.3f}), top-1 {acc:.3f} "
           f"at step {step}, {dt:.0f}s")
    assert ok


# ------------------------------------------------------------ 8, 9. conditioning

TOY = ModelConfig(2, 64, 4, 256, 256, dropout=0.0)
COND_STEPS = 1000
SAMPLE_TOKENS = 400
SAMPLES_PER_PAIR = 2
_RUNS: dict = {}


def _corpus():
    if "corpus" not in _RUNS:
        songs = synthetic.make_corpus(200, seed=3, duration_ms=16_000)
        _RUNS["corpus"] = [song_data(s.name, s.events, s.condition) for s in songs]
    return _RUNS["corpus"]


def _conditioned_run(variant, seed):
    """Train a toy conditional model and sample the 5x5 grid; cached per (variant, seed)."""
    key = (variant, seed)
    if key in _RUNS:
        return _RUNS[key]
    t0 = time.perf_counter()
    model = Transformer(TOY.for_variant(variant), seed=seed)
    fit(model, _corpus(), TrainSpec(lr=1e-3, batch_size=8, steps=COND_STEPS, augment=False, seed=seed))
    samples = {}

    def gen(m, pairs, cfg, sample_ids=None):
        out = generate_batch(m, pairs, cfg, sample_ids=sample_ids)
        for p, i, toks in zip(pairs, sample_ids, out):
            samples[i] = (p, toks)
        return out

    cfg = GridConfig(n_samples=SAMPLES_PER_PAIR, values=GRID, batch_size=25,
                     sampler=SamplerConfig(max_tokens=SAMPLE_TOKENS, seed=seed))
    grid = inference_error_grid({variant: model}, synthetic.statistic_regressor, cfg, generate_fn=gen)
    pairs = [samples[i][0] for i in sorted(samples)]
    toks = [samples[i][1] for i in sorted(samples)]
    density = [synthetic.measured_density(t) for t in toks]
    major = [synthetic.measured_major_fraction(t) for t in toks]
    run = {
        "rho_arousal": float(spearmanr([p.arousal for p in pairs], density)[0]),
        "rho_valence": float(spearmanr([p.valence for p in pairs], major)[0]),
        "error": grid[variant]["mean_error"],
        "model": model,
        "seconds": time.perf_counter() - t0,
    }
    _RUNS[key] = run
    return run


def test_conditioning_efficacy():
    t0 = time.perf_counter()
    parts, ok = [], True
    for variant in ("continuous-token", "continuous-concatenated"):
        r = _conditioned_run(variant, 0)
        ok &= r["rho_arousal"] >= 0.8 and r["rho_valence"] >= 0.6
        parts.append(f"{variant}: arousal rho {r['rho_arousal']:.3f}, valence rho {r['rho_valence']:.3f}")
    r = _conditioned_run("discrete-token", 0)
    parts.append(f"(discrete-token, not gated: arousal {r['rho_arousal']:.3f}, valence {r['rho_valence']:.3f})")
    dt = time.perf_counter() - t0
    ok &= dt <= 3600
    report("conditioning efficacy", ok, "; ".join(parts) + f"; {dt:.0f}s")
    assert ok


def test_condition_changes_argmax():
    # trained continuous model: some context flips its next-token argmax with the condition
    m = _conditioned_run("continuous-concatenated", 0)["model"]
    ctx = np.array([_corpus()[0].tokens[:64].tolist()])
    lo = m.forward(ctx, [[-0.8, -0.8]]).data[0].argmax(-1)
    hi = m.forward(ctx, [[0.8, 0.8]]).data[0].argmax(-1)
    assert np.any(lo != hi)


def test_directional_ordering():
    t0 = time.perf_counter()
    errs = {v: [_conditioned_run(v, s)["error"] for s in (0, 1, 2)]
            for v in ("continuous-concatenated", "discrete-token")}
    med = {v: statistics.median(e) for v, e in errs.items()}
    ok = med["continuous-concatenated"] <= med["discrete-token"]
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{v} median {med[v]:.4f} (seeds {', '.join(f'{x:.4f}' for x in errs[v])})" for v in med)
    report("directional ordering", ok, detail + f"; {dt:.0f}s", soft=True)


# ------------------------------------------------------------ 10. evaluation plumbing


def test_evaluation_plumbing():
    t0 = time.perf_counter()

    # samples carry the grid indices of the commanded pair; the oracle reads them back exactly
    def fake_generate(model, pairs, cfg, sample_ids=None):
        return [[GRID.index(p.valence), GRID.index(p.arousal)] for p in pairs]

    def oracle(windows):
        return np.array([[GRID[w[0]], GRID[w[1]]] for w in windows])

    class Stub:
        class cfg:
            conditional = True

    report_ = inference_error_grid({"oracle": Stub()}, oracle, GridConfig(n_samples=8), generate_fn=fake_generate)
    err = report_["oracle"]["mean_error"]
    starts = window_starts(4096)
    dt = time.perf_counter() - t0
    ok = err == 0.0 and starts == [0, 608, 1216, 1824, 2432, 2880] and dt < 10
    report("evaluation plumbing", ok, f"identity oracle error {err!r}, 4096-token windows {starts}, {dt:.2f}s")
    assert ok


# ------------------------------------------------------------ 11. dataset pipeline


def _brute_quartile(vals, q):
    s = sorted(vals)
    pos = q * (len(s) - 1)
    lo = max(i for i in range(len(s)) if i <= pos)
    hi = min(i for i in range(len(s)) if i >= pos)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def test_dataset_pipeline_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    iqr_bad = 0
    for _ in range(1000):
        vals = (rng.standard_normal(int(rng.integers(4, 60))) * 5).round(int(rng.integers(0, 3))).tolist()
        q1, q3 = _brute_quartile(vals, 0.25), _brute_quartile(vals, 0.75)
        lo, hi, keep = iqr_filter(vals)
        exp_lo, exp_hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
        iqr_bad += not (abs(lo - exp_lo) < 1e-9 and abs(hi - exp_hi) < 1e-9
                        and keep.tolist() == [exp_lo <= v <= exp_hi for v in vals])
    k = np.arange(10_001)
    bins = np.array([bin_condition((int(i) - 5000) / 5000) for i in k])
    bin_ok = np.array_equal(bins, np.minimum(k // 2000, 4) - 2)

    def rec(name, valence, density, n_inst=3):
        return SongRecord(name, name, MidiFeatures(density, 120.0, n_inst), {}, {"valence": valence})

    recs = [rec(f"f{i:03d}", 0.3 + 0.004 * i, 5.0 + 0.03 * i) for i in range(100)]
    recs += [rec("g_two_instruments", 0.5, 6.0, n_inst=2), rec("g_zero_valence", 0.0, 6.0)]
    m = build_manifest(recs)
    test_names = [r.name for r in m.split("test")]
    manifest_ok = ("g_two_instruments" not in m.splits and "g_zero_valence" not in m.splits
                   and len(m.split("train")) == 95 and test_names == [f"f{i:03d}" for i in range(95, 100)])
    dt = time.perf_counter() - t0
    ok = iqr_bad == 0 and bin_ok and manifest_ok and quantile([1, 2, 3, 4, 100], 0.25) == 2 and dt < 30
    report("dataset pipeline oracles", ok, f"iqr mismatches {iqr_bad}/1000, 10k-point binning exact: {bin_ok}, "
           f"manifest filters and 95/5 split: {manifest_ok}, {dt:.1f}s")
    assert ok


# ------------------------------------------------------------ 12. determinism


def test_determinism(tmp_path):
    t0 = time.perf_counter()
    data = [song_data(s.name, s.events, s.condition) for s in synthetic.make_corpus(12, seed=5, duration_ms=8000)]
    cfg = ModelConfig(2, 32, 4, 64, 128, dropout=0.1)
    curves, outputs = [], []
    for run in range(2):
        model = Transformer(cfg.for_variant("continuous-concatenated"), seed=3)
        res = fit(model, data, TrainSpec(lr=1e-3, batch_size=4, steps=40, seed=8))
        curves.append(res.losses)
        toks = generate_batch(model, [ConditionPair(0.4, -0.4), ConditionPair(-0.8, 0.8)],
                              SamplerConfig(max_tokens=300, seed=21))
        blobs = []
        for i, t in enumerate(toks):
            paths = write_outputs(t, tmp_path / f"run{run}_{i}")
            blobs.append(b"".join(open(p, "rb").read() for p in paths))
        outputs.append(blobs)
    dt = time.perf_counter() - t0
    ok = curves[0] == curves[1] and outputs[0] == outputs[1] and dt < 300
    report("determinism", ok, f"loss curves identical: {curves[0] == curves[1]} ({len(curves[0])} steps), "
           f"generated token and MIDI files byte-identical: {outputs[0] == outputs[1]}, {dt:.1f}s")
    assert ok
