import io
import json
import urllib.error

import numpy as np
import pytest

from emogen import corpus as C
from emogen.midi import MidiFeatures, events_from_notes, write_midi

from conftest import smf, track

LISTING_ID = "5VPOrzHyuULaiCKnwQNNCN"


def _midi(seed, n_inst=3, n=20):
    r = np.random.default_rng(seed)
    notes = [(i % n_inst, int(r.integers(30, 90)), float(i * 100), float(i * 100 + 80))
             for i in range(n)]
    return write_midi(events_from_notes(notes))


def _record(name, valence=0.5, density=6.0, n_inst=3):
    return C.SongRecord(name, name, MidiFeatures(density, 120.0, n_inst), {}, {"valence": valence})


def test_dedup_identical_and_metadata(tmp_path):
    (tmp_path / "a.mid").write_bytes(_midi(1))
    (tmp_path / "b.mid").write_bytes(_midi(1))
    base = [(0, b"\x90\x3c\x50"), (480, b"\x80\x3c\x00")]
    (tmp_path / "c.mid").write_bytes(smf([track(base)]))
    (tmp_path / "d.mid").write_bytes(smf([track([(0, b"\xff\x03\x04name")] + base)]))
    (tmp_path / "e.mid").write_bytes(_midi(2))
    got = C.scan_and_dedup(tmp_path)
    assert [p.name for p, _ in got] == ["a.mid", "c.mid", "e.mid"]
    assert len({h for _, h in got}) == 3


def test_scan_skips_bad_files(tmp_path, caplog):
    (tmp_path / "bad.mid").write_bytes(b"garbage")
    (tmp_path / "empty.mid").write_bytes(write_midi([]))
    (tmp_path / "notes.txt").write_text("ignored")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "ok.midi").write_bytes(_midi(3))
    with caplog.at_level("WARNING"):
        got = C.scan_songs(tmp_path)
    assert [s.name for s in got] == ["sub/ok.midi"]
    assert "bad.mid" in caplog.text and "empty.mid" in caplog.text


def test_scan_n_unique(tmp_path):
    for i in range(7):
        (tmp_path / f"{i}.mid").write_bytes(_midi(10 + i))
    assert len(C.scan_and_dedup(tmp_path)) == 7


def test_dedup_idempotent(tmp_path):
    src, dst = tmp_path / "src", tmp_path / "dst"
    src.mkdir()
    dst.mkdir()
    for i in (1, 1, 2, 3, 3):
        (src / f"f{len(list(src.iterdir()))}.mid").write_bytes(_midi(i))
    first = C.scan_and_dedup(src)
    for p, _ in first:
        (dst / p.name).write_bytes(p.read_bytes())
    second = C.scan_and_dedup(dst)
    assert [h for _, h in first] == [h for _, h in second]


def test_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        C.scan_songs(tmp_path / "nope")


def test_fixture_listing_entry():
    client = C.AudioFeatureClient("fixture", {f"id:{LISTING_ID}": {"valence": 0.963, "energy": 0.5}})
    feats = client.fetch({"spotify_id": LISTING_ID, "artist": "x", "title": "y"})
    assert feats["valence"] == 0.963
    rec = _record("s", valence=feats["valence"])
    (out,) = C.derive_conditions([rec], 1.0, 11.0)
    assert out.condition.valence == pytest.approx(0.926)


def test_fixture_fallback_and_not_found():
    table = {"q:abba|waterloo": {"valence": 0.8}}
    client = C.AudioFeatureClient("fixture", table)
    assert client.fetch({"spotify_id": "zzz", "artist": "ABBA ", "title": "Waterloo"})["valence"] == 0.8
    assert client.fetch({"spotify_id": "zzz"}) is None
    assert C.query_keys({"spotify_id": "a", "artist": "B", "title": "C"}) == ["id:a", "q:b|c"]


def test_cache_serves_repeats(tmp_path):
    calls = []

    def opener(req, timeout=None):
        calls.append(req.full_url)
        body = {"access_token": "t"} if "token" in req.full_url else {"valence": 0.25}
        return io.BytesIO(json.dumps(body).encode())

    env = {"SPOTIFY_CLIENT_ID": "i", "SPOTIFY_CLIENT_SECRET": "s"}
    with pytest.MonkeyPatch.context() as mp:
        for k, v in env.items():
            mp.setenv(k, v)
        client = C.AudioFeatureClient("live", cache_dir=tmp_path, opener=opener, sleep=lambda s: None)
        assert client.fetch({"spotify_id": "abc"})["valence"] == 0.25
        n = client.network_calls
        assert n == 2  # token plus features
        again = C.AudioFeatureClient("live", cache_dir=tmp_path, opener=opener, sleep=lambda s: None)
        assert again.fetch({"spotify_id": "abc"})["valence"] == 0.25
        assert again.network_calls == 0


def test_live_retries_with_backoff(monkeypatch):
    monkeypatch.setenv("SPOTIFY_CLIENT_ID", "i")
    monkeypatch.setenv("SPOTIFY_CLIENT_SECRET", "s")
    failures = [503, 503]
    sleeps = []

    def opener(req, timeout=None):
        if "token" in req.full_url:
            return io.BytesIO(b'{"access_token": "t"}')
        if failures:
            raise urllib.error.HTTPError(req.full_url, failures.pop(), "busy", {}, None)
        return io.BytesIO(b'{"valence": 0.7}')

    client = C.AudioFeatureClient("live", opener=opener, sleep=sleeps.append, min_interval=0.0, backoff=0.5)
    assert client.fetch({"spotify_id": "x"})["valence"] == 0.7
    assert [s for s in sleeps if s >= 0.5] == [0.5, 1.0]


def test_live_gives_up_and_404(monkeypatch):
    monkeypatch.setenv("SPOTIFY_CLIENT_ID", "i")
    monkeypatch.setenv("SPOTIFY_CLIENT_SECRET", "s")

    def opener(req, timeout=None):
        if "token" in req.full_url:
            return io.BytesIO(b'{"access_token": "t"}')
        code = 404 if "missing" in req.full_url else 500
        raise urllib.error.HTTPError(req.full_url, code, "x", {}, None)

    client = C.AudioFeatureClient("live", opener=opener, sleep=lambda s: None, retries=2)
    assert client.fetch({"spotify_id": "missing"}) is None
    with pytest.raises(C.FeatureClientError):
        client.fetch({"spotify_id": "broken"})


def test_live_needs_credentials(monkeypatch):
    monkeypatch.delenv("SPOTIFY_CLIENT_ID", raising=False)
    with pytest.raises(C.FeatureClientError):
        C.AudioFeatureClient("live")


def test_derive_conditions_examples():
    recs = [_record("a", 0.5, 3.0), _record("b", 0.0, 9.0), _record("c", 1.0, 30.0)]
    out = C.derive_conditions(recs, 1.0, 3.0)
    assert out[0].condition.valence == 0.0 and out[0].condition.arousal == -1.0
    assert out[1].condition.valence == -1.0 and out[1].condition.arousal == 1.0
    assert out[2].condition.arousal == 1.0  # clamped
    with pytest.raises(C.DegenerateScaleError):
        C.derive_conditions(recs, 2.0, 2.0)


def test_derive_conditions_monotone(rng):
    recs = [_record(str(i), float(rng.uniform()), float(rng.uniform(3, 30))) for i in range(50)]
    out = C.derive_conditions(recs, 1.0, 10.0)
    raw = np.array([[r.raw_valence, r.arousal_raw] for r in recs])
    cond = np.array([[r.condition.valence, r.condition.arousal] for r in out])
    for j in (0, 1):
        o = np.argsort(raw[:, j])
        assert np.all(np.diff(cond[o, j]) >= 0)


def test_iqr_examples():
    lo, hi, keep = C.iqr_filter([1, 2, 3, 4, 100])
    assert (lo, hi) == (-1.0, 7.0) and keep.tolist() == [True] * 4 + [False]
    lo, hi, keep = C.iqr_filter([5.0] * 6)
    assert lo == hi == 5.0 and keep.all()
    assert C.iqr_filter([1, 2, 3, 4, 5])[2].all()
    with pytest.raises(ValueError):
        C.iqr_filter([1, 2, 3])


def _brute_quartile(vals, q):
    # position q*(n-1) between sorted order statistics, by explicit selection
    s = sorted(vals)
    pos = q * (len(s) - 1)
    below = [v for i, v in enumerate(s) if i <= pos]
    above = [v for i, v in enumerate(s) if i >= pos]
    a, b = below[-1], above[0]
    frac = pos - (len(below) - 1)
    return a + frac * (b - a)


def test_iqr_brute_force_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(4, 40))
        vals = (rng.standard_normal(n) * rng.uniform(0.1, 10)).round(int(rng.integers(0, 4))).tolist()
        q1, q3 = _brute_quartile(vals, 0.25), _brute_quartile(vals, 0.75)
        lo_o, hi_o = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
        lo, hi, keep = C.iqr_filter(vals)
        assert lo == pytest.approx(lo_o, abs=1e-12) and hi == pytest.approx(hi_o, abs=1e-12)
        assert keep.tolist() == [lo_o <= v <= hi_o for v in vals]
        assert q1 == pytest.approx(np.percentile(vals, 25)) and q3 == pytest.approx(np.percentile(vals, 75))


def test_manifest_filters_and_split(rng):
    recs = [_record(f"song{i:03d}", float(rng.uniform(0.2, 0.8)), float(rng.uniform(4, 8))) for i in range(100)]
    recs.append(_record("two_inst", 0.5, 6.0, n_inst=2))
    recs.append(_record("zero_val", 0.0, 6.0))
    unlabeled = _record("unlabeled")
    unlabeled.audio_features = None
    recs.append(unlabeled)
    m = C.build_manifest(recs[::-1])
    names = [r.name for r in m.records]
    assert "two_inst" not in names and "zero_val" not in names and "unlabeled" not in names
    assert len(m.split("train")) == 95 and len(m.split("test")) == 5
    assert [r.name for r in m.split("test")] == [f"song{i:03d}" for i in range(95, 100)]
    train_a = [r.arousal_raw for r in m.split("train")]
    assert (m.arousal_min, m.arousal_max) == (min(train_a), max(train_a))
    assert all(-1 <= r.condition.arousal <= 1 for r in m.records)
    assert C.build_manifest(recs).splits == m.splits


def test_manifest_iqr_drop_and_empty():
    recs = [_record(f"s{i}", 0.5, 6.0 + 0.1 * i) for i in range(10)] + [_record("loud", 0.5, 500.0)]
    m = C.build_manifest(recs)
    assert "loud" not in m.splits
    with pytest.raises(C.PipelineError):
        C.build_manifest([_record("x", 0.0)])


def test_manifest_round_trip(tmp_path, rng):
    recs = [_record(f"s{i}", float(rng.uniform(0.1, 0.9)), float(rng.uniform(4, 8))) for i in range(20)]
    m = C.build_manifest(recs)
    m.save(tmp_path / "m.json")
    back = C.DatasetManifest.load(tmp_path / "m.json")
    assert back.splits == m.splits and back.arousal_min == m.arousal_min
    assert [r.condition for r in back.records] == [r.condition for r in m.records]


def test_build_dataset_end_to_end(tmp_path):
    root = tmp_path / "midi"
    root.mkdir()
    meta, table = {}, {}
    for i in range(24):
        (root / f"t{i:02d}.mid").write_bytes(_midi(100 + i, n_inst=3 + i % 2))
        meta[f"t{i:02d}"] = [{"spotify_id": f"sp{i}", "match_score": 0.9, "title": "x", "artist": "y"},
                             {"spotify_id": "wrong", "match_score": 0.1}]
        table[f"id:sp{i}"] = {"valence": 0.3 + 0.01 * i}
    m = C.build_dataset(root, meta, C.AudioFeatureClient("fixture", table), tmp_path / "out")
    data = json.loads((tmp_path / "out" / "dataset.json").read_text())
    entry = next(iter(data.values()))
    assert set(entry) == {"midi_features", "matched_features"}
    assert "spotify_audio_features" in entry["matched_features"]
    assert set(entry["midi_features"]) == {"note_density", "tempo", "n_instruments"}
    assert len(m.split("test")) == 1
    songs = C.load_split(m, root, "train")
    assert len(songs) == len(m.split("train")) and songs[0].condition is not None
