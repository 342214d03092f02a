"""Labeled dataset construction: dedup, MIDI features, audio-feature labels, filtering, splitting."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes
from .midi import MidiFeatures, MidiParseError, MidiSong, content_hash, midi_features, read_midi
from .tokenizer import ConditionPair

log = logging.getLogger(__name__)

MIDI_SUFFIXES = (".mid", ".midi", ".kar")
MIN_INSTRUMENTS = 3
TEST_FRACTION = 0.05
AUDIO_FIELDS = ("danceability", "energy", "key", "loudness", "mode", "speechiness", "acousticness",
                "instrumentalness", "liveness", "valence", "tempo", "duration_ms", "time_signature")


class PipelineError(RuntimeError):
    pass


class DegenerateScaleError(ValueError):
    pass


class FeatureClientError(RuntimeError):
    """Network or auth failure that survived all retries."""


# ------------------------------------------------------------ scanning


@dataclass
class ScannedSong:
    path: Path
    name: str
    content_hash: str
    song: MidiSong


def _midi_files(root: Path) -> list[Path]:
    files = [p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES]
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def scan_songs(root) -> list[ScannedSong]:
    """Parse every MIDI file under ``root``; keep the first file (path order) per content hash."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} is not a readable directory")
    seen: set[str] = set()
    out = []
    for path in _midi_files(root):
        name = path.relative_to(root).as_posix()
        try:
            song = read_midi(path.read_bytes())
        except (MidiParseError, OSError) as exc:
            log.warning("skip %s: %s", name, exc)
            continue
        if not song.events:
            log.warning("skip %s: no notes", name)
            continue
        h = content_hash(song.events)
        if h in seen:
            log.info("skip %s: duplicate of %s", name, h)
            continue
        seen.add(h)
        out.append(ScannedSong(path, name, h, song))
    return out


def scan_and_dedup(root) -> list[tuple[Path, str]]:
    return [(s.path, s.content_hash) for s in scan_songs(root)]


# ------------------------------------------------------------ audio features


def query_keys(query: Mapping) -> list[str]:
    """Lookup keys in the order they are tried: Spotify id first, then artist + title."""
    keys = []
    if query.get("spotify_id"):
        keys.append(f"id:{query['spotify_id']}")
    if query.get("artist") and query.get("title"):
        keys.append(f"q:{query['artist'].strip().lower()}|{query['title'].strip().lower()}")
    return keys


class AudioFeatureClient:
    """Audio features by Spotify id, falling back to an artist/title search.

    ``fixture`` mode reads a JSON table mapping query keys (``id:<spotify id>``
    or ``q:<artist>|<title>``, lowercase) to feature objects. ``live`` mode
    calls the Web API with client credentials from ``SPOTIFY_CLIENT_ID`` /
    ``SPOTIFY_CLIENT_SECRET``. With a ``cache_dir`` every answer, including
    not-found, is stored on disk and reused.
    """

    token_url = "https://accounts.spotify.com/api/token"
    api_url = "https://api.spotify.com/v1"

    def __init__(self, mode: str = "fixture", fixtures: str | os.PathLike | Mapping | None = None,
                 cache_dir=None, min_interval: float = 0.1, retries: int = 3, backoff: float = 0.5,
                 opener: Callable | None = None, sleep: Callable[[float], None] = time.sleep):
        if mode not in ("fixture", "live"):
            raise ValueError("mode must be 'fixture' or 'live'")
        self.mode = mode
        self.table: dict = {}
        if mode == "fixture":
            if fixtures is None:
                raise ValueError("fixture mode needs a fixture table")
            if isinstance(fixtures, Mapping):
                self.table = dict(fixtures)
            else:
                with open(fixtures) as f:
                    self.table = json.load(f)
        else:
            self.client_id = os.environ.get("SPOTIFY_CLIENT_ID")
            self.client_secret = os.environ.get("SPOTIFY_CLIENT_SECRET")
            if not self.client_id or not self.client_secret:
                raise FeatureClientError("live mode needs SPOTIFY_CLIENT_ID and SPOTIFY_CLIENT_SECRET")
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.min_interval = min_interval
        self.retries = retries
        self.backoff = backoff
        self._open = opener or urllib.request.urlopen
        self._sleep = sleep
        self._last_call = -math.inf
        self._token: str | None = None
        self.network_calls = 0

    # cache
    def _cache_path(self, key: str) -> Path:
        return self.cache_dir / (hashlib.sha1(key.encode()).hexdigest() + ".json")

    def _cache_get(self, key):
        if not self.cache_dir:
            return False, None
        p = self._cache_path(key)
        if not p.exists():
            return False, None
        with open(p) as f:
            return True, json.load(f)["features"]

    def _cache_put(self, key, features):
        if self.cache_dir:
            atomic_write_bytes(self._cache_path(key), json.dumps({"key": key, "features": features}).encode())

    # live transport
    def _request(self, req) -> dict | None:
        """JSON body, or None on 404. Retries transient failures with exponential backoff."""
        delay = self.backoff
        for attempt in range(self.retries + 1):
            wait = self._last_call + self.min_interval - time.monotonic()
            if wait > 0:
                self._sleep(wait)
            self._last_call = time.monotonic()
            self.network_calls += 1
            try:
                with self._open(req, timeout=30) as resp:
                    return json.loads(resp.read().decode())
            except urllib.error.HTTPError as exc:
                if exc.code == 404:
                    return None
                if exc.code == 401 and attempt < self.retries:
                    self._token = None
                    req = self._authorize(req)
                elif exc.code not in (429, 500, 502, 503, 504) or attempt == self.retries:
                    raise FeatureClientError(f"HTTP {exc.code} from {req.full_url}") from exc
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                if attempt == self.retries:
                    raise FeatureClientError(f"network failure: {exc}") from exc
            self._sleep(delay)
            delay *= 2
        return None

    def _authorize(self, req):
        if self._token is None:
            cred = base64.b64encode(f"{self.client_id}:{self.client_secret}".encode()).decode()
            token_req = urllib.request.Request(
                self.token_url, data=b"grant_type=client_credentials",
                headers={"Authorization": f"Basic {cred}",
                         "Content-Type": "application/x-www-form-urlencoded"})
            body = self._request(token_req)
            if not body or "access_token" not in body:
                raise FeatureClientError("could not obtain an access token")
            self._token = body["access_token"]
        req.add_header("Authorization", f"Bearer {self._token}")
        return req

    def _get(self, url):
        req = urllib.request.Request(url)
        return self._request(self._authorize(req))

    def _live(self, key: str, query: Mapping):
        if key.startswith("id:"):
            return self._get(f"{self.api_url}/audio-features/{urllib.parse.quote(key[3:])}")
        q = f"artist:{query['artist']} track:{query['title']}"
        found = self._get(f"{self.api_url}/search?" + urllib.parse.urlencode({"q": q, "type": "track", "limit": 1}))
        items = (found or {}).get("tracks", {}).get("items", [])
        if not items:
            return None
        return self._get(f"{self.api_url}/audio-features/{items[0]['id']}")

    def lookup(self, key: str, query: Mapping):
        hit, cached = self._cache_get(key)
        if hit:
            return cached
        if self.mode == "fixture":
            features = self.table.get(key)
            if features is None and key.startswith("id:"):
                features = self.table.get(key[3:])
        else:
            features = self._live(key, query)
        self._cache_put(key, features)
        return features

    def fetch(self, query: Mapping) -> dict | None:
        """Features for a match record, or None when neither query finds the song."""
        for key in query_keys(query):
            features = self.lookup(key, query)
            if features is not None:
                return features
        return None


# ------------------------------------------------------------ records


@dataclass
class SongRecord:
    name: str
    content_hash: str
    midi_features: MidiFeatures
    match: dict = field(default_factory=dict)
    audio_features: dict | None = None
    condition: ConditionPair | None = None

    @property
    def raw_valence(self) -> float | None:
        return None if self.audio_features is None else float(self.audio_features["valence"])

    @property
    def arousal_raw(self) -> float:
        n = self.midi_features.n_instruments
        if n < 1:
            raise ValueError(f"{self.name}: no instruments")
        return self.midi_features.note_density / n

    def dataset_entry(self) -> dict:
        matched = dict(self.match)
        if self.audio_features is not None:
            matched["spotify_audio_features"] = self.audio_features
        return {"midi_features": self.midi_features.to_json(), "matched_features": matched}


def best_match(matches: Iterable[Mapping]) -> dict | None:
    matches = list(matches or [])
    if not matches:
        return None
    return dict(max(matches, key=lambda m: float(m.get("match_score", 0.0))))


def label_records(songs: Sequence[ScannedSong], metadata: Mapping[str, Sequence[Mapping]],
                  client: AudioFeatureClient) -> list[SongRecord]:
    """Attach MIDI features, the best metadata match and audio features.

    ``metadata`` is keyed by file stem, relative path, or content hash.
    Songs without a match or without audio features are left unlabeled.
    """
    out = []
    for s in songs:
        feats = midi_features(s.song.events, s.song.tempo_map, s.song.duration_ms)
        matches = metadata.get(Path(s.name).stem) or metadata.get(s.name) or metadata.get(s.content_hash)
        match = best_match(matches)
        audio = client.fetch(match) if match else None
        if match and audio is None:
            log.info("no audio features for %s", s.name)
        out.append(SongRecord(s.name, s.content_hash, feats, match or {}, audio))
    return out


def derive_conditions(records: Sequence[SongRecord], arousal_min: float, arousal_max: float) -> list[SongRecord]:
    if not arousal_max > arousal_min:
        raise DegenerateScaleError(f"arousal range [{arousal_min}, {arousal_max}] is degenerate")
    out = []
    for r in records:
        v = 2.0 * r.raw_valence - 1.0
        a = 2.0 * (r.arousal_raw - arousal_min) / (arousal_max - arousal_min) - 1.0
        cond = ConditionPair(min(max(v, -1.0), 1.0), min(max(a, -1.0), 1.0))
        out.append(SongRecord(r.name, r.content_hash, r.midi_features, r.match, r.audio_features, cond))
    return out


def quantile(sorted_vals: Sequence[float], q: float) -> float:
    """Linear interpolation between order statistics."""
    n = len(sorted_vals)
    pos = q * (n - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, n - 1)
    return sorted_vals[lo] + (pos - lo) * (sorted_vals[hi] - sorted_vals[lo])


def iqr_filter(values: Sequence[float], k: float = 1.5):
    """(lo fence, hi fence, keep mask) from the 1.5 x IQR rule."""
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) < 4:
        raise ValueError("iqr_filter needs at least 4 values")
    s = np.sort(vals)
    q1, q3 = quantile(s, 0.25), quantile(s, 0.75)
    iqr = q3 - q1
    lo, hi = q1 - k * iqr, q3 + k * iqr
    return lo, hi, (vals >= lo) & (vals <= hi)


@dataclass
class DatasetManifest:
    records: list[SongRecord]
    splits: dict[str, str]
    arousal_min: float
    arousal_max: float

    def split(self, name: str) -> list[SongRecord]:
        return [r for r in self.records if self.splits[r.name] == name]

    def to_json(self) -> dict:
        return {
            "arousal_min": self.arousal_min,
            "arousal_max": self.arousal_max,
            "records": [
                {"name": r.name, "content_hash": r.content_hash, "split": self.splits[r.name],
                 "valence": r.condition.valence, "arousal": r.condition.arousal,
                 "raw_valence": r.raw_valence, "arousal_raw": r.arousal_raw,
                 "midi_features": r.midi_features.to_json()}
                for r in self.records
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DatasetManifest":
        records, splits = [], {}
        for d in obj["records"]:
            mf = d["midi_features"]
            feats = MidiFeatures(mf["note_density"], mf["tempo"], mf["n_instruments"])
            records.append(SongRecord(d["name"], d["content_hash"], feats, {}, {"valence": d["raw_valence"]},
                                      ConditionPair(d["valence"], d["arousal"])))
            splits[d["name"]] = d["split"]
        return cls(records, splits, obj["arousal_min"], obj["arousal_max"])

    def save(self, path):
        atomic_write_bytes(path, json.dumps(self.to_json(), indent=2).encode())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            return cls.from_json(json.load(f))


def n_test(n: int) -> int:
    return int(math.floor(TEST_FRACTION * n + 0.5))


def build_manifest(records: Sequence[SongRecord]) -> DatasetManifest:
    """Filter labeled records, split by file name, and normalize conditions.

    Drops songs with fewer than three instruments, raw valence exactly 0,
    and valence or arousal outside the IQR fences; the alphabetically last
    5% form the test split; arousal min/max come from the training split.
    """
    recs = [r for r in records if r.audio_features is not None]
    recs = [r for r in recs if r.midi_features.n_instruments >= MIN_INSTRUMENTS]
    recs = [r for r in recs if r.raw_valence != 0.0]
    if len(recs) >= 4:
        _, _, keep_v = iqr_filter([r.raw_valence for r in recs])
        _, _, keep_a = iqr_filter([r.arousal_raw for r in recs])
        recs = [r for r, kv, ka in zip(recs, keep_v, keep_a) if kv and ka]
    if not recs:
        raise PipelineError("no records survive filtering")
    recs.sort(key=lambda r: r.name)
    cut = len(recs) - n_test(len(recs))
    splits = {r.name: ("train" if i < cut else "test") for i, r in enumerate(recs)}
    train_a = [r.arousal_raw for r in recs[:cut]] or [r.arousal_raw for r in recs]
    amin, amax = min(train_a), max(train_a)
    return DatasetManifest(derive_conditions(recs, amin, amax), splits, amin, amax)


def dataset_json(records: Sequence[SongRecord]) -> dict:
    return {r.content_hash: r.dataset_entry() for r in records}


def build_dataset(root, metadata: Mapping, client: AudioFeatureClient, out_dir) -> DatasetManifest:
    """Full pipeline; writes ``dataset.json`` and ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    songs = scan_songs(root)
    log.info("%d unique songs", len(songs))
    records = label_records(songs, metadata, client)
    labeled = [r for r in records if r.audio_features is not None]
    log.info("%d songs labeled", len(labeled))
    atomic_write_bytes(out_dir / "dataset.json", json.dumps(dataset_json(labeled), indent=2).encode())
    manifest = build_manifest(labeled)
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_split(manifest: DatasetManifest, root, split: str):
    """Tokenized ``SongData`` for the manifest records of one split."""
    from .training import song_data

    root = Path(root)
    out = []
    for r in manifest.split(split):
        song = read_midi((root / r.name).read_bytes())
        out.append(song_data(r.name, song.events, r.condition, song.tempo_map, song.timesig_map))
    return out
