"""Synthetic labeled songs with known emotion statistics.

Arousal sets the note rate shared by all parts; valence sets how often the
piano dyads are major thirds (4 semitones) rather than minor thirds (3).
Both statistics can be measured back from any token sequence, which makes
the corpus a ground truth for checking that conditioning works.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .midi import ON, Instrument, NoteEvent, events_from_notes
from .tokenizer import SHIFT_MS, ConditionPair, decode, encode

MIN_RATE = 1.5  # note onsets per second per part at arousal -1
MAX_RATE = 6.0  # ... at arousal +1
BASS_ROOTS = (36, 38, 40, 41, 43, 45)


@dataclass
class SyntheticSong:
    name: str
    events: list[NoteEvent]
    condition: ConditionPair
    bar_ms: float = 2000.0


def onset_rate(arousal: float) -> float:
    return MIN_RATE + (MAX_RATE - MIN_RATE) * (arousal + 1.0) / 2.0


def make_song(valence: float, arousal: float, rng: np.random.Generator,
              duration_ms: float = 24_000.0, name: str = "song") -> SyntheticSong:
    ioi = max(SHIFT_MS, SHIFT_MS * round(1000.0 / onset_rate(arousal) / SHIFT_MS))
    dur = max(SHIFT_MS, SHIFT_MS * round(0.75 * ioi / SHIFT_MS))
    p_major = (valence + 1.0) / 2.0
    motif_len = int(rng.integers(3, 7))
    motif = rng.choice(BASS_ROOTS, size=motif_len)
    notes = []
    k = 0
    t = 0.0
    while t + dur <= duration_ms:
        root = int(motif[k % motif_len])
        third = 4 if rng.random() < p_major else 3
        notes.append((Instrument.BASS, root, t, t + dur))
        notes.append((Instrument.PIANO, root + 24, t, t + dur))
        notes.append((Instrument.PIANO, root + 24 + third, t, t + dur))
        notes.append((Instrument.DRUMS, 36 if k % 2 == 0 else 38, t, t + dur))
        k += 1
        t += ioi
    return SyntheticSong(name, events_from_notes(notes), ConditionPair(valence, arousal))


def make_corpus(n_songs: int, seed: int = 0, duration_ms: float = 24_000.0,
                grid: bool = False) -> list[SyntheticSong]:
    """Songs with uniformly drawn (valence, arousal); ``grid`` cycles the 5x5 bin midpoints."""
    rng = np.random.default_rng(seed)
    mids = (-0.8, -0.4, 0.0, 0.4, 0.8)
    songs = []
    for i in range(n_songs):
        if grid:
            v, a = mids[i % 5], mids[(i // 5) % 5]
        else:
            v, a = (float(x) for x in rng.uniform(-1, 1, size=2))
        songs.append(make_song(v, a, rng, duration_ms, name=f"song_{i:05d}"))
    return songs


def measured_density(tokens) -> float:
    """Note onsets per second of the decoded sequence, per sounding instrument."""
    events = decode(tokens)
    ons = [e for e in events if e.kind == ON]
    if not ons or events[-1].time_ms <= 0:
        return 0.0
    n_inst = len({e.instrument for e in ons})
    return len(ons) / (events[-1].time_ms / 1000.0) / n_inst


def measured_major_fraction(tokens) -> float:
    """Share of major thirds among piano dyads whose interval is 3 or 4 semitones.

    Returns 0.5 when no such dyad exists.
    """
    events = decode(tokens)
    by_time: dict[float, list[int]] = {}
    for e in events:
        if e.kind == ON and e.instrument == Instrument.PIANO:
            by_time.setdefault(e.time_ms, []).append(e.pitch)
    major = minor = 0
    for pitches in by_time.values():
        if len(pitches) != 2:
            continue
        gap = abs(pitches[1] - pitches[0])
        major += gap == 4
        minor += gap == 3
    if major + minor == 0:
        return 0.5
    return major / (major + minor)


def song_tokens(song: SyntheticSong) -> list[int]:
    return encode(song.events)


# each onset sounds bass, two piano notes and one drum: 4 note-ons over 3 parts
NOTES_PER_PART = 4.0 / 3.0


def statistic_estimate(tokens) -> tuple[float, float]:
    """(valence, arousal) read back from the measured statistics, clamped to [-1, 1]."""
    rate = measured_density(tokens) / NOTES_PER_PART
    a = 2.0 * (rate - MIN_RATE) / (MAX_RATE - MIN_RATE) - 1.0
    v = 2.0 * measured_major_fraction(tokens) - 1.0
    return float(np.clip(v, -1, 1)), float(np.clip(a, -1, 1))


def statistic_regressor(windows) -> np.ndarray:
    """Window-wise ``statistic_estimate``, shaped like a regressor's output."""
    return np.array([statistic_estimate(w) for w in windows], dtype=np.float64).reshape(-1, 2)
