"""Standard MIDI File reading/writing and note-level features.

Notes are reduced to the five instrument categories used throughout the
package (drums, piano, guitar, bass, strings) and to the piano pitch range.
"""
from __future__ import annotations

import bisect
import hashlib
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import kernels

PITCH_MIN = 21
PITCH_MAX = 108
N_PITCHES = PITCH_MAX - PITCH_MIN + 1
PERCUSSION_CHANNEL = 9
DEFAULT_TEMPO_US = 500_000
DEFAULT_BPM = 120.0
HASH_BIN_MS = 50.0

OFF = 0
ON = 1


class Instrument(IntEnum):
    DRUMS = 0
    PIANO = 1
    GUITAR = 2
    BASS = 3
    STRINGS = 4


N_INSTRUMENTS = len(Instrument)


class NoteEvent(NamedTuple):
    """One note boundary.

    Field order makes plain tuple ordering the canonical order: time, then
    offs before ons, then instrument, then pitch.
    """

    time_ms: float
    kind: int
    instrument: int
    pitch: int


def note_on(time_ms, instrument, pitch) -> NoteEvent:
    return NoteEvent(float(time_ms), ON, int(instrument), int(pitch))


def note_off(time_ms, instrument, pitch) -> NoteEvent:
    return NoteEvent(float(time_ms), OFF, int(instrument), int(pitch))


class MidiParseError(ValueError):
    """Malformed SMF data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class EmptyMidiError(MidiParseError):
    pass


class DegenerateDurationError(ValueError):
    pass


@dataclass(frozen=True)
class MidiFeatures:
    note_density: float
    tempo_bpm: float
    n_instruments: int

    def to_json(self) -> dict:
        # key names follow the published dataset entry
        return {
            "note_density": self.note_density,
            "tempo": self.tempo_bpm,
            "n_instruments": self.n_instruments,
        }


@dataclass
class MidiSong:
    events: list[NoteEvent]
    tempo_map: list[tuple[float, float]] = field(default_factory=list)
    timesig_map: list[tuple[float, int, int]] = field(default_factory=list)
    duration_ms: float = 0.0


def map_to_five(program: int, is_percussion_channel: bool) -> Instrument:
    """Map a General MIDI program to one of the five categories."""
    if not 0 <= program <= 127:
        raise ValueError(f"program {program} outside 0..127")
    if is_percussion_channel:
        return Instrument.DRUMS
    if program <= 7:
        return Instrument.PIANO
    if 24 <= program <= 31:
        return Instrument.GUITAR
    if 32 <= program <= 39:
        return Instrument.BASS
    return Instrument.STRINGS


def is_sorted(events: Sequence[NoteEvent]) -> bool:
    return all(events[i] <= events[i + 1] for i in range(len(events) - 1))


def events_from_notes(notes: Iterable[tuple[int, int, float, float]]) -> list[NoteEvent]:
    """Canonical event list from ``(instrument, pitch, start_ms, end_ms)`` notes.

    Zero-length notes are dropped.
    """
    out = []
    for inst, pitch, start, end in notes:
        if end <= start:
            continue
        out.append(note_on(start, inst, pitch))
        out.append(note_off(end, inst, pitch))
    out.sort()
    return out


def notes_from_events(events: Sequence[NoteEvent], end_ms: float | None = None):
    """Pair ons with offs. Unmatched offs are dropped, dangling ons closed at ``end_ms``.

    A repeated on for a sounding note closes the previous note first.
    """
    if end_ms is None:
        end_ms = events[-1].time_ms if events else 0.0
    active: dict[tuple[int, int], float] = {}
    notes = []
    for ev in events:
        key = (ev.instrument, ev.pitch)
        if ev.kind == ON:
            if key in active:
                notes.append((key[0], key[1], active.pop(key), ev.time_ms))
            active[key] = ev.time_ms
        elif key in active:
            notes.append((key[0], key[1], active.pop(key), ev.time_ms))
    for (inst, pitch), start in active.items():
        notes.append((inst, pitch, start, max(end_ms, start)))
    notes.sort(key=lambda n: (n[2], n[0], n[1], n[3]))
    return notes


# ---------------------------------------------------------------- reading


def _ticks_to_ms_fn(tempo_ticks: list[tuple[int, int]], division: int):
    """Return a vectorized tick -> ms converter for a tempo map given in ticks.

    ``division`` is the raw header word; SMPTE divisions ignore the tempo map.
    """
    if division & 0x8000:
        fps = 256 - (division >> 8)
        tpf = division & 0xFF
        ms_per_tick = 1000.0 / (fps * tpf)

        def smpte(ticks):
            return np.asarray(ticks, dtype=np.float64) * ms_per_tick

        return smpte

    starts = [0]
    tempos = [DEFAULT_TEMPO_US]
    for tick, tempo in tempo_ticks:
        if tick == starts[-1]:
            tempos[-1] = tempo
        else:
            starts.append(tick)
            tempos.append(tempo)
    starts_arr = np.asarray(starts, dtype=np.int64)
    tempos_arr = np.asarray(tempos, dtype=np.float64)
    seg_ms = np.diff(starts_arr) * tempos_arr[:-1] / (division * 1000.0)
    offsets = np.concatenate([[0.0], np.cumsum(seg_ms)])

    def convert(ticks):
        ticks = np.asarray(ticks, dtype=np.int64)
        idx = np.searchsorted(starts_arr, ticks, side="right") - 1
        return offsets[idx] + (ticks - starts_arr[idx]) * tempos_arr[idx] / (division * 1000.0)

    return convert


def read_midi(data: bytes) -> MidiSong:
    """Parse an SMF byte stream into notes plus tempo and meter maps."""
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiParseError(f"bad header length {hlen}", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt > 2:
        raise MidiParseError(f"unsupported format {fmt}", 8)
    if division == 0 or (division & 0x8000 and (division & 0xFF) == 0):
        raise MidiParseError("zero time division", 12)
    if ntracks == 0:
        raise EmptyMidiError("file declares zero tracks", 10)

    pos = 8 + hlen
    tracks = []
    while pos < len(data) and len(tracks) < ntracks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        ctype = data[pos:pos + 4]
        (clen,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = pos + 8
        if body + clen > len(data):
            raise MidiParseError(f"chunk length {clen} overruns file", pos + 4)
        if ctype == b"MTrk":
            res = kernels.scan_track(data, body, body + clen)
            if res[6]:
                what = "truncated event" if res[6] == kernels.ERR_TRUNCATED else "invalid status byte"
                raise MidiParseError(f"{what} in track {len(tracks)}", int(res[7]))
            tracks.append(res)
        elif not ctype.isalnum():
            raise MidiParseError(f"invalid chunk type {ctype!r}", pos)
        pos = body + clen
    if not tracks:
        raise EmptyMidiError("no MTrk chunks", pos)

    ticks = np.concatenate([t[0] for t in tracks])
    kinds = np.concatenate([t[1] for t in tracks])
    chans = np.concatenate([t[2] for t in tracks])
    av = np.concatenate([t[3] for t in tracks])
    bv = np.concatenate([t[4] for t in tracks])
    end_tick = max(int(t[5]) for t in tracks)
    order = np.argsort(ticks, kind="stable")  # keeps track order, then file order

    tempo_sel = order[kinds[order] == kernels.TEMPO]
    tempo_ticks = [(int(ticks[i]), int(av[i])) for i in tempo_sel if av[i] > 0]
    to_ms = _ticks_to_ms_fn(tempo_ticks, division)
    times = to_ms(ticks)
    duration_ms = float(to_ms([end_tick])[0])

    programs = [0] * 16
    active: dict[tuple[int, int], float] = {}
    notes = []
    for i in order[(kinds[order] <= kernels.PROGRAM)].tolist():
        kind = kinds[i]
        ch = int(chans[i])
        if kind == kernels.PROGRAM:
            programs[ch] = int(av[i])
            continue
        pitch = int(av[i])
        if pitch < PITCH_MIN or pitch > PITCH_MAX:
            continue
        inst = int(map_to_five(programs[ch], ch == PERCUSSION_CHANNEL))
        key = (inst, pitch)
        t = float(times[i])
        if key in active:
            notes.append((inst, pitch, active.pop(key), t))
        if kind == kernels.NOTE_ON:
            active[key] = t
    for (inst, pitch), start in active.items():
        notes.append((inst, pitch, start, duration_ms))

    tempo_map = []
    if not division & 0x8000:
        for tick, tempo in tempo_ticks:
            entry = (float(to_ms([tick])[0]), 60_000_000.0 / tempo)
            if tempo_map and tempo_map[-1][0] == entry[0]:
                tempo_map[-1] = entry
            else:
                tempo_map.append(entry)
    timesig_map = []
    for i in order[kinds[order] == kernels.TIMESIG].tolist():
        entry = (float(times[i]), int(av[i]), 2 ** int(bv[i]))
        if timesig_map and timesig_map[-1][0] == entry[0]:
            timesig_map[-1] = entry
        else:
            timesig_map.append(entry)

    return MidiSong(events_from_notes(notes), tempo_map, timesig_map, duration_ms)


def parse_midi(data: bytes) -> list[NoteEvent]:
    return read_midi(data).events


# ---------------------------------------------------------------- writing


def _vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


_CHANNELS = {
    Instrument.DRUMS: PERCUSSION_CHANNEL,
    Instrument.PIANO: 0,
    Instrument.GUITAR: 1,
    Instrument.BASS: 2,
    Instrument.STRINGS: 3,
}
_PROGRAMS = {
    Instrument.DRUMS: 0,
    Instrument.PIANO: 0,
    Instrument.GUITAR: 24,
    Instrument.BASS: 32,
    Instrument.STRINGS: 48,
}
# 500 ticks per quarter at 120 BPM: one tick per millisecond
_WRITE_TPQN = 500


def write_midi(events: Sequence[NoteEvent], velocity: int = 80) -> bytes:
    """Serialize events as a format-1 SMF, one track per instrument category.

    Times are rounded to whole milliseconds (one tick each).
    """
    if not 1 <= velocity <= 127:
        raise ValueError(f"velocity {velocity} outside 1..127")
    per_inst: dict[int, list[NoteEvent]] = {int(i): [] for i in Instrument}
    for ev in events:
        per_inst[ev.instrument].append(ev)

    chunks = []
    for inst in Instrument:
        ch = _CHANNELS[inst]
        body = bytearray()
        if inst == Instrument.DRUMS:
            body += b"\x00\xff\x51\x03" + DEFAULT_TEMPO_US.to_bytes(3, "big")
            body += b"\x00\xff\x58\x04\x04\x02\x18\x08"
        body += b"\x00" + bytes([0xC0 | ch, _PROGRAMS[inst]])
        last = 0
        for ev in per_inst[int(inst)]:
            tick = int(round(ev.time_ms))
            body += _vlq(tick - last)
            last = tick
            if ev.kind == ON:
                body += bytes([0x90 | ch, ev.pitch, velocity])
            else:
                body += bytes([0x80 | ch, ev.pitch, 64])
        body += b"\x00\xff\x2f\x00"
        chunks.append(b"MTrk" + struct.pack(">I", len(body)) + bytes(body))
    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), _WRITE_TPQN)
    return header + b"".join(chunks)


# ---------------------------------------------------------------- analysis


def content_hash(events: Sequence[NoteEvent], bin_ms: float = HASH_BIN_MS) -> str:
    """MD5 of the binarized instrument x pitch x time roll (50 ms bins)."""
    notes = notes_from_events(events)
    n_bins = 0
    cells = []
    for inst, pitch, start, end in notes:
        b0 = int(np.floor(start / bin_ms))
        b1 = max(b0 + 1, int(np.floor(end / bin_ms)))
        cells.append((inst, pitch - PITCH_MIN, b0, b1))
        n_bins = max(n_bins, b1)
    roll = np.zeros((N_INSTRUMENTS, N_PITCHES, n_bins), dtype=bool)
    for inst, p, b0, b1 in cells:
        roll[inst, p, b0:b1] = True
    h = hashlib.md5()
    h.update(struct.pack("<III", *roll.shape))
    h.update(np.packbits(roll, axis=None).tobytes())
    return h.hexdigest()


def _tempo_segments(tempo_map, start_ms=0.0):
    """Sorted (time_ms, bpm) segments with an implied 120 BPM at t=0."""
    segs = [(0.0, DEFAULT_BPM)]
    for t, bpm in sorted(tempo_map or []):
        if bpm <= 0:
            continue
        if t <= segs[-1][0]:
            segs[-1] = (segs[-1][0], bpm)
        else:
            segs.append((float(t), float(bpm)))
    return segs


def _advance(segs, t_ms: float, quarters: float) -> float:
    """Time reached after ``quarters`` beats starting from ``t_ms``."""
    times = [s[0] for s in segs]
    k = bisect.bisect_right(times, t_ms) - 1
    while True:
        bpm = segs[k][1]
        ms_per_q = 60_000.0 / bpm
        seg_end = segs[k + 1][0] if k + 1 < len(segs) else float("inf")
        avail = (seg_end - t_ms) / ms_per_q
        if quarters <= avail:
            return t_ms + quarters * ms_per_q
        quarters -= avail
        t_ms = seg_end
        k += 1


def bar_boundaries(events: Sequence[NoteEvent], tempo_map=None, timesig_map=None,
                   end_ms: float | None = None) -> list[float]:
    """Downbeat times from 0 to the last event (4/4 and 120 BPM when absent).

    A time-signature change always starts a new bar.
    """
    if end_ms is None:
        end_ms = events[-1].time_ms if events else 0.0
    segs = _tempo_segments(tempo_map)
    sigs = [(0.0, 4, 4)]
    for t, num, den in sorted(timesig_map or []):
        if t <= sigs[-1][0]:
            sigs[-1] = (sigs[-1][0], num, den)
        else:
            sigs.append((float(t), num, den))

    bars = [0.0]
    t = 0.0
    si = 0
    eps = 1e-6
    while True:
        while si + 1 < len(sigs) and sigs[si + 1][0] <= t + eps:
            si += 1
        _, num, den = sigs[si]
        nxt = _advance(segs, t, num * 4.0 / den)
        if si + 1 < len(sigs) and sigs[si + 1][0] < nxt - eps:
            nxt = sigs[si + 1][0]
        if nxt > end_ms + eps:
            break
        bars.append(nxt)
        t = nxt
    return bars


def midi_features(events: Sequence[NoteEvent], tempo_map=None,
                  duration_ms: float | None = None) -> MidiFeatures:
    if duration_ms is None:
        duration_ms = events[-1].time_ms if events else 0.0
    n_on = sum(1 for e in events if e.kind == ON)
    if duration_ms <= 0:
        if n_on:
            raise DegenerateDurationError("notes present but song duration is zero")
        density = 0.0
    else:
        density = n_on / (duration_ms / 1000.0)

    segs = _tempo_segments(tempo_map)
    if not tempo_map:
        tempo = DEFAULT_BPM
    elif duration_ms <= 0:
        tempo = segs[0][1]
    else:
        total = 0.0
        for k, (t0, bpm) in enumerate(segs):
            t1 = segs[k + 1][0] if k + 1 < len(segs) else duration_ms
            t1 = min(t1, duration_ms)
            if t1 > t0:
                total += (t1 - t0) * bpm
        tempo = total / duration_ms
    n_inst = len({e.instrument for e in events if e.kind == ON})
    return MidiFeatures(density, tempo, n_inst)
