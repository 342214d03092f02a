"""Event vocabulary: note-on/note-off per instrument, 8 ms time shifts, control tokens.

Layout (base vocabulary, 1007 ids)::

    0    .. 439   note-on,  instrument-major, pitch 21..108
    440  .. 879   note-off, same order
    880  .. 1004  time shift k, shifting (k + 1) * 8 ms
    1005          <START>
    1006          <PAD>

The discrete-token vocabulary appends five valence bins (1007..1011) and
five arousal bins (1012..1016), each ordered -2..+2.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .midi import (
    N_INSTRUMENTS,
    N_PITCHES,
    OFF,
    ON,
    PITCH_MIN,
    Instrument,
    NoteEvent,
    events_from_notes,
    is_sorted,
)

SHIFT_MS = 8
N_SHIFTS = 125
MAX_SHIFT_MS = SHIFT_MS * N_SHIFTS

N_NOTE = N_INSTRUMENTS * N_PITCHES  # 440
NOTE_ON_OFFSET = 0
NOTE_OFF_OFFSET = N_NOTE
SHIFT_OFFSET = 2 * N_NOTE  # 880
START = SHIFT_OFFSET + N_SHIFTS  # 1005
PAD = START + 1  # 1006
BASE_VOCAB_SIZE = PAD + 1  # 1007

N_BINS = 5
VALENCE_OFFSET = BASE_VOCAB_SIZE  # 1007
AROUSAL_OFFSET = VALENCE_OFFSET + N_BINS  # 1012
COND_VOCAB_SIZE = AROUSAL_OFFSET + N_BINS  # 1017

_BIN_EDGES = (-0.6, -0.2, 0.2, 0.6)


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionPair:
    valence: float
    arousal: float

    def __post_init__(self):
        for name in ("valence", "arousal"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0 or math.isnan(v):
                raise ValueError(f"{name}={v} outside [-1, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.valence, self.arousal])


def vocab_size(conditional_tokens: bool = False) -> int:
    return COND_VOCAB_SIZE if conditional_tokens else BASE_VOCAB_SIZE


def note_on_id(instrument: int, pitch: int) -> int:
    return NOTE_ON_OFFSET + instrument * N_PITCHES + (pitch - PITCH_MIN)


def note_off_id(instrument: int, pitch: int) -> int:
    return NOTE_OFF_OFFSET + instrument * N_PITCHES + (pitch - PITCH_MIN)


def shift_id(ms: int) -> int:
    if ms % SHIFT_MS or not SHIFT_MS <= ms <= MAX_SHIFT_MS:
        raise ValueError(f"no time-shift token for {ms} ms")
    return SHIFT_OFFSET + ms // SHIFT_MS - 1


def is_note(token) -> bool:
    return 0 <= token < SHIFT_OFFSET


def is_shift(token) -> bool:
    return SHIFT_OFFSET <= token < START


def is_condition(token) -> bool:
    return VALENCE_OFFSET <= token < COND_VOCAB_SIZE


def token_name(token: int) -> str:
    if token < NOTE_OFF_OFFSET:
        inst, p = divmod(token, N_PITCHES)
        return f"NOTE_ON_{Instrument(inst).name}_{p + PITCH_MIN}"
    if token < SHIFT_OFFSET:
        inst, p = divmod(token - NOTE_OFF_OFFSET, N_PITCHES)
        return f"NOTE_OFF_{Instrument(inst).name}_{p + PITCH_MIN}"
    if token < START:
        return f"TIME_SHIFT_{(token - SHIFT_OFFSET + 1) * SHIFT_MS}"
    if token == START:
        return "<START>"
    if token == PAD:
        return "<PAD>"
    if token < AROUSAL_OFFSET:
        return f"VALENCE_{token - VALENCE_OFFSET - 2:+d}"
    if token < COND_VOCAB_SIZE:
        return f"AROUSAL_{token - AROUSAL_OFFSET - 2:+d}"
    raise ValueError(f"token {token} outside vocabulary")


def vocab_table(conditional_tokens: bool = True) -> str:
    """Tab-separated ``id<TAB>name`` lines in id order."""
    n = vocab_size(conditional_tokens)
    return "".join(f"{i}\t{token_name(i)}\n" for i in range(n))


def quantize_gap(gap_ms: float, carry_ms: float = 0.0) -> tuple[list[int], float]:
    """Time-shift tokens for a gap, rounding to the 8 ms grid with a carried residue.

    ``gap + carry`` is rounded to the nearest multiple of 8 (ties up) and the
    residue is returned, so decoded times never drift more than 4 ms.
    """
    if gap_ms < 0:
        raise ValueError(f"negative gap {gap_ms}")
    total = gap_ms + carry_ms
    q = max(0, int(math.floor(total / SHIFT_MS + 0.5))) * SHIFT_MS
    tokens = [SHIFT_OFFSET + N_SHIFTS - 1] * (q // MAX_SHIFT_MS)
    rem = q % MAX_SHIFT_MS
    if rem:
        tokens.append(SHIFT_OFFSET + rem // SHIFT_MS - 1)
    return tokens, total - q


def encode(events: Sequence[NoteEvent]) -> list[int]:
    if not is_sorted(events):
        raise EncodeError("events must be in canonical order")
    tokens: list[int] = []
    carry = 0.0
    t_prev = 0.0
    for ev in events:
        shifts, carry = quantize_gap(ev.time_ms - t_prev, carry)
        tokens.extend(shifts)
        t_prev = ev.time_ms
        if ev.kind == ON:
            tokens.append(note_on_id(ev.instrument, ev.pitch))
        else:
            tokens.append(note_off_id(ev.instrument, ev.pitch))
    return tokens


def decode(tokens: Iterable[int]) -> list[NoteEvent]:
    """Rebuild note events from any token sequence.

    Non-music tokens are skipped, unmatched offs dropped, and notes still
    sounding at the end are closed at the final time (at least one grid step
    after their onset, so they remain audible).
    """
    t = 0
    active: dict[tuple[int, int], int] = {}
    notes = []
    for tok in tokens:
        tok = int(tok)
        if tok < NOTE_OFF_OFFSET:
            key = divmod(tok, N_PITCHES)
            if key in active:
                notes.append((key[0], key[1] + PITCH_MIN, active.pop(key), t))
            active[key] = t
        elif tok < SHIFT_OFFSET:
            key = divmod(tok - NOTE_OFF_OFFSET, N_PITCHES)
            if key in active:
                notes.append((key[0], key[1] + PITCH_MIN, active.pop(key), t))
        elif tok < START:
            t += (tok - SHIFT_OFFSET + 1) * SHIFT_MS
    for (inst, p), start in active.items():
        notes.append((inst, p + PITCH_MIN, start, max(t, start + SHIFT_MS)))
    return events_from_notes(notes)


def bin_condition(value: float) -> int:
    """Index in -2..+2 of the equal-width bin containing ``value``.

    Lower edges are inclusive; the top bin also includes 1.0.
    """
    if not -1.0 <= value <= 1.0:
        raise ValueError(f"condition value {value} outside [-1, 1]")
    return bisect.bisect_right(_BIN_EDGES, value) - 2


def condition_tokens(c: ConditionPair) -> list[int]:
    return [
        VALENCE_OFFSET + bin_condition(c.valence) + 2,
        AROUSAL_OFFSET + bin_condition(c.arousal) + 2,
    ]


def strip_non_music(tokens: Iterable[int]) -> list[int]:
    return [int(t) for t in tokens if 0 <= t < START]


def token_times(tokens: Sequence[int]) -> np.ndarray:
    """Elapsed milliseconds before each token."""
    toks = np.asarray(tokens, dtype=np.int64)
    step = np.where((toks >= SHIFT_OFFSET) & (toks < START), (toks - SHIFT_OFFSET + 1) * SHIFT_MS, 0)
    return np.concatenate([[0], np.cumsum(step)[:-1]]) if len(toks) else np.zeros(0, dtype=np.int64)


def bar_token_offsets(tokens: Sequence[int], bar_times_ms: Sequence[float]) -> np.ndarray:
    """Index of the first token at or after each bar time (bars past the end dropped)."""
    times = token_times(tokens)
    idx = np.searchsorted(times, np.asarray(bar_times_ms, dtype=np.float64) - SHIFT_MS / 2, side="left")
    idx = idx[idx < len(tokens)]
    return np.unique(idx)
