import struct

import numpy as np
import pytest

from emogen.midi import Instrument, events_from_notes


def vlq(n: int) -> bytes:
    out = [n & 0x7F]
    n >>= 7
    while n:
        out.append(0x80 | (n & 0x7F))
        n >>= 7
    return bytes(reversed(out))


def track(events) -> bytes:
    """MTrk chunk from (delta_ticks, raw_event_bytes) pairs; end-of-track appended."""
    body = b"".join(vlq(d) + e for d, e in events) + b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + body


def smf(tracks, division=480, fmt=1) -> bytes:
    return b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division) + b"".join(tracks)


def tempo(us: int) -> bytes:
    return b"\xff\x51\x03" + us.to_bytes(3, "big")


def random_notes(rng, n_notes=60, span_ms=20_000, grid=1):
    notes = []
    for _ in range(n_notes):
        inst = int(rng.integers(5))
        pitch = int(rng.integers(21, 109))
        start = float(rng.integers(0, span_ms // grid) * grid)
        dur = float(rng.integers(8, 2000 // grid + 8) * grid)
        notes.append((Instrument(inst), pitch, start, start + dur))
    return notes


def random_events(rng, **kw):
    from emogen.midi import notes_from_events

    # pass through a pairing round so overlapping duplicates are resolved canonically
    ev = events_from_notes(random_notes(rng, **kw))
    return events_from_notes(notes_from_events(ev))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
