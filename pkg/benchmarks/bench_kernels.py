"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--length 1216] [--heads 16] [--repeat 3]

Prints the best-of-N wall time per kernel and backend plus the speedup.
"""
import argparse
import time

import numpy as np

from emogen import _fallback
from emogen.midi import Instrument, events_from_notes, write_midi

try:
    from emogen import _kernels
except ImportError:
    _kernels = None


def best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, L, rng):
    s = rng.standard_normal((n, L, L)).astype(np.float32)
    r = rng.standard_normal((n, L, L)).astype(np.float32)
    g = rng.standard_normal((n, L, L)).astype(np.float32)
    out = np.empty_like(s)
    dropped = np.empty_like(s)
    notes = [(Instrument.PIANO, 40 + (i * 7) % 40, 10.0 * i, 10.0 * i + 40) for i in range(20000)]
    midi = write_midi(events_from_notes(notes))
    body = midi.index(b"MTrk", midi.index(b"MTrk") + 4)  # the piano track
    length = int.from_bytes(midi[body + 4:body + 8], "big")

    def run(mod):
        y = np.empty_like(s)
        mod.rel_causal_softmax_forward(s, r, 0.25, y, dropped, 0.1, 7)
        return {
            "causal_softmax_forward": lambda: mod.causal_softmax_forward(s, out),
            "causal_softmax_backward": lambda: mod.causal_softmax_backward(y, g, out),
            "rel_softmax_forward": lambda: mod.rel_causal_softmax_forward(s, r, 0.25, out, dropped, 0.1, 7),
            "rel_softmax_backward": lambda: mod.rel_causal_softmax_backward(
                y, g, 0.25, np.empty_like(s), np.empty_like(s), dropped, 0.1),
            "scan_track": lambda: mod.scan_track(midi, body + 8, body + 8 + length),
        }

    return run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--length", type=int, default=1216)
    ap.add_argument("--heads", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    run = cases(args.heads, args.length, np.random.default_rng(0))
    py = run(_fallback)
    cy = run(_kernels) if _kernels is not None else {}
    print(f"(N, L, L) = ({args.heads}, {args.length}, {args.length}), float32, best of {args.repeat}")
    print(f"{'kernel':26s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}")
    for name, fn in py.items():
        tp = best(fn, args.repeat)
        if name in cy:
            tc = best(cy[name], args.repeat)
            print(f"{name:26s} {tp:10.4f} {tc:10.4f} {tp / tc:7.1f}x")
        else:
            print(f"{name:26s} {tp:10.4f} {'n/a':>10s}")


if __name__ == "__main__":
    main()
