# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: causal softmax and SMF track scanning.

Mirrors ``emogen._fallback`` exactly; ``emogen.kernels`` picks one at import.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf

cnp.import_array()


def causal_softmax_forward(floating[:, :, ::1] x, floating[:, :, ::1] out):
    """Row softmax over ``j <= i`` of each (L, L) slice; zeros above the diagonal."""
    cdef Py_ssize_t n = x.shape[0], L = x.shape[1]
    cdef Py_ssize_t b, i, j
    cdef double m, s, inv
    with nogil:
        for b in range(n):
            for i in range(L):
                m = x[b, i, 0]
                for j in range(1, i + 1):
                    if x[b, i, j] > m:
                        m = x[b, i, j]
                s = 0.0
                if floating is float:
                    for j in range(i + 1):
                        out[b, i, j] = expf(<float>(x[b, i, j] - m))
                        s += out[b, i, j]
                else:
                    for j in range(i + 1):
                        out[b, i, j] = exp(x[b, i, j] - m)
                        s += out[b, i, j]
                inv = 1.0 / s
                for j in range(i + 1):
                    out[b, i, j] = <floating>(out[b, i, j] * inv)
                for j in range(i + 1, L):
                    out[b, i, j] = 0
    return np.asarray(out)


def causal_softmax_backward(floating[:, :, ::1] y, floating[:, :, ::1] g,
                            floating[:, :, ::1] out):
    cdef Py_ssize_t n = y.shape[0], L = y.shape[1]
    cdef Py_ssize_t b, i, j
    cdef double dot
    with nogil:
        for b in range(n):
            for i in range(L):
                dot = 0.0
                for j in range(i + 1):
                    dot += g[b, i, j] * y[b, i, j]
                for j in range(i + 1):
                    out[b, i, j] = <floating>(y[b, i, j] * (g[b, i, j] - dot))
                for j in range(i + 1, L):
                    out[b, i, j] = 0
    return np.asarray(out)


cdef inline unsigned long long _splitmix(unsigned long long *state) noexcept nogil:
    cdef unsigned long long z
    state[0] += 0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def rel_causal_softmax_forward(floating[:, :, ::1] scores, floating[:, :, ::1] rel,
                               double scale, floating[:, :, ::1] out,
                               floating[:, :, ::1] dropped, double p,
                               unsigned long long seed):
    """Fused relative-attention softmax.

    ``out[b, i, j] = softmax_{j <= i}((scores[b, i, j] + rel[b, i, L-1-i+j]) * scale)``,
    i.e. ``rel`` is indexed by reversed distance exactly as the skew step
    would rearrange it. When ``p > 0`` an inverted-dropout copy is written to
    ``dropped`` using a splitmix64 stream seeded with ``seed``.
    """
    cdef Py_ssize_t n = scores.shape[0], L = scores.shape[1]
    cdef Py_ssize_t b, i, j, off
    cdef double m, s, inv, z, keep_scale = 1.0 / (1.0 - p) if p < 1.0 else 0.0
    cdef unsigned long long state = seed
    cdef unsigned long long threshold = <unsigned long long>(p * 18446744073709551615.0)
    cdef floating *sr
    cdef floating *rr
    cdef floating *orow
    cdef floating *drow
    with nogil:
        for b in range(n):
            for i in range(L):
                sr = &scores[b, i, 0]
                rr = &rel[b, i, 0]
                orow = &out[b, i, 0]
                off = L - 1 - i
                m = (sr[0] + rr[off]) * scale
                for j in range(1, i + 1):
                    z = (sr[j] + rr[off + j]) * scale
                    if z > m:
                        m = z
                s = 0.0
                for j in range(i + 1):
                    z = (sr[j] + rr[off + j]) * scale - m
                    if floating is float:
                        orow[j] = expf(<float>z)
                    else:
                        orow[j] = exp(z)
                    s += orow[j]
                inv = 1.0 / s
                for j in range(i + 1):
                    orow[j] = <floating>(orow[j] * inv)
                for j in range(i + 1, L):
                    orow[j] = 0
                if p > 0:
                    drow = &dropped[b, i, 0]
                    for j in range(i + 1):
                        if _splitmix(&state) < threshold:
                            drow[j] = 0
                        else:
                            drow[j] = <floating>(orow[j] * keep_scale)
                    for j in range(i + 1, L):
                        drow[j] = 0
    return np.asarray(out)


def rel_causal_softmax_backward(floating[:, :, ::1] y, floating[:, :, ::1] g,
                                double scale, floating[:, :, ::1] gscores,
                                floating[:, :, ::1] grel, floating[:, :, ::1] dropped,
                                double p):
    """Gradients w.r.t. ``scores`` and (unskewed) ``rel`` of the fused forward.

    ``g`` is the gradient of the dropped output when ``p > 0``; the keep mask
    is recovered from ``dropped != 0`` wherever ``y != 0``.
    """
    cdef Py_ssize_t n = y.shape[0], L = y.shape[1]
    cdef Py_ssize_t b, i, j, off
    cdef double dot, gy, keep_scale = 1.0 / (1.0 - p) if p < 1.0 else 0.0
    cdef floating *yr
    cdef floating *gr
    cdef floating *gs
    cdef floating *gl
    cdef floating *dr
    with nogil:
        for b in range(n):
            for i in range(L):
                yr = &y[b, i, 0]
                gr = &g[b, i, 0]
                gs = &gscores[b, i, 0]
                gl = &grel[b, i, 0]
                off = L - 1 - i
                if p > 0:
                    dr = &dropped[b, i, 0]
                    for j in range(i + 1):
                        gs[j] = <floating>(gr[j] * keep_scale if dr[j] != 0 else 0)
                else:
                    for j in range(i + 1):
                        gs[j] = gr[j]
                dot = 0.0
                for j in range(i + 1):
                    dot += gs[j] * yr[j]
                for j in range(i + 1):
                    gy = yr[j] * (gs[j] - dot) * scale
                    gs[j] = <floating>gy
                for j in range(i + 1, L):
                    gs[j] = 0
                for j in range(off):
                    gl[j] = 0
                for j in range(i + 1):
                    gl[off + j] = gs[j]
    return np.asarray(gscores), np.asarray(grel)


cdef inline int _read_vlq(const unsigned char[:] data, Py_ssize_t *pos,
                          Py_ssize_t end, long long *value) noexcept nogil:
    cdef long long v = 0
    cdef int k
    cdef unsigned char c
    for k in range(4):
        if pos[0] >= end:
            return -1
        c = data[pos[0]]
        pos[0] += 1
        v = (v << 7) | (c & 0x7F)
        if not (c & 0x80):
            value[0] = v
            return 0
    return -2


def scan_track(const unsigned char[:] data, Py_ssize_t start, Py_ssize_t end):
    """Decode one MTrk body into flat event arrays.

    Returns ``(ticks, kinds, channels, a, b, final_tick, err, err_offset)``; see
    ``emogen._fallback.scan_track`` for the event codes.
    """
    cdef Py_ssize_t cap = (end - start) // 2 + 2
    cdef cnp.ndarray[cnp.int64_t] ticks_arr = np.zeros(cap, dtype=np.int64)
    cdef cnp.ndarray[cnp.int8_t] kinds_arr = np.zeros(cap, dtype=np.int8)
    cdef cnp.ndarray[cnp.int8_t] chans_arr = np.zeros(cap, dtype=np.int8)
    cdef cnp.ndarray[cnp.int32_t] a_arr = np.zeros(cap, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t] b_arr = np.zeros(cap, dtype=np.int32)
    cdef long long[:] ticks = ticks_arr
    cdef signed char[:] kinds = kinds_arr
    cdef signed char[:] chans = chans_arr
    cdef int[:] av = a_arr
    cdef int[:] bv = b_arr
    cdef Py_ssize_t pos = start, n = 0, ev_start
    cdef long long tick = 0, delta = 0, length = 0
    cdef int status = 0, running = 0, hi, d1, d2, mtype, err = 0
    cdef Py_ssize_t err_offset = -1

    while pos < end:
        ev_start = pos
        if _read_vlq(data, &pos, end, &delta) != 0:
            err = 1
            err_offset = ev_start
            break
        tick += delta
        if pos >= end:
            err = 1
            err_offset = pos
            break
        status = data[pos]
        if status & 0x80:
            pos += 1
        else:
            if running == 0:
                err = 2
                err_offset = pos
                break
            status = running
        if status == 0xFF:
            if pos >= end:
                err = 1
                err_offset = pos
                break
            mtype = data[pos]
            pos += 1
            if _read_vlq(data, &pos, end, &length) != 0 or pos + length > end:
                err = 1
                err_offset = pos
                break
            if mtype == 0x51 and length == 3:
                ticks[n] = tick
                kinds[n] = 3
                av[n] = (data[pos] << 16) | (data[pos + 1] << 8) | data[pos + 2]
                n += 1
            elif mtype == 0x58 and length >= 2:
                ticks[n] = tick
                kinds[n] = 4
                av[n] = data[pos]
                bv[n] = data[pos + 1]
                n += 1
            elif mtype == 0x2F:
                ticks[n] = tick
                kinds[n] = 5
                n += 1
            pos += length
            if mtype == 0x2F:
                break
            continue
        if status == 0xF0 or status == 0xF7:
            if _read_vlq(data, &pos, end, &length) != 0 or pos + length > end:
                err = 1
                err_offset = pos
                break
            pos += length
            continue
        if status >= 0xF0:
            err = 2
            err_offset = ev_start
            break
        running = status
        hi = status & 0xF0
        if hi == 0xC0 or hi == 0xD0:
            if pos + 1 > end:
                err = 1
                err_offset = pos
                break
            d1 = data[pos]
            pos += 1
            if hi == 0xC0:
                ticks[n] = tick
                kinds[n] = 2
                chans[n] = status & 0x0F
                av[n] = d1 & 0x7F
                n += 1
            continue
        if pos + 2 > end:
            err = 1
            err_offset = pos
            break
        d1 = data[pos]
        d2 = data[pos + 1]
        pos += 2
        if hi == 0x90 or hi == 0x80:
            ticks[n] = tick
            kinds[n] = 1 if (hi == 0x90 and d2 > 0) else 0
            chans[n] = status & 0x0F
            av[n] = d1 & 0x7F
            bv[n] = d2 & 0x7F
            n += 1
    return (ticks_arr[:n], kinds_arr[:n], chans_arr[:n], a_arr[:n], b_arr[:n],
            tick, err, err_offset)
