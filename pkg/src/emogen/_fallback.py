"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np

# event kind codes produced by scan_track
NOTE_OFF, NOTE_ON, PROGRAM, TEMPO, TIMESIG, END_OF_TRACK = range(6)

# error codes
ERR_TRUNCATED = 1
ERR_STATUS = 2


def causal_softmax_forward(x, out):
    L = x.shape[-1]
    mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    z = np.where(mask, -np.inf, x)
    z = z - z.max(axis=-1, keepdims=True)
    np.exp(z, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def causal_softmax_backward(y, g, out):
    dot = (g * y).sum(axis=-1, keepdims=True)
    np.multiply(y, g - dot, out=out)
    return out


def skew_array(x):
    """(..., L, L) reversed-distance matrix -> key order via pad / reshape / slice."""
    L = x.shape[-1]
    lead = x.shape[:-2]
    padded = np.zeros(lead + (L, L + 1), dtype=x.dtype)
    padded[..., 1:] = x
    return padded.reshape(lead + (L + 1, L))[..., 1:, :]


def unskew_array(g):
    """Adjoint of ``skew_array``."""
    L = g.shape[-1]
    lead = g.shape[:-2]
    full = np.zeros(lead + (L + 1, L), dtype=g.dtype)
    full[..., 1:, :] = g
    return full.reshape(lead + (L, L + 1))[..., 1:]


def rel_causal_softmax_forward(scores, rel, scale, out, dropped, p, seed):
    z = (scores + skew_array(rel)) * scores.dtype.type(scale)
    causal_softmax_forward(z, out)
    if p > 0:
        rng = np.random.default_rng(seed)
        keep = rng.random(out.shape, dtype=np.float64) >= p
        np.multiply(out, keep, out=dropped)
        dropped *= dropped.dtype.type(1.0 / (1.0 - p))
    return out


def rel_causal_softmax_backward(y, g, scale, gscores, grel, dropped, p):
    if p > 0:
        g = np.where(dropped != 0, g * g.dtype.type(1.0 / (1.0 - p)), 0).astype(g.dtype)
    causal_softmax_backward(y, g, gscores)
    gscores *= gscores.dtype.type(scale)
    L = y.shape[-1]
    gscores[:, np.triu(np.ones((L, L), dtype=bool), k=1)] = 0
    grel[...] = unskew_array(gscores)
    return gscores, grel


def _read_vlq(data, pos, end):
    value = 0
    for _ in range(4):
        if pos >= end:
            return None, pos
        c = data[pos]
        pos += 1
        value = (value << 7) | (c & 0x7F)
        if not c & 0x80:
            return value, pos
    return None, pos


def scan_track(data, start, end):
    """Decode one MTrk body into flat event arrays.

    Returns ``(ticks, kinds, channels, a, b, final_tick, err, err_offset)``.
    ``kinds`` uses the module-level codes; for notes ``a`` is the pitch and
    ``b`` the velocity, for tempo ``a`` is microseconds per quarter note, for
    time signatures ``a``/``b`` are numerator and log2(denominator).
    """
    data = bytes(data)
    ticks, kinds, chans, av, bv = [], [], [], [], []
    pos, tick, running = start, 0, 0
    err, err_offset = 0, -1

    def emit(kind, ch=0, a=0, b=0):
        ticks.append(tick)
        kinds.append(kind)
        chans.append(ch)
        av.append(a)
        bv.append(b)

    while pos < end:
        ev_start = pos
        delta, pos = _read_vlq(data, pos, end)
        if delta is None:
            err, err_offset = ERR_TRUNCATED, ev_start
            break
        tick += delta
        if pos >= end:
            err, err_offset = ERR_TRUNCATED, pos
            break
        status = data[pos]
        if status & 0x80:
            pos += 1
        elif running == 0:
            err, err_offset = ERR_STATUS, pos
            break
        else:
            status = running
        if status == 0xFF:
            if pos >= end:
                err, err_offset = ERR_TRUNCATED, pos
                break
            mtype = data[pos]
            pos += 1
            length, pos = _read_vlq(data, pos, end)
            if length is None or pos + length > end:
                err, err_offset = ERR_TRUNCATED, pos
                break
            if mtype == 0x51 and length == 3:
                emit(TEMPO, a=(data[pos] << 16) | (data[pos + 1] << 8) | data[pos + 2])
            elif mtype == 0x58 and length >= 2:
                emit(TIMESIG, a=data[pos], b=data[pos + 1])
            elif mtype == 0x2F:
                emit(END_OF_TRACK)
            pos += length
            if mtype == 0x2F:
                break
            continue
        if status in (0xF0, 0xF7):
            length, pos = _read_vlq(data, pos, end)
            if length is None or pos + length > end:
                err, err_offset = ERR_TRUNCATED, pos
                break
            pos += length
            continue
        if status >= 0xF0:
            err, err_offset = ERR_STATUS, ev_start
            break
        running = status
        hi = status & 0xF0
        if hi in (0xC0, 0xD0):
            if pos + 1 > end:
                err, err_offset = ERR_TRUNCATED, pos
                break
            d1 = data[pos]
            pos += 1
            if hi == 0xC0:
                emit(PROGRAM, status & 0x0F, d1 & 0x7F)
            continue
        if pos + 2 > end:
            err, err_offset = ERR_TRUNCATED, pos
            break
        d1, d2 = data[pos], data[pos + 1]
        pos += 2
        if hi in (0x80, 0x90):
            kind = NOTE_ON if hi == 0x90 and d2 > 0 else NOTE_OFF
            emit(kind, status & 0x0F, d1 & 0x7F, d2 & 0x7F)

    return (
        np.asarray(ticks, dtype=np.int64),
        np.asarray(kinds, dtype=np.int8),
        np.asarray(chans, dtype=np.int8),
        np.asarray(av, dtype=np.int32),
        np.asarray(bv, dtype=np.int32),
        tick,
        err,
        err_offset,
    )
