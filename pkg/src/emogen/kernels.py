"""Kernel selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
pure-Python ``_fallback`` module is used. Set ``EMOGEN_PURE_PYTHON=1`` to
force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"

if os.environ.get("EMOGEN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

causal_softmax_forward = _impl.causal_softmax_forward
causal_softmax_backward = _impl.causal_softmax_backward
scan_track = _impl.scan_track
rel_causal_softmax_forward = _impl.rel_causal_softmax_forward
rel_causal_softmax_backward = _impl.rel_causal_softmax_backward
skew_array = _fallback.skew_array
unskew_array = _fallback.unskew_array

NOTE_OFF = _fallback.NOTE_OFF
NOTE_ON = _fallback.NOTE_ON
PROGRAM = _fallback.PROGRAM
TEMPO = _fallback.TEMPO
TIMESIG = _fallback.TIMESIG
END_OF_TRACK = _fallback.END_OF_TRACK
ERR_TRUNCATED = _fallback.ERR_TRUNCATED
ERR_STATUS = _fallback.ERR_STATUS
