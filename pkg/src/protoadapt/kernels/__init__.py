"""Hot conv kernels: compiled Cython core with a numpy fallback.

The backend is picked once at import. PROTOADAPT_KERNELS=compiled|fallback
forces a choice ("compiled" raises if the extension is missing); the
default "auto" prefers the extension and silently falls back.
"""

import os

from . import fallback as _fb

_choice = os.environ.get("PROTOADAPT_KERNELS", "auto")
_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _conv as _impl
    except ImportError:
        if _choice == "compiled":
            raise
elif _choice != "fallback":
    raise ValueError(f"PROTOADAPT_KERNELS must be auto|compiled|fallback, got {_choice!r}")

if _impl is not None:
    BACKEND = "compiled"
    _f32 = (_impl.conv3x3_forward, _impl.conv3x3_backward_input, _impl.conv3x3_backward_weight)
else:
    BACKEND = "fallback"
    _f32 = (_fb.conv3x3_forward, _fb.conv3x3_backward_input, _fb.conv3x3_backward_weight)


def backend():
    return BACKEND


def _prep(*arrays):
    return [a if a.flags.c_contiguous else a.copy() for a in arrays]


def conv3x3_forward(x, w):
    x, w = _prep(x, w)
    return _f32[0](x, w)


def conv3x3_backward_input(w, gy):
    w, gy = _prep(w, gy)
    return _f32[1](w, gy)


def conv3x3_backward_weight(x, gy):
    x, gy = _prep(x, gy)
    return _f32[2](x, gy)
