"""Pure-numpy 3x3 convolution kernels (im2col views + BLAS tensordot).

Same contract as the compiled extension: stride 1, same padding,
float32/float64, C-contiguous inputs.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _patch_view(x):
    """(N,C,H,W) padded by 1 -> strided view (N,H,W,C,3,3), no copy."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp, (n, hp - 2, wp - 2, c, 3, 3), (sn, sh, sw, sc, sh, sw), writeable=False
    )


def conv3x3_forward(x, w):
    v = _patch_view(x)
    y = np.tensordot(v, w, axes=([3, 4, 5], [1, 2, 3]))  # (N,H,W,O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv3x3_backward_input(w, gy):
    # Full correlation of gy with the flipped kernel, channels swapped.
    v = _patch_view(gy)
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # (C,O,3,3)
    gx = np.tensordot(v, wf, axes=([3, 4, 5], [1, 2, 3]))  # (N,H,W,C)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


def conv3x3_backward_weight(x, gy):
    v = _patch_view(x)
    gyt = gy.transpose(0, 2, 3, 1)  # (N,H,W,O)
    gw = np.tensordot(gyt, v, axes=([0, 1, 2], [0, 1, 2]))  # (O,C,3,3)
    return np.ascontiguousarray(gw)
