"""Bottleneck adapter: the only trainable weights in the whole framework.

Two bias-free projections with a ReLU between them, applied independently
at every spatial position, plus a scaled residual injection back into the
carrier feature map. The up-projection starts at zero so a freshly
inserted adapter is an exact no-op.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Parameter, Tensor


class AdapterWeights:
    """Projection pair for one insertion point.

    w_down: (d, d/gamma), w_up: (d/gamma, d); no biases, so the trainable
    parameter count is exactly 2*d*d/gamma.
    """

    def __init__(self, dim, gamma, beta, rng, name=""):
        if dim % gamma != 0:
            raise ShapeError(f"hidden ratio {gamma} does not divide channel count {dim}")
        hidden = dim // gamma
        bound = 1.0 / np.sqrt(dim)
        self.dim = int(dim)
        self.gamma = int(gamma)
        self.beta = float(beta)
        self.w_down = Parameter(
            rng.uniform(-bound, bound, size=(dim, hidden)).astype(np.float32),
            name=f"{name}.w_down" if name else "w_down",
        )
        self.w_up = Parameter(
            np.zeros((hidden, dim), dtype=np.float32),
            name=f"{name}.w_up" if name else "w_up",
        )

    def parameters(self):
        return [self.w_down, self.w_up]

    @property
    def param_count(self):
        return 2 * self.dim * self.dim // self.gamma


def adapt(feats, weights):
    """Bottleneck transform per spatial position: relu(F @ W_down) @ W_up.

    feats (n,d,h,w) -> (n,d,h,w); spatial layout untouched.
    """
    fd = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    if fd.ndim != 4:
        raise ShapeError(f"adapt expects (n,d,h,w), got {fd.shape}")
    w_down = weights.w_down if isinstance(weights, AdapterWeights) else weights[0]
    w_up = weights.w_up if isinstance(weights, AdapterWeights) else weights[1]
    d = w_down.data.shape[0] if isinstance(w_down, Tensor) else np.asarray(w_down).shape[0]
    if fd.shape[1] != d:
        raise ShapeError(f"adapter built for d={d}, features have d={fd.shape[1]}")
    n, _, h, w = fd.shape
    feats = feats if isinstance(feats, Tensor) else Tensor(fd)
    rows = feats.transpose(0, 2, 3, 1).reshape(n * h * w, d)
    hidden = T.relu(T.matmul(rows, w_down))
    back = T.matmul(hidden, w_up)
    return back.reshape(n, h, w, d).transpose(0, 3, 1, 2)


def inject(feats, feats_hat, beta):
    """Residual injection: feats + beta * feats_hat."""
    fd = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    hd = feats_hat.data if isinstance(feats_hat, Tensor) else np.asarray(feats_hat)
    if fd.shape != hd.shape:
        raise ShapeError(f"inject shapes differ: {fd.shape} vs {hd.shape}")
    feats = feats if isinstance(feats, Tensor) else Tensor(fd)
    feats_hat = feats_hat if isinstance(feats_hat, Tensor) else Tensor(hd)
    return feats + feats_hat * float(beta)
