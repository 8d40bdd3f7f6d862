"""Prototype-guided feature enhancement.

A feature map is compared against a class prototype by channelwise cosine
similarity; the similarity map, scaled by sqrt(d) and clamped to [0, 6],
multiplicatively re-weights the features on top of a residual pass-through.
All ops are differentiable in the feature maps (and in the prototype when
one is passed as a tensor; the pipeline passes bank rows as constants).
"""

import numpy as np

from . import tensor as T
from .errors import ProtoadaptError, ShapeError
from .tensor import Tensor


class ZeroPrototypeError(ProtoadaptError):
    """An all-zero (uninitialized) prototype reached the enhancement path."""


def similarity_map(feats, proto, eps=None):
    """Cosine similarity between every spatial position of feats (b,d,h,w)
    and the d-vector proto; returns a (b,h,w) map in [-1, 1]."""
    fd = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    pd = proto.data if isinstance(proto, Tensor) else np.asarray(proto)
    if fd.ndim != 4 or pd.ndim != 1 or fd.shape[1] != pd.shape[0]:
        raise ShapeError(f"similarity_map got feats {fd.shape}, proto {pd.shape}")
    if not np.any(pd):
        raise ZeroPrototypeError("prototype is identically zero")
    fn = T.l2_normalize(feats if isinstance(feats, Tensor) else Tensor(fd), axis=1, eps=eps)
    pn = T.l2_normalize(proto if isinstance(proto, Tensor) else Tensor(pd), axis=-1, eps=eps)
    return T.einsum("bdhw,d->bhw", fn, pn)


def enhancement_matrix(sim, dim):
    """relu6(sim * sqrt(dim)): suppress dissimilar positions, cap the boost."""
    if dim < 1:
        raise ValueError(f"channel count must be >= 1, got {dim}")
    sim = sim if isinstance(sim, Tensor) else Tensor(sim)
    return T.relu6(sim * float(np.sqrt(dim)))


def enhance(feats, em):
    """Class-specific feature: em broadcast over channels, residual added."""
    fd = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    ed = em.data if isinstance(em, Tensor) else np.asarray(em)
    if ed.shape != (fd.shape[0],) + fd.shape[2:]:
        raise ShapeError(f"enhancement map {ed.shape} does not match feats {fd.shape}")
    feats = feats if isinstance(feats, Tensor) else Tensor(fd)
    em = em if isinstance(em, Tensor) else Tensor(ed)
    b, h, w = ed.shape
    em4 = em.reshape(b, 1, h, w)
    return feats * em4 + feats


def enhance_pair(feats_s, feats_q, proto, eps=None):
    """Enhance support and query streams with the same prototype."""
    fs = feats_s.data if isinstance(feats_s, Tensor) else np.asarray(feats_s)
    fq = feats_q.data if isinstance(feats_q, Tensor) else np.asarray(feats_q)
    if fs.shape[1] != fq.shape[1]:
        raise ShapeError(f"support d={fs.shape[1]} != query d={fq.shape[1]}")
    d = fs.shape[1]
    out_s = enhance(feats_s, enhancement_matrix(similarity_map(feats_s, proto, eps), d))
    out_q = enhance(feats_q, enhancement_matrix(similarity_map(feats_q, proto, eps), d))
    return out_s, out_q
