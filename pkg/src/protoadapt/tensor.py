"""Reverse-mode autodiff over numpy arrays.

Small on purpose: exactly the primitives the segmentation pipeline needs
(elementwise arithmetic, matmul/einsum, reductions, shape ops, 3x3 conv,
2x2 average pooling, ReLU/ReLU6, channelwise L2 normalization and a fused
softmax cross-entropy). float32 is the working precision; float64 is used
by the finite-difference gradient checks.

Tensors are treated as immutable once created in a forward pass; only the
optimizer mutates parameter data in place.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NonFiniteError, ShapeError
from .kernels import conv3x3_backward_input, conv3x3_backward_weight, conv3x3_forward

_FLOAT_TYPES = (np.float32, np.float64)

_grad_enabled = True


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only compute)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense real array plus an optional backward edge into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- construction ----------------------------------------------------

    @staticmethod
    def _result(data, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._vjp = None
        out.requires_grad = False
        if _grad_enabled and any(
            isinstance(p, Tensor) and p.requires_grad for p in parents
        ):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if isinstance(p, Tensor))
            out._vjp = vjp
        return out

    # -- basic introspection ----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without explicit grad needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        # Topological order via iterative DFS.
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=self.data.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """Trainable tensor with a hierarchical name and a freeze flag.

    frozen=True excludes the parameter from optimizer parameter sets and
    turns off gradient accumulation, so its bits cannot change.
    """

    __slots__ = ("name", "frozen")

    def __init__(self, data, name="", frozen=False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.frozen = bool(frozen)

    def freeze(self):
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self):
        self.frozen = False
        self.requires_grad = True

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, frozen={self.frozen})"


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def vjp(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(g, bd.shape))
        return grads

    return Tensor._result(out, (a, b), vjp)


def mul(a, b):
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def vjp(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g * bd, ad.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(g * ad, bd.shape))
        return grads

    return Tensor._result(out, (a, b), vjp)


def relu(x):
    xd = _data(x)
    out = np.maximum(xd, 0)

    def vjp(g):
        return [g * (xd > 0)]

    return Tensor._result(out, (x,), vjp)


def relu6(x):
    """Elementwise clamp to [0, 6]; subgradient 0 at both clamp points."""
    xd = _data(x)
    out = np.clip(xd, 0, 6)

    def vjp(g):
        return [g * ((xd > 0) & (xd < 6))]

    return Tensor._result(out, (x,), vjp)


def l2_normalize(x, axis=-1, eps=None):
    """Scale slices along `axis` to unit L2 norm.

    Slices with norm <= eps are divided by eps instead (the all-zero slice
    maps to the zero vector). eps defaults to 1e-8 at float32 and 1e-12 at
    float64. Gradients are the exact normalize Jacobian above eps and zero
    at or below it, keeping degenerate slices inert.
    """
    xd = _data(x)
    if not np.isfinite(xd).all():
        raise NonFiniteError("l2_normalize received non-finite input")
    if eps is None:
        eps = 1e-12 if xd.dtype == np.float64 else 1e-8
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = xd / denom

    def vjp(g):
        live = norm > eps
        inner = (g * out).sum(axis=axis, keepdims=True)
        gx = (g - out * inner) / denom
        return [np.where(live, gx, 0)]

    return Tensor._result(out, (x,), vjp)


# -- reductions ---------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    xd = _data(x)
    out = xd.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g, xd.shape).copy()]

    return Tensor._result(out, (x,), vjp)


def tmean(x, axis=None, keepdims=False):
    xd = _data(x)
    if axis is None:
        count = xd.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([xd.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(x, axis):
    """Max along one axis; gradient routes to the first argmax (ties)."""
    xd = _data(x)
    idx = np.argmax(xd, axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(
            gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return [gx]

    return Tensor._result(out, (x,), vjp)


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape):
    xd = _data(x)
    out = xd.reshape(shape)

    def vjp(g):
        return [g.reshape(xd.shape)]

    return Tensor._result(out, (x,), vjp)


def transpose(x, axes):
    xd = _data(x)
    out = np.ascontiguousarray(xd.transpose(axes))
    inv = np.argsort(axes)

    def vjp(g):
        return [np.ascontiguousarray(g.transpose(inv))]

    return Tensor._result(out, (x,), vjp)


def getitem(x, idx):
    xd = _data(x)
    out = xd[idx]
    if np.isscalar(out):
        out = np.asarray(out)

    def vjp(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return [gx]

    return Tensor._result(out, (x,), vjp)


def concat(tensors, axis=0):
    datas = [_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return np.split(g, splits, axis=axis)

    return Tensor._result(out, tuple(tensors), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def vjp(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(g @ bd.T)
        if isinstance(b, Tensor):
            grads.append(ad.T @ g)
        return grads

    return Tensor._result(out, (a, b), vjp)


def einsum(subscripts, a, b):
    """Two-operand einsum with explicit output spec, e.g. 'nchw,nc->nhw'.

    Each input index must appear in the output or in the other operand
    (true for every contraction used in this package); no repeated index
    within a single operand.
    """
    lhs, out_spec = subscripts.split("->")
    a_spec, b_spec = lhs.split(",")
    for spec in (a_spec, b_spec):
        if len(set(spec)) != len(spec):
            raise ValueError(f"repeated index within one operand: {subscripts}")
    for spec, other in ((a_spec, b_spec), (b_spec, a_spec)):
        missing = set(spec) - set(out_spec) - set(other)
        if missing:
            raise ValueError(f"index {missing} is summed out of a single operand: {subscripts}")
    ad, bd = _data(a), _data(b)
    out = np.einsum(subscripts, ad, bd)

    def vjp(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, bd))
        if isinstance(b, Tensor):
            grads.append(np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, ad))
        return grads

    return Tensor._result(out, (a, b), vjp)


# -- neural-net ops -----------------------------------------------------------


def conv2d(x, w):
    """3x3 convolution, stride 1, same padding. x (N,C,H,W), w (O,C,3,3)."""
    xd, wd = _data(x), _data(w)
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects (N,C,H,W) and (O,C,3,3), got {xd.shape}, {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: {xd.shape[1]} vs {wd.shape[1]}")
    out = conv3x3_forward(xd, wd)

    def vjp(g):
        g = np.ascontiguousarray(g)
        grads = []
        if isinstance(x, Tensor):
            grads.append(conv3x3_backward_input(wd, g))
        if isinstance(w, Tensor):
            grads.append(conv3x3_backward_weight(xd, g))
        return grads

    return Tensor._result(out, (x, w), vjp)


def avg_pool2d(x):
    """2x2 average pooling, stride 2. Spatial dims must be even."""
    xd = _data(x)
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even spatial dims, got {xd.shape}")
    out = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gx = np.empty_like(xd)
        gx.reshape(n, c, h // 2, 2, w // 2, 2)[:] = (g / 4.0)[:, :, :, None, :, None]
        return [gx]

    return Tensor._result(out, (x,), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean pixelwise cross-entropy. logits (N,C,...), integer labels (N,...)."""
    zd = _data(logits)
    lab = np.asarray(labels)
    if lab.shape != zd.shape[:1] + zd.shape[2:]:
        raise ShapeError(f"label shape {lab.shape} does not match logits {zd.shape}")
    zmax = zd.max(axis=1, keepdims=True)
    ez = np.exp(zd - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (zd - zmax) - np.log(sez)
    lab_e = np.expand_dims(lab, 1)
    picked = np.take_along_axis(logp, lab_e, axis=1)
    count = picked.size
    out = np.asarray(-picked.sum() / count, dtype=zd.dtype)

    def vjp(g):
        p = ez / sez
        np.put_along_axis(
            p, lab_e, np.take_along_axis(p, lab_e, axis=1) - 1.0, axis=1
        )
        return [p * (g / count)]

    return Tensor._result(out, (logits,), vjp)


def softmax(x, axis=1):
    """Plain numpy softmax of a tensor's data (inference-time use)."""
    xd = _data(x)
    z = xd - xd.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)
