"""Tiny binary container primitives shared by the checkpoint formats.

All integers are little-endian; arrays are raw row-major bytes preceded by
dtype tag, ndim and dims. Round-trips are bit-exact.
"""

import struct

import numpy as np

from .errors import CheckpointError

_DTYPES = {0: np.float32, 1: np.float64, 2: np.uint8, 3: np.int64}
_DTYPE_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


def write_u32(f, value):
    f.write(struct.pack("<I", value))


def read_u32(f):
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated file: expected u32")
    return struct.unpack("<I", raw)[0]


def write_f64(f, value):
    f.write(struct.pack("<d", value))


def read_f64(f):
    raw = f.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated file: expected f64")
    return struct.unpack("<d", raw)[0]


def write_str(f, s):
    raw = s.encode("utf-8")
    write_u32(f, len(raw))
    f.write(raw)


def read_str(f):
    n = read_u32(f)
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated file: expected string")
    return raw.decode("utf-8")


def write_array(f, arr):
    arr = np.ascontiguousarray(arr)
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    write_u32(f, tag)
    write_u32(f, arr.ndim)
    for d in arr.shape:
        write_u32(f, d)
    f.write(arr.tobytes())


def read_array(f):
    tag = read_u32(f)
    if tag not in _DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag}")
    ndim = read_u32(f)
    shape = tuple(read_u32(f) for _ in range(ndim))
    dtype = np.dtype(_DTYPES[tag])
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    raw = f.read(nbytes)
    if len(raw) != nbytes:
        raise CheckpointError("truncated file: expected array payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def check_magic(f, magic):
    raw = f.read(len(magic))
    if raw != magic:
        raise CheckpointError(f"bad magic {raw!r}, expected {magic!r}")
