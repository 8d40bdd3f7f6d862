"""Per-module class prototype bank.

Stores one L2-normalized d-vector per novel class. During fine-tuning the
slot for the episode's class is refreshed by a momentum blend of the
normalized temporary prototype with the stored one; at test time the slot
is picked by cosine similarity against the temporary prototype. Rows are
plain buffers, never gradient targets.

Checkpoint layout (little-endian): magic b"PBNK", version u32, n u32,
d u32, n bytes of per-slot init flags, then the n*d float32 matrix
row-major. Round-trip is bit-exact.
"""

import numpy as np

from .errors import CheckpointError, EmptyMaskError, NonFiniteError, ShapeError
from .serialize import check_magic, read_array, read_u32, write_array, write_u32

_MAGIC = b"PBNK"
_VERSION = 1


def _l2(v, eps=1e-8):
    n = float(np.sqrt((v * v).sum()))
    return v / max(n, eps)


def masked_mean_prototype(feats, mask):
    """Mean feature vector over the mask's nonzero positions, pooled jointly
    over all k shots. feats (k,d,h,w), mask (k,h,w) with values in {0,1}.

    The divisor is the number of selected positions, not k*h*w, so the
    object's share of the frame does not scale the prototype.
    """
    feats = np.asarray(feats)
    mask = np.asarray(mask)
    if feats.ndim != 4 or mask.ndim != 3:
        raise ShapeError(f"expected (k,d,h,w) and (k,h,w), got {feats.shape}, {mask.shape}")
    if feats.shape[0] != mask.shape[0] or feats.shape[2:] != mask.shape[1:]:
        raise ShapeError(f"features {feats.shape} and mask {mask.shape} are not aligned")
    mask = mask.astype(feats.dtype)
    if not np.isin(mask, (0, 1)).all():
        raise ShapeError("mask values must be binary")
    if not np.isfinite(feats).all():
        raise NonFiniteError("masked_mean_prototype received non-finite features")
    count = mask.sum()
    if count == 0:
        raise EmptyMaskError("support mask has no foreground positions")
    return np.einsum("kdhw,khw->d", feats, mask) / count


class PrototypeBank:
    """n x d prototype matrix with per-slot initialization flags.

    Uninitialized rows are exactly zero; initialized rows stay unit-norm.
    Slot indices are 0-based.
    """

    def __init__(self, n_classes, dim, dtype=np.float32):
        if n_classes < 1 or dim < 1:
            raise ShapeError(f"bank needs n>=1, d>=1, got {n_classes}, {dim}")
        self.n = int(n_classes)
        self.d = int(dim)
        self.prototypes = np.zeros((self.n, self.d), dtype=dtype)
        self.initialized = np.zeros(self.n, dtype=bool)

    def _check_slot(self, slot):
        if not 0 <= slot < self.n:
            raise IndexError(f"class slot {slot} out of range [0, {self.n})")

    def _check_vec(self, p_t):
        p_t = np.asarray(p_t, dtype=self.prototypes.dtype)
        if p_t.shape != (self.d,):
            raise ShapeError(f"prototype must have shape ({self.d},), got {p_t.shape}")
        if not np.isfinite(p_t).all():
            raise NonFiniteError("non-finite temporary prototype")
        return p_t

    def update(self, slot, p_t, alpha):
        """Momentum-refresh one slot; returns a copy of the stored row.

        First observation of a slot stores l2(p_t) directly; afterwards the
        row becomes the alpha-blend of the normalized inputs, renormalized
        so cosine matching always sees unit rows.
        """
        self._check_slot(slot)
        p_t = self._check_vec(p_t)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        if self.initialized[slot]:
            blend = (1.0 - alpha) * _l2(p_t) + alpha * _l2(self.prototypes[slot])
            self.prototypes[slot] = _l2(blend)
        else:
            self.prototypes[slot] = _l2(p_t)
            self.initialized[slot] = True
        return self.prototypes[slot].copy()

    def select(self, p_t):
        """Pick the initialized slot with the highest cosine similarity to
        p_t; ties go to the lowest slot index. Returns (slot, row copy)."""
        p_t = self._check_vec(p_t)
        if not self.initialized.any():
            raise EmptyMaskError("prototype bank has no initialized slots")
        q = _l2(p_t)
        sims = self.prototypes @ q  # rows are unit vectors already
        sims[~self.initialized] = -np.inf
        slot = int(np.argmax(sims))  # argmax takes the first maximum
        return slot, self.prototypes[slot].copy()

    # -- persistence -------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as f:
            self.dumps(f)

    def dumps(self, f):
        """Append this bank's block to an open binary stream."""
        f.write(_MAGIC)
        write_u32(f, _VERSION)
        write_u32(f, self.n)
        write_u32(f, self.d)
        f.write(self.initialized.astype(np.uint8).tobytes())
        write_array(f, self.prototypes.astype(np.float32))

    @classmethod
    def loads(cls, f, expect_n=None, expect_d=None):
        check_magic(f, _MAGIC)
        version = read_u32(f)
        if version != _VERSION:
            raise CheckpointError(f"bank version {version} != {_VERSION}")
        n = read_u32(f)
        d = read_u32(f)
        if expect_n is not None and n != expect_n:
            raise ShapeError(f"bank has n={n}, config expects {expect_n}")
        if expect_d is not None and d != expect_d:
            raise ShapeError(f"bank has d={d}, config expects {expect_d}")
        flags = np.frombuffer(f.read(n), dtype=np.uint8)
        if flags.size != n:
            raise CheckpointError("truncated bank flags")
        bank = cls(n, d)
        bank.initialized = flags.astype(bool).copy()
        bank.prototypes = read_array(f)
        if bank.prototypes.shape != (n, d):
            raise CheckpointError("bank matrix shape mismatch")
        return bank

    @classmethod
    def load(cls, path, expect_n=None, expect_d=None):
        with open(path, "rb") as f:
            return cls.loads(f, expect_n=expect_n, expect_d=expect_d)

    def __eq__(self, other):
        return (
            isinstance(other, PrototypeBank)
            and self.n == other.n
            and self.d == other.d
            and np.array_equal(self.initialized, other.initialized)
            and np.array_equal(self.prototypes, other.prototypes)
        )
