"""Self-contained few-shot segmentation base model at desk scale.

A 12-block convolutional encoder (two 2x downsamples) feeds a decoder that
matches query positions against masked support positions by cosine
correlation and predicts a 2-way foreground/background map at input
resolution. The decoder owns no class-specific weights, so novel-class
behavior is driven entirely by the support set. Trained once on base
classes, then frozen.

Checkpoint layout: magic b"PMDL", version, in_channels, channel plan,
decoder width, then (name, array) pairs for every parameter; bit-exact
round-trip.
"""

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .serialize import (
    check_magic,
    read_array,
    read_str,
    read_u32,
    write_array,
    write_str,
    write_u32,
)
from .tensor import Parameter, Tensor

_MAGIC = b"PMDL"
_VERSION = 1

CHANNEL_PLAN = (16, 16, 32, 32, 48, 48, 64, 64, 64, 64, 64, 64)
DOWNSAMPLE_AFTER = (4, 8)  # 1-based block indices; final stride is 4
IN_CHANNELS = 3


def channels_at(layer):
    """Output channel count of a 1-based encoder block index."""
    if not 1 <= layer <= len(CHANNEL_PLAN):
        raise ShapeError(f"encoder has layers 1..{len(CHANNEL_PLAN)}, got {layer}")
    return CHANNEL_PLAN[layer - 1]


def _he_conv(rng, out_ch, in_ch):
    std = np.sqrt(2.0 / (in_ch * 9))
    return (rng.standard_normal((out_ch, in_ch, 3, 3)) * std).astype(np.float32)


class ConvBlock:
    def __init__(self, rng, in_ch, out_ch, name, relu=True):
        self.weight = Parameter(_he_conv(rng, out_ch, in_ch), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32), name=f"{name}.bias")
        self.relu = relu

    def __call__(self, x):
        out = T.conv2d(x, self.weight) + self.bias.reshape(1, -1, 1, 1)
        return T.relu(out) if self.relu else out

    def parameters(self):
        return [self.weight, self.bias]


class Encoder:
    """12 sequential conv blocks; 2x average-pool after blocks 4 and 8.

    `taps` maps a 1-based block index to a callable applied to that block's
    activation before anything downstream (pooling included) consumes it.
    With capture=True the per-layer activations actually consumed by the
    next block are returned alongside the output.
    """

    def __init__(self, rng):
        self.blocks = []
        in_ch = IN_CHANNELS
        for i, out_ch in enumerate(CHANNEL_PLAN, start=1):
            self.blocks.append(ConvBlock(rng, in_ch, out_ch, name=f"encoder.block{i:02d}"))
            in_ch = out_ch

    def forward(self, x, taps=None, capture=False):
        acts = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if taps and i in taps:
                x = taps[i](x)
            if i in DOWNSAMPLE_AFTER:
                x = T.avg_pool2d(x)
            if capture:
                acts.append(x)
        return (x, acts) if capture else x

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]


def _interp_matrix(n_out, n_in, dtype=np.float32):
    """Bilinear interpolation matrix (n_out, n_in), half-pixel centers."""
    u = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        j0 = int(np.floor(src))
        t = src - j0
        j0c = min(max(j0, 0), n_in - 1)
        j1c = min(max(j0 + 1, 0), n_in - 1)
        u[i, j0c] += 1.0 - t
        u[i, j1c] += t
    return u


_INTERP_CACHE = {}


def upsample_bilinear(x, factor):
    """(N,C,h,w) -> (N,C,h*factor,w*factor), differentiable."""
    n, c, h, w = x.shape
    key = (h * factor, h)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = _interp_matrix(*key)
    uh = _INTERP_CACHE[key]
    key2 = (w * factor, w)
    if key2 not in _INTERP_CACHE:
        _INTERP_CACHE[key2] = _interp_matrix(*key2)
    uw = _INTERP_CACHE[key2]
    out = T.einsum("oh,nchw->ncow", uh, x)
    return T.einsum("pw,ncow->ncop", uw, out)


class CorrelationDecoder:
    """Foreground/background head driven by query-support cosine matching.

    Per query position the decoder sees: best and mean correlation against
    masked support positions, best correlation against background support
    positions, and similarity to the masked-mean support vector. Two conv
    blocks mix those maps; a final conv emits 2-way logits, upsampled to
    input resolution.
    """

    N_FEATURES = 4

    def __init__(self, rng, width=32):
        self.width = width
        self.conv1 = ConvBlock(rng, self.N_FEATURES, width, name="decoder.conv1")
        self.conv2 = ConvBlock(rng, width, width, name="decoder.conv2")
        self.head = ConvBlock(rng, width, 2, name="decoder.head", relu=False)

    def forward(self, fq, fs, masks, out_factor):
        """fq (B,d,h,w) tensor, fs (B,k,d,h,w) tensor, masks (B,k,h,w) binary
        ndarray at feature resolution. Returns logits (B,2,h*f,w*f)."""
        b, k, d, h, w = fs.shape
        s = h * w
        fqn = T.l2_normalize(fq, axis=1).reshape(b, d, s)
        fsn = T.l2_normalize(fs, axis=2).reshape(b, k, d, s)
        corr = T.einsum("bdq,bkds->bkqs", fqn, fsn)  # cosine in [-1,1]

        m = masks.reshape(b, k, 1, s).astype(fq.dtype.type)
        fg_count = np.maximum(m.sum(axis=(1, 3)), 1.0)  # (b,1)
        bg = 1.0 - m
        bg_count = np.maximum(bg.sum(axis=(1, 3)), 1.0)

        # Masked max: push non-selected positions below the cosine floor.
        fg_max = T.amax((corr * m + (m - 1.0) * 2.0).transpose(0, 2, 1, 3).reshape(b, s, k * s), axis=2)
        bg_max = T.amax((corr * bg + (bg - 1.0) * 2.0).transpose(0, 2, 1, 3).reshape(b, s, k * s), axis=2)
        fg_mean = T.tsum(corr * m, axis=(1, 3)) * (1.0 / fg_count)

        proto = T.einsum("bkds,bks->bd", fs.reshape(b, k, d, s), m.reshape(b, k, s))
        proto = proto * (1.0 / fg_count)
        prior = T.einsum("bdq,bd->bq", fqn, T.l2_normalize(proto, axis=1))

        feats = T.concat(
            [f.reshape(b, 1, h, w) for f in (fg_max, fg_mean, bg_max, prior)], axis=1
        )
        x = self.conv2(self.conv1(feats))
        logits = self.head(x)
        return upsample_bilinear(logits, out_factor)

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters() + self.head.parameters()


class SegModel:
    """Frozen-after-base-training encoder/decoder pair."""

    def __init__(self, seed=0, decoder_width=32):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(rng)
        self.decoder = CorrelationDecoder(rng, width=decoder_width)
        self.stride = 2 ** len(DOWNSAMPLE_AFTER)

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def freeze(self):
        for p in self.parameters():
            p.freeze()

    def unfreeze(self):
        for p in self.parameters():
            p.unfreeze()

    def trainable_parameters(self):
        return [p for p in self.parameters() if not p.frozen]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    # -- forward -----------------------------------------------------------

    def _check_inputs(self, query, supports, masks):
        query = np.asarray(query, dtype=np.float32)
        supports = np.asarray(supports, dtype=np.float32)
        masks = np.asarray(masks)
        if query.ndim != 4 or supports.ndim != 5 or masks.ndim != 4:
            raise ShapeError(
                f"expected query (B,3,H,W), supports (B,k,3,H,W), masks (B,k,H,W); "
                f"got {query.shape}, {supports.shape}, {masks.shape}"
            )
        if supports.shape[1] < 1:
            raise ShapeError("need at least one support shot")
        if supports.shape[3:] != query.shape[2:] or masks.shape[2:] != query.shape[2:]:
            raise ShapeError(
                f"resolution mismatch: query {query.shape[2:]}, supports "
                f"{supports.shape[3:]}, masks {masks.shape[2:]}"
            )
        if query.shape[2] % self.stride or query.shape[3] % self.stride:
            raise ShapeError(f"image size must be divisible by {self.stride}")
        return query, supports, masks

    def forward_batch(self, query, supports, masks, adapters=None, class_slots=None):
        """Episode batch -> logits (B,2,H,W). `adapters` is the inserted
        module list (or None); class_slots are required exactly when the
        adapters are in train mode."""
        from .prototype_adapter import build_taps  # local import, no cycle at module load

        query, supports, masks = self._check_inputs(query, supports, masks)
        bsz, k, _, h, w = supports.shape
        stacked = np.concatenate([supports.reshape(bsz * k, *supports.shape[2:]), query])
        taps = None
        if adapters:
            taps = build_taps(adapters, layout=(bsz, k), support_masks=masks,
                              class_slots=class_slots)
        feats = self.encoder.forward(Tensor(stacked), taps=taps)
        d = feats.shape[1]
        fs = feats[: bsz * k].reshape(bsz, k, d, *feats.shape[2:])
        fq = feats[bsz * k:]
        from .prototype_adapter import downsample_mask

        mask_ds = downsample_mask(masks.reshape(bsz * k, h, w), feats.shape[2:])
        mask_ds = mask_ds.reshape(bsz, k, *feats.shape[2:])
        return self.decoder.forward(fq, fs, mask_ds, out_factor=self.stride)

    def predict_proba(self, query, supports, masks, adapters=None):
        """Foreground probability maps (B,H,W) in [0,1]; inference only."""
        with T.no_grad():
            logits = self.forward_batch(query, supports, masks, adapters=adapters)
            return T.softmax(logits, axis=1)[:, 1]

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as f:
            f.write(_MAGIC)
            write_u32(f, _VERSION)
            write_u32(f, IN_CHANNELS)
            write_u32(f, len(CHANNEL_PLAN))
            for c in CHANNEL_PLAN:
                write_u32(f, c)
            write_u32(f, self.decoder.width)
            params = self.named_parameters()
            write_u32(f, len(params))
            for name in sorted(params):
                write_str(f, name)
                write_array(f, params[name].data)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            check_magic(f, _MAGIC)
            version = read_u32(f)
            if version != _VERSION:
                raise CheckpointError(f"model version {version} != {_VERSION}")
            in_ch = read_u32(f)
            plan = tuple(read_u32(f) for _ in range(read_u32(f)))
            if in_ch != IN_CHANNELS or plan != CHANNEL_PLAN:
                raise CheckpointError("checkpoint encoder plan does not match this build")
            width = read_u32(f)
            model = cls(seed=0, decoder_width=width)
            params = model.named_parameters()
            count = read_u32(f)
            if count != len(params):
                raise CheckpointError("checkpoint parameter count mismatch")
            for _ in range(count):
                name = read_str(f)
                arr = read_array(f)
                if name not in params:
                    raise CheckpointError(f"unknown parameter {name!r}")
                if params[name].data.shape != arr.shape:
                    raise CheckpointError(f"shape mismatch for {name!r}")
                params[name].data = arr
            return model
