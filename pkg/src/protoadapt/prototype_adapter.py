"""Prototype adapter modules: enhancement + bottleneck adapter at chosen
encoder layers.

Each inserted module owns its own prototype bank and projection pair. In
train mode the episode's class slot is momentum-refreshed before
enhancement; in test mode the slot is picked by cosine matching. Episodes
whose support mask vanishes at a layer's resolution skip enhancement for
that episode (the adapter still runs) and bump a fallback counter.

Checkpoint layout: magic b"PAMC", version, alpha f64, beta f64, gamma u32,
n_classes u32, component flags u32, module count u32; per module: layer
u32, dim u32, w_down, w_up, embedded bank block. Bit-exact round-trip.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapter import AdapterWeights, adapt, inject
from .bank import PrototypeBank, masked_mean_prototype
from .enhance import enhance_pair
from .errors import CheckpointError, ConfigError, ShapeError
from .model import CHANNEL_PLAN, channels_at
from .serialize import check_magic, read_array, read_f64, read_u32, write_array, write_f64, write_u32
from .tensor import Tensor

logger = logging.getLogger("protoadapt.adapter")

_MAGIC = b"PAMC"
_VERSION = 1

DEFAULT_INSERT = tuple(range(7, 13))  # sparse deep insertion for 12 layers


@dataclass
class AdapterConfig:
    """Hyperparameters + insertion plan for a set of prototype adapters."""

    n_classes: int
    alpha: float = 0.99
    beta: float = 0.1
    gamma: int = 16
    insert_positions: tuple = DEFAULT_INSERT
    use_enhancement: bool = True  # similarity-gated feature boost
    use_bank: bool = True  # momentum bank vs raw per-episode prototype

    def validate(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {self.n_classes}")
        positions = tuple(self.insert_positions)
        if len(set(positions)) != len(positions):
            raise ConfigError(f"insert positions must be unique, got {positions}")
        for layer in positions:
            if not 1 <= layer <= len(CHANNEL_PLAN):
                raise ConfigError(
                    f"insert position {layer} outside encoder layers 1..{len(CHANNEL_PLAN)}"
                )
            d = channels_at(layer)
            if d % self.gamma:
                raise ConfigError(
                    f"layer {layer} has d={d}, not divisible by gamma={self.gamma}"
                )
        return self

    def to_dict(self):
        return {
            "n_classes": self.n_classes,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "insert_positions": list(self.insert_positions),
            "use_enhancement": self.use_enhancement,
            "use_bank": self.use_bank,
        }

    @classmethod
    def from_dict(cls, d):
        cfg = cls(
            n_classes=int(d["n_classes"]),
            alpha=float(d.get("alpha", 0.99)),
            beta=float(d.get("beta", 0.1)),
            gamma=int(d.get("gamma", 16)),
            insert_positions=tuple(d.get("insert_positions", DEFAULT_INSERT)),
            use_enhancement=bool(d.get("use_enhancement", True)),
            use_bank=bool(d.get("use_bank", True)),
        )
        return cfg.validate()


@dataclass
class AdapterState:
    """One inserted module: weights + bank + mode."""

    layer: int
    dim: int
    weights: AdapterWeights
    bank: PrototypeBank
    config: AdapterConfig
    mode: str = "train"
    fallback_events: int = 0

    def parameters(self):
        return self.weights.parameters()


def set_mode(states, mode):
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be train|test, got {mode!r}")
    for s in states:
        s.mode = mode
    return states


def trainable_parameters(states):
    return [p for s in states for p in s.parameters()]


def param_count(states):
    return sum(s.weights.param_count for s in states)


def insert_adapters(model, config, seed=0):
    """Create one adapter module per insert position and freeze the encoder.

    Returns the state list; the model's forward applies each module to the
    joint support/query batch right after its layer.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    states = []
    for layer in sorted(config.insert_positions):
        d = channels_at(layer)
        weights = AdapterWeights(d, config.gamma, config.beta, rng, name=f"adapter{layer:02d}")
        bank = PrototypeBank(config.n_classes, d)
        states.append(AdapterState(layer=layer, dim=d, weights=weights, bank=bank,
                                   config=config))
    for p in model.encoder.parameters():
        p.freeze()
    return states


def downsample_mask(masks, target_hw):
    """Nearest-neighbor downsample of binary masks (..., H, W) -> (..., h, w)."""
    masks = np.asarray(masks)
    h_src, w_src = masks.shape[-2:]
    h, w = target_hw
    if h > h_src or w > w_src:
        raise ShapeError(f"target {target_hw} exceeds source {(h_src, w_src)}")
    if not np.isin(masks, (0, 1)).all():
        raise ShapeError("mask values must be binary")
    ys = (np.arange(h) * h_src) // h
    xs = (np.arange(w) * w_src) // w
    return masks[..., ys[:, None], xs[None, :]]


def _episode_prototypes(act_data, masks_ds, state, layout, class_slots):
    """Shared train/test slot handling for one layer.

    Returns (B*k+B, d) constant prototype rows; all-zero rows mean
    "enhancement off for this image" (empty-mask fallback or disabled).
    """
    bsz, k = layout
    d = act_data.shape[1]
    rows = np.zeros((act_data.shape[0], d), dtype=act_data.dtype)
    for b in range(bsz):
        m = masks_ds[b]
        if m.sum() == 0:
            state.fallback_events += 1
            logger.warning(
                "empty support mask at adapter layer %d (episode %d): "
                "enhancement skipped, adapter still applied",
                state.layer, b,
            )
            continue
        p_t = masked_mean_prototype(act_data[b * k:(b + 1) * k], m)
        if state.mode == "train":
            if state.config.use_bank:
                row = state.bank.update(class_slots[b], p_t, state.config.alpha)
            else:
                row = p_t
        else:
            if state.config.use_bank:
                _, row = state.bank.select(p_t)
            else:
                row = p_t
        rows[b * k:(b + 1) * k] = row
        rows[bsz * k + b] = row
    return rows


def _apply_module(act, state, layout, masks_ds, class_slots):
    """Run one module on the joint (supports..., queries) activation batch."""
    d = act.shape[1]
    if state.config.use_enhancement:
        rows = _episode_prototypes(act.data, masks_ds, state, layout, class_slots)
        norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
        rows = rows / np.maximum(norms, 1e-8)  # zero rows stay zero
        fn = T.l2_normalize(act, axis=1)
        sim = T.einsum("ndhw,nd->nhw", fn, rows)
        em = T.relu6(sim * float(np.sqrt(d)))
        n, h, w = em.shape
        f_star = act * em.reshape(n, 1, h, w) + act
    else:
        f_star = act
    f_hat = adapt(f_star, state.weights)
    return act + f_hat * state.config.beta


def build_taps(states, layout, support_masks, class_slots):
    """Encoder taps for a batch of episodes.

    layout: (B, k); the encoder batch is supports (episode-major) followed
    by the B queries. support_masks: (B,k,H,W) binary at image resolution.
    Train mode requires class_slots (length B); test mode forbids them.
    """
    bsz, k = layout
    masks = np.asarray(support_masks)
    modes = {s.mode for s in states}
    if len(modes) != 1:
        raise ValueError(f"adapter modules disagree on mode: {modes}")
    mode = modes.pop()
    if mode == "train":
        if class_slots is None or len(class_slots) != bsz:
            raise ValueError("train mode needs one class slot per episode")
    elif class_slots is not None:
        raise ValueError("test mode must not receive class slots")

    flat = masks.reshape(bsz * k, *masks.shape[2:])
    taps = {}
    for state in states:
        def tap(act, state=state):
            ds = downsample_mask(flat, act.shape[2:]).reshape(bsz, k, *act.shape[2:])
            return _apply_module(act, state, (bsz, k), ds, class_slots)

        taps[state.layer] = tap
    return taps


def adapter_forward(feats_s, feats_q, mask_s, state, class_slot=None):
    """Single-episode module application (the composable reference path).

    feats_s (k,d,h,w), feats_q (b,d,h,w), mask_s (k,H,W) binary at any
    resolution >= the feature grid. Train mode requires class_slot; test
    mode requires its absence. Returns (new_feats_s, new_feats_q).
    """
    if state.mode == "train" and class_slot is None:
        raise ValueError("train mode requires a class slot")
    if state.mode == "test" and class_slot is not None:
        raise ValueError("test mode must not receive a class slot")
    fs = feats_s if isinstance(feats_s, Tensor) else Tensor(np.asarray(feats_s))
    fq = feats_q if isinstance(feats_q, Tensor) else Tensor(np.asarray(feats_q))
    if fs.shape[1] != state.dim or fq.shape[1] != state.dim:
        raise ShapeError(f"module built for d={state.dim}, got {fs.shape[1]}, {fq.shape[1]}")

    ds = downsample_mask(np.asarray(mask_s), fs.shape[2:])
    enhanced = False
    if state.config.use_enhancement:
        if ds.sum() == 0:
            state.fallback_events += 1
            logger.warning(
                "empty support mask at adapter layer %d: enhancement skipped, "
                "adapter still applied", state.layer,
            )
        else:
            p_t = masked_mean_prototype(fs.data, ds)
            if state.config.use_bank:
                if state.mode == "train":
                    row = state.bank.update(class_slot, p_t, state.config.alpha)
                else:
                    _, row = state.bank.select(p_t)
            else:
                row = p_t
            fs_star, fq_star = enhance_pair(fs, fq, row)
            enhanced = True
    if not enhanced:
        fs_star, fq_star = fs, fq
    out_s = inject(fs, adapt(fs_star, state.weights), state.config.beta)
    out_q = inject(fq, adapt(fq_star, state.weights), state.config.beta)
    return out_s, out_q


# -- persistence ---------------------------------------------------------------


def _flags(config):
    return (1 if config.use_enhancement else 0) | (2 if config.use_bank else 0)


def save_adapters(states, path):
    if not states:
        raise ValueError("nothing to save: empty state list")
    config = states[0].config
    with open(path, "wb") as f:
        f.write(_MAGIC)
        write_u32(f, _VERSION)
        write_f64(f, config.alpha)
        write_f64(f, config.beta)
        write_u32(f, config.gamma)
        write_u32(f, config.n_classes)
        write_u32(f, _flags(config))
        write_u32(f, len(states))
        for s in states:
            write_u32(f, s.layer)
            write_u32(f, s.dim)
            write_array(f, s.weights.w_down.data)
            write_array(f, s.weights.w_up.data)
            s.bank.dumps(f)


def load_adapters(path, config):
    """Rebuild states from a checkpoint; every config field must match."""
    config.validate()
    with open(path, "rb") as f:
        check_magic(f, _MAGIC)
        version = read_u32(f)
        if version != _VERSION:
            raise CheckpointError(f"adapter checkpoint version {version} != {_VERSION}")
        alpha = read_f64(f)
        beta = read_f64(f)
        gamma = read_u32(f)
        n_classes = read_u32(f)
        flags = read_u32(f)
        count = read_u32(f)
        if (alpha, beta, gamma, n_classes, flags) != (
            config.alpha, config.beta, config.gamma, config.n_classes, _flags(config)
        ):
            raise CheckpointError(
                "adapter checkpoint config mismatch: file has "
                f"alpha={alpha}, beta={beta}, gamma={gamma}, n={n_classes}, flags={flags}"
            )
        layers = sorted(config.insert_positions)
        if count != len(layers):
            raise CheckpointError(f"checkpoint has {count} modules, config wants {len(layers)}")
        states = []
        for expected_layer in layers:
            layer = read_u32(f)
            dim = read_u32(f)
            if layer != expected_layer:
                raise CheckpointError(f"module layer {layer} != configured {expected_layer}")
            if dim != channels_at(layer):
                raise CheckpointError(f"module dim {dim} != encoder d {channels_at(layer)}")
            w_down = read_array(f)
            w_up = read_array(f)
            weights = AdapterWeights(dim, config.gamma, config.beta,
                                     np.random.default_rng(0), name=f"adapter{layer:02d}")
            if w_down.shape != weights.w_down.shape or w_up.shape != weights.w_up.shape:
                raise CheckpointError(f"projection shapes for layer {layer} do not match")
            weights.w_down.data = w_down
            weights.w_up.data = w_up
            bank = PrototypeBank.loads(f, expect_n=config.n_classes, expect_d=dim)
            states.append(AdapterState(layer=layer, dim=dim, weights=weights,
                                       bank=bank, config=config))
        return states
