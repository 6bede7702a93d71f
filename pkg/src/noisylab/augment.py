"""Stochastic input transforms with recorded seeds.

Pipelines are sampled per sample per epoch; the restoration objective always
pairs the transformed view with the stored original, so ops never need an
inverse. Every op is the identity at magnitude 0 and deterministic given its
seed. Image outputs stay in [0, 1]; flat vectors are left unclamped.

Spatial ops (cutout, translate, horizontal-flip) require image-shaped input;
flat vectors support gaussian-noise, brightness-shift and contrast-scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPATIAL_OPS = ("cutout", "translate", "horizontal-flip")
VALUE_OPS = ("gaussian-noise", "brightness-shift", "contrast-scale")
ALL_OPS = ("cutout", "gaussian-noise", "brightness-shift", "contrast-scale", "translate", "horizontal-flip")

CUTOUT_FILL = 0.5
TRANSLATE_FILL = 0.5

# per-op maximum strength at magnitude 1
MAX_NOISE_SIGMA = 0.2
MAX_BRIGHTNESS_DELTA = 0.3
MAX_TRANSLATE_FRAC = 0.3
MAX_CONTRAST_SWING = 0.5


class UnsupportedOpError(ValueError):
    """Op not applicable to the given input shape."""


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    params: dict
    seed: int

    def __post_init__(self):
        if self.kind not in ALL_OPS:
            raise ValueError(f"unknown augment op: {self.kind!r}")


@dataclass(frozen=True)
class AugmentPipeline:
    ops: tuple
    magnitude: float


@dataclass(frozen=True)
class AugmentPolicy:
    op_pool: tuple = ALL_OPS
    num_ops: int = 2
    magnitude: float = 0.5

    def __post_init__(self):
        if not self.op_pool:
            raise ValueError("op pool must be nonempty")
        if self.num_ops < 1:
            raise ValueError("num_ops must be >= 1")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError("magnitude must be in [0, 1]")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from integer parts (global seed, epoch, index...)."""
    ss = np.random.SeedSequence(tuple(int(p) for p in parts))
    return int(ss.generate_state(1, np.uint64)[0])


def sample_pipeline(policy: AugmentPolicy, rng_seed: int) -> AugmentPipeline:
    """Uniformly sample ``num_ops`` ops (with replacement) from the pool."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    m = policy.magnitude
    ops = []
    for slot in range(policy.num_ops):
        kind = policy.op_pool[int(rng.integers(0, len(policy.op_pool)))]
        op_seed = int(rng.integers(0, 2**63 - 1))
        if kind == "cutout":
            params = {"side_frac": m}
        elif kind == "gaussian-noise":
            params = {"sigma": m * MAX_NOISE_SIGMA}
        elif kind == "brightness-shift":
            sign = 1.0 if rng.random() < 0.5 else -1.0
            params = {"delta": sign * m * MAX_BRIGHTNESS_DELTA}
        elif kind == "contrast-scale":
            params = {"scale": 1.0 + m * MAX_CONTRAST_SWING * rng.uniform(-1.0, 1.0)}
        elif kind == "translate":
            params = {"max_frac": m * MAX_TRANSLATE_FRAC}
        else:  # horizontal-flip
            params = {"prob": m}
        ops.append(AugmentOp(kind=kind, params=params, seed=op_seed))
    return AugmentPipeline(ops=tuple(ops), magnitude=m)


def apply_op(op: AugmentOp, x: np.ndarray) -> np.ndarray:
    """Apply one op to a single sample (copy; the input is never mutated)."""
    image_shaped = x.ndim == 2
    if not image_shaped and op.kind in SPATIAL_OPS:
        raise UnsupportedOpError(f"{op.kind} requires image-shaped input, got shape {x.shape}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(op.seed)))
    out = x.copy()

    if op.kind == "cutout":
        h, w = x.shape
        side_h = int(round(op.params["side_frac"] * h))
        side_w = int(round(op.params["side_frac"] * w))
        if side_h and side_w:
            top = int(rng.integers(0, h - side_h + 1))
            left = int(rng.integers(0, w - side_w + 1))
            out[top : top + side_h, left : left + side_w] = CUTOUT_FILL
    elif op.kind == "gaussian-noise":
        sigma = op.params["sigma"]
        if sigma > 0:
            out = out + rng.normal(0.0, sigma, size=x.shape).astype(x.dtype)
    elif op.kind == "brightness-shift":
        out = out + np.asarray(op.params["delta"], dtype=x.dtype)
    elif op.kind == "contrast-scale":
        if op.params["scale"] != 1.0:
            center = 0.5 if image_shaped else 0.0
            out = center + np.asarray(op.params["scale"], dtype=x.dtype) * (out - center)
    elif op.kind == "translate":
        h, w = x.shape
        limit_h = int(round(op.params["max_frac"] * h))
        limit_w = int(round(op.params["max_frac"] * w))
        dy = int(rng.integers(-limit_h, limit_h + 1)) if limit_h else 0
        dx = int(rng.integers(-limit_w, limit_w + 1)) if limit_w else 0
        if dy or dx:
            shifted = np.full_like(x, TRANSLATE_FILL)
            ys, yd = _shift_slices(h, dy)
            xs, xd = _shift_slices(w, dx)
            shifted[yd, xd] = x[ys, xs]
            out = shifted
    elif op.kind == "horizontal-flip":
        if rng.random() < op.params["prob"]:
            out = out[:, ::-1].copy()

    if image_shaped:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(x.dtype, copy=False)


def _shift_slices(size, delta):
    """Source and destination slices for a 1-d shift by ``delta``."""
    if delta >= 0:
        return slice(0, size - delta), slice(delta, size)
    return slice(-delta, size), slice(0, size + delta)


def apply(pipeline: AugmentPipeline, x: np.ndarray) -> np.ndarray:
    """Apply all ops in order to one sample; returns a new array."""
    out = x
    for op in pipeline.ops:
        out = apply_op(op, out)
    return out if out is not x else x.copy()


def augment_batch(policy: AugmentPolicy, batch: np.ndarray, global_seed: int, epoch: int, sample_indices) -> np.ndarray:
    """Fresh per-sample pipelines, seeded by (global seed, epoch, index)."""
    out = np.empty_like(batch)
    for row, idx in enumerate(sample_indices):
        pipe = sample_pipeline(policy, derive_seed(global_seed, epoch, idx))
        out[row] = apply(pipe, batch[row])
    return out
