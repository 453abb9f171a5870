"""Spatial and photometric augmentation of block partitions.

Two modes:

* ``consistent``: one spatial parameter draw shared by every block of the
  clip (required when spatial negatives are used, since they need cell
  correspondence between present and past/future).
* ``independent``: a fresh spatial draw for each of P, V and F.

Colour jitter is drawn per frame when ``per_frame_jitter`` is set (the
pretraining recipe) and once per partition group otherwise (finetuning).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import IncompatiblePolicy, ShapeMismatch
from .partitioning import BlockPartition

ALL_OPS = ("crop", "hflip", "color_jitter", "sobel", "rot90")
MODES = ("consistent", "independent")

# YIQ transform used for hue rotation.
_RGB2YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=np.float64
)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


@dataclass(frozen=True)
class AugmentPolicy:
    mode: str = "independent"
    ops: Tuple[str, ...] = ("crop", "hflip", "color_jitter")
    crop_size: Optional[int] = 128
    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.25
    hue: float = 0.1
    pf_only_ops: Tuple[str, ...] = ()
    per_frame_jitter: bool = True
    hflip_p: float = 0.5
    sobel_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "pf_only_ops", tuple(self.pf_only_ops))
        if self.mode not in MODES:
            raise ValueError(f"unknown augmentation mode {self.mode!r}")
        unknown = set(self.ops) - set(ALL_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        if not set(self.pf_only_ops) <= set(self.ops):
            raise ValueError("pf_only_ops must be a subset of ops")

    def check(self, spatial_negatives: bool) -> None:
        if spatial_negatives and self.mode != "consistent":
            raise IncompatiblePolicy("spatial negatives need consistent augmentation")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(ops=(), crop_size=None)


# -- single ops --------------------------------------------------------------

def crop(block: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return block[:, top:top + size, left:left + size]


def center_crop(block: np.ndarray, size: Optional[int]) -> np.ndarray:
    if size is None:
        return block
    h, w = block.shape[1:3]
    if size > h or size > w:
        raise ShapeMismatch(f"crop {size} larger than frame {h}x{w}")
    return crop(block, (h - size) // 2, (w - size) // 2, size)


def hflip(block: np.ndarray) -> np.ndarray:
    return block[:, :, ::-1]


def rot90(block: np.ndarray, k: int) -> np.ndarray:
    return np.rot90(block, k, axes=(1, 2))


def sobel(block: np.ndarray) -> np.ndarray:
    """Replace every channel of every frame by its gradient magnitude."""
    b = block.astype(np.float32, copy=False)
    gy = ndimage.sobel(b, axis=1, mode="nearest")
    gx = ndimage.sobel(b, axis=2, mode="nearest")
    return np.hypot(gx, gy).astype(np.float32)


def color_jitter(frames: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Apply jitter; ``params`` has one ``(brightness, contrast, saturation, hue)`` row per frame."""
    x = frames.astype(np.float32, copy=True)
    b, c, s, h = (params[:, i].reshape(-1, 1, 1, 1).astype(np.float32) for i in range(4))
    x *= b
    if x.shape[-1] == 3:
        gray = (x @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[..., None]
    else:
        gray = x.mean(axis=-1, keepdims=True)
    mean = gray.mean(axis=(1, 2, 3), keepdims=True)
    x = (x - mean) * c + mean
    if x.shape[-1] == 3:
        gray = (x @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[..., None]
        x = gray + (x - gray) * s
        yiq = x @ _RGB2YIQ.T.astype(np.float32)
        theta = (2 * np.pi * h).astype(np.float32)
        cos, sin = np.cos(theta)[..., 0], np.sin(theta)[..., 0]
        i_, q_ = yiq[..., 1].copy(), yiq[..., 2].copy()
        yiq[..., 1] = cos * i_ - sin * q_
        yiq[..., 2] = sin * i_ + cos * q_
        x = yiq @ _YIQ2RGB.T.astype(np.float32)
    return np.clip(x, 0.0, 1.0)


# -- parameter sampling ------------------------------------------------------

@dataclass
class AugmentParams:
    crop_offset: Optional[Tuple[int, int]] = None
    flip: bool = False
    rot_k: int = 0
    sobel: bool = False
    # one row per frame when per-frame, else a single row
    jitter: Optional[np.ndarray] = None
    extra: Dict[str, object] = field(default_factory=dict)


def _jitter_rows(policy: AugmentPolicy, rng: np.random.Generator, n: int) -> np.ndarray:
    lo_hi = [
        (1 - policy.brightness, 1 + policy.brightness),
        (1 - policy.contrast, 1 + policy.contrast),
        (1 - policy.saturation, 1 + policy.saturation),
        (-policy.hue, policy.hue),
    ]
    return np.stack([rng.uniform(lo, hi, size=n) for lo, hi in lo_hi], axis=1)


def sample_params(
    policy: AugmentPolicy, rng: np.random.Generator, height: int, width: int, n_frames: int
) -> AugmentParams:
    p = AugmentParams()
    ops = policy.ops
    if "crop" in ops and policy.crop_size is not None:
        if policy.crop_size > height or policy.crop_size > width:
            raise ShapeMismatch(f"crop {policy.crop_size} larger than frame {height}x{width}")
        p.crop_offset = (
            int(rng.integers(0, height - policy.crop_size + 1)),
            int(rng.integers(0, width - policy.crop_size + 1)),
        )
    if "hflip" in ops:
        p.flip = bool(rng.random() < policy.hflip_p)
    if "rot90" in ops:
        p.rot_k = int(rng.integers(4))
    if "sobel" in ops:
        p.sobel = bool(rng.random() < policy.sobel_p)
    if "color_jitter" in ops:
        p.jitter = _jitter_rows(policy, rng, n_frames if policy.per_frame_jitter else 1)
    return p


def apply_params(
    blocks: Sequence[np.ndarray], policy: AugmentPolicy, params: AugmentParams, pf: bool
) -> List[np.ndarray]:
    """Apply ``params`` to a partition group; ``pf`` enables ``pf_only_ops``."""
    out = []
    frame0 = 0
    for block in blocks:
        x = block
        for op in policy.ops:
            if op in policy.pf_only_ops and not pf:
                continue
            if op == "crop" and params.crop_offset is not None:
                x = crop(x, *params.crop_offset, policy.crop_size)
            elif op == "hflip" and params.flip:
                x = hflip(x)
            elif op == "rot90" and params.rot_k:
                x = rot90(x, params.rot_k)
            elif op == "sobel" and params.sobel:
                x = sobel(x)
            elif op == "color_jitter" and params.jitter is not None:
                rows = params.jitter
                if len(rows) > 1:
                    rows = rows[frame0:frame0 + len(x)]
                else:
                    rows = np.repeat(rows, len(x), axis=0)
                x = color_jitter(x, rows)
        frame0 += len(block)
        out.append(np.ascontiguousarray(x, dtype=np.float32))
    return out


def augment_partition(
    partition: BlockPartition,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    spatial_negatives: bool = False,
    return_params: bool = False,
):
    """Augment P, V and F according to ``policy``.

    Returns the new partition, plus the ``(past, present, future)`` parameter
    draws when ``return_params`` is set.
    """
    policy.check(spatial_negatives)
    groups = partition.groups()
    shapes = {b.shape for g in groups for b in g}
    if len(shapes) > 1:
        raise ShapeMismatch(f"blocks differ in shape: {sorted(shapes)}")
    if not policy.ops:
        params = (AugmentParams(),) * 3
        out = partition.replace_blocks(*groups)
        return (out, params) if return_params else out
    t, h, w = next(iter(shapes))[:3]
    sizes = [len(g) * t for g in groups]
    if policy.mode == "consistent":
        shared = sample_params(policy, rng, h, w, sum(sizes))
        params = []
        start = 0
        for n in sizes:
            p = AugmentParams(shared.crop_offset, shared.flip, shared.rot_k, shared.sobel)
            if shared.jitter is not None:
                p.jitter = shared.jitter if len(shared.jitter) == 1 else shared.jitter[start:start + n]
            params.append(p)
            start += n
    else:
        params = [sample_params(policy, rng, h, w, n) for n in sizes]
    past = apply_params(groups[0], policy, params[0], pf=True)
    present = apply_params(groups[1], policy, params[1], pf=False)
    future = apply_params(groups[2], policy, params[2], pf=True)
    out = partition.replace_blocks(past, present, future)
    return (out, tuple(params)) if return_params else out


def eval_transform(block: np.ndarray, crop_size: Optional[int]) -> np.ndarray:
    """Evaluation-time view: center crop, nothing else."""
    return np.ascontiguousarray(center_crop(block, crop_size), dtype=np.float32)
