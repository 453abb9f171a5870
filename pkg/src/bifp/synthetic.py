"""Synthetic clips with controllable temporal structure.

A bright square moves (``drift``), dilates (``grow``) or sits still
(``static``) on a dark background with Gaussian pixel noise. Squares are
rendered with area coverage so sub-pixel motion is visible.

With ``class_rule="direction"`` half of the clips are stored time-reversed
and labelled 0 (forward clips are labelled 1). With
``class_rule="motif_identity"`` the label is the index of the clip's motif
in ``motifs``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .dataio import ClipRecord, write_clip, write_index
from .errors import SpecTooSmall

MOTIFS = ("drift", "grow", "static")
CLASS_RULES = ("motif_identity", "direction")
BACKGROUNDS = ("flat", "ramp")


@dataclass(frozen=True)
class SyntheticSpec:
    n_clips: int = 32
    frames: int = 40
    size: int = 32
    motif: Union[str, Tuple[str, ...]] = "drift"
    noise_sigma: float = 0.05
    class_rule: str = "direction"
    velocity: float = 2.0  # px/frame along +x for drift
    growth: float = 0.5  # px/frame added to the side length for grow
    square: Tuple[float, float] = (0.2, 0.35)  # side range as a fraction of size
    channels: int = 3
    background: str = "flat"
    frames_per_block: int = 5

    def __post_init__(self):
        motifs = (self.motif,) if isinstance(self.motif, str) else tuple(self.motif)
        object.__setattr__(self, "motif", motifs if len(motifs) > 1 else motifs[0])
        for m in motifs:
            if m not in MOTIFS:
                raise ValueError(f"unknown motif {m!r}")
        if self.class_rule not in CLASS_RULES:
            raise ValueError(f"unknown class_rule {self.class_rule!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")

    @property
    def motifs(self) -> Tuple[str, ...]:
        return (self.motif,) if isinstance(self.motif, str) else self.motif


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel ``[i, i+1)`` covered by ``[lo, hi)``."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def render_square(size: int, x: float, y: float, side: float) -> np.ndarray:
    """Coverage mask of an axis-aligned square with top-left corner ``(x, y)``."""
    return np.outer(_coverage(y, y + side, size), _coverage(x, x + side, size))


def object_track(spec: SyntheticSpec, motif: str, rng: np.random.Generator):
    """Per-frame ``(x, y, side)`` of the square for a forward clip."""
    t = np.arange(spec.frames, dtype=np.float64)
    side0 = rng.uniform(*spec.square) * spec.size
    if motif == "drift":
        travel = spec.velocity * (spec.frames - 1)
        room = spec.size - side0 - travel
        x0 = rng.uniform(0, room) if room > 0 else rng.uniform(min(0.0, room), max(0.0, room))
        xs = x0 + spec.velocity * t
        ys = np.full_like(t, rng.uniform(0, spec.size - side0))
        sides = np.full_like(t, side0)
    elif motif == "grow":
        side0 = min(side0, spec.size / 4)
        sides = side0 + spec.growth * t
        cx = rng.uniform(side0, spec.size - side0)
        cy = rng.uniform(side0, spec.size - side0)
        xs, ys = cx - sides / 2, cy - sides / 2
    else:
        xs = np.full_like(t, rng.uniform(0, spec.size - side0))
        ys = np.full_like(t, rng.uniform(0, spec.size - side0))
        sides = np.full_like(t, side0)
    return xs, ys, sides


def render_clip(spec: SyntheticSpec, motif: str, rng: np.random.Generator) -> np.ndarray:
    """One forward clip, ``frames x size x size x channels`` in ``[0, 1]``."""
    xs, ys, sides = object_track(spec, motif, rng)
    color = rng.uniform(0.6, 1.0, size=spec.channels)
    if spec.background == "ramp":
        bg = np.broadcast_to(np.linspace(0.0, 0.3, spec.size)[None, :], (spec.size, spec.size))
    else:
        bg = np.zeros((spec.size, spec.size))
    bg = bg[..., None] * np.ones(spec.channels)
    frames = np.empty((spec.frames, spec.size, spec.size, spec.channels), dtype=np.float64)
    for i, (x, y, s) in enumerate(zip(xs, ys, sides)):
        mask = render_square(spec.size, x, y, s)[..., None]
        frames[i] = bg * (1 - mask) + color * mask
    frames += rng.normal(0.0, spec.noise_sigma, size=frames.shape) if spec.noise_sigma > 0 else 0.0
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_arrays(spec: SyntheticSpec, rng: np.random.Generator):
    """Yield ``(clip_id, frames, label)`` for every clip."""
    if spec.size < 16:
        raise SpecTooSmall(f"size {spec.size} < 16")
    if spec.frames < 3 * spec.frames_per_block:
        raise SpecTooSmall(f"frames {spec.frames} < {3 * spec.frames_per_block}")
    motifs = spec.motifs
    width = max(4, len(str(spec.n_clips - 1)))
    for i in range(spec.n_clips):
        motif = motifs[int(rng.integers(len(motifs)))] if len(motifs) > 1 else motifs[0]
        frames = render_clip(spec, motif, rng)
        if spec.class_rule == "direction":
            label = int(i % 2 == 0)
            if not label:
                frames = frames[::-1].copy()
        else:
            label = motifs.index(motif)
        yield f"clip{i:0{width}d}", frames, label


def generate(spec: SyntheticSpec, out_dir, rng: Optional[np.random.Generator] = None, seed: int = 0) -> Path:
    """Write a dataset directory (raw clip tensors plus ``clips.tsv``)."""
    rng = np.random.default_rng(seed) if rng is None else rng
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for clip_id, frames, label in generate_arrays(spec, rng):
        (out / clip_id).mkdir(exist_ok=True)
        rel = f"{clip_id}/clip.bfp"
        write_clip(out / rel, frames)
        records.append(ClipRecord(clip_id, rel, len(frames), label))
    write_index(out, records)
    return out


def centroid_track(frames: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Intensity-weighted x/y centroid of the bright object per frame, shape ``(T, 2)``."""
    lum = frames.mean(axis=-1)
    w = np.where(lum > threshold, lum, 0.0)
    total = w.sum(axis=(1, 2))
    total[total == 0] = np.nan
    h, wd = lum.shape[1:]
    cy = (w * (np.arange(h)[None, :, None] + 0.5)).sum(axis=(1, 2)) / total
    cx = (w * (np.arange(wd)[None, None, :] + 0.5)).sum(axis=(1, 2)) / total
    return np.stack([cx, cy], axis=1)


def detect_direction(frames: np.ndarray) -> int:
    """Hand-coded arrow-of-time detector for drift clips: 1 if the object moves +x."""
    track = centroid_track(frames)[:, 0]
    ok = ~np.isnan(track)
    if ok.sum() < 2:
        return 1
    slope = np.polyfit(np.nonzero(ok)[0], track[ok], 1)[0]
    return int(slope > 0)
