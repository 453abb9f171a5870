"""Cut a decoded clip into past / present / future frame blocks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ClipTooShort, EmptyPartition


@dataclass(frozen=True)
class PartitionSpec:
    n_past: int = 2
    n_present: int = 4
    n_future: int = 2
    frames_per_block: int = 5
    max_stride: int = 3

    def __post_init__(self):
        if self.n_past < 0 or self.n_future < 0:
            raise ValueError("n_past and n_future must be >= 0")
        if self.n_present < 1:
            raise ValueError("n_present must be >= 1")
        if self.frames_per_block < 1 or self.max_stride < 1:
            raise ValueError("frames_per_block and max_stride must be >= 1")

    @property
    def n_blocks(self) -> int:
        return self.n_past + self.n_present + self.n_future

    @property
    def n_frames(self) -> int:
        """Frames consumed per sample, before striding."""
        return self.n_blocks * self.frames_per_block

    @property
    def bidirectional(self) -> bool:
        return self.n_past >= 1 and self.n_future >= 1

    def span(self, stride: int) -> int:
        """Length of the source-frame window covered at ``stride``."""
        return (self.n_frames - 1) * stride + 1

    def fitting_strides(self, n_frames: int) -> List[int]:
        return [s for s in range(1, self.max_stride + 1) if self.span(s) <= n_frames]


@dataclass
class BlockPartition:
    """Frame blocks of one sample, each block shaped ``(frames_per_block, H, W, C)``.

    ``*_index`` hold the source frame indices of every block, in the same
    order as the blocks.
    """

    past_blocks: List[np.ndarray]
    present_blocks: List[np.ndarray]
    future_blocks: List[np.ndarray]
    source_stride: int
    past_index: List[np.ndarray] = field(default_factory=list)
    present_index: List[np.ndarray] = field(default_factory=list)
    future_index: List[np.ndarray] = field(default_factory=list)

    @property
    def m_past(self) -> int:
        return len(self.past_blocks)

    @property
    def m_future(self) -> int:
        return len(self.future_blocks)

    def groups(self) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray]]:
        return self.past_blocks, self.present_blocks, self.future_blocks

    def replace_blocks(self, past, present, future) -> "BlockPartition":
        return BlockPartition(
            list(past), list(present), list(future), self.source_stride,
            self.past_index, self.present_index, self.future_index,
        )


def block_frame_indices(spec: PartitionSpec, start: int, stride: int) -> np.ndarray:
    """Source frame index of every (block, frame) slot, shape ``(n_blocks, frames_per_block)``."""
    idx = start + stride * np.arange(spec.n_frames)
    return idx.reshape(spec.n_blocks, spec.frames_per_block)


def partition_clip(
    frames: np.ndarray,
    spec: PartitionSpec,
    rng: np.random.Generator,
    stride: Optional[int] = None,
    start: Optional[int] = None,
) -> BlockPartition:
    """Sample a block window from ``frames`` (``T x H x W x C``) and split it.

    The stride is drawn uniformly among ``1..spec.max_stride`` values whose
    window fits in the clip; pass ``stride`` to pin it (it is lowered to the
    largest fitting value when the clip is too short). The window start is
    uniform over all valid offsets unless ``start`` is given.
    """
    n = len(frames)
    if spec.span(1) > n:
        raise ClipTooShort(f"clip has {n} frames, need at least {spec.span(1)}")
    if stride is None:
        stride = int(rng.choice(spec.fitting_strides(n)))
    else:
        stride = max(s for s in range(1, max(stride, 1) + 1) if spec.span(s) <= n)
    last_start = n - spec.span(stride)
    if start is None:
        start = int(rng.integers(0, last_start + 1))
    elif not 0 <= start <= last_start:
        raise ClipTooShort(f"start {start} leaves no room for stride {stride}")

    idx = block_frame_indices(spec, start, stride)
    blocks = [np.ascontiguousarray(frames[row]) for row in idx]
    a, b = spec.n_past, spec.n_past + spec.n_present
    rows = list(idx)
    return BlockPartition(
        past_blocks=blocks[:a],
        present_blocks=blocks[a:b],
        future_blocks=blocks[b:],
        source_stride=stride,
        past_index=rows[:a],
        present_index=rows[a:b],
        future_index=rows[b:],
    )


def sample_pf_blocks(partition: BlockPartition, rng: np.random.Generator) -> Tuple[int, int]:
    """Draw one (past, future) block index pair uniformly."""
    if partition.m_past == 0 or partition.m_future == 0:
        raise EmptyPartition("need at least one past and one future block")
    return int(rng.integers(partition.m_past)), int(rng.integers(partition.m_future))


def split_blocks(frames: np.ndarray, frames_per_block: int, stride: int = 1) -> List[np.ndarray]:
    """Non-overlapping consecutive blocks over the whole clip (trailing remainder dropped)."""
    sub = frames[::stride]
    n = len(sub) // frames_per_block
    return [sub[i * frames_per_block:(i + 1) * frames_per_block] for i in range(n)]
