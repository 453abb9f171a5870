"""On-disk clip dataset.

Layout::

    root/
      clips.tsv                 clip_id  path  n_frames  label
      <clip_id>/clip.bfp        raw tensor, or a directory of frame images

The raw tensor file is ``b"BFP1"`` followed by little-endian ``u32`` T, H, W,
C and ``T*H*W*C`` little-endian float32 values in THWC order.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Union

import numpy as np

from .errors import DatasetEmpty, DatasetError

MAGIC = b"BFP1"
INDEX_NAME = "clips.tsv"
INDEX_COLUMNS = ("clip_id", "path", "n_frames", "label")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

PathLike = Union[str, os.PathLike]


def write_clip(path: PathLike, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise DatasetError(f"expected T x H x W x C frames, got shape {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", *frames.shape))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_clip(path: PathLike) -> np.ndarray:
    path = Path(path)
    if path.is_dir():
        return _read_frame_dir(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise DatasetError(f"{path}: truncated header")
    shape = struct.unpack("<4I", raw[4:20])
    expected = 20 + 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(shape).astype(np.float32)


def _read_frame_dir(path: Path) -> np.ndarray:
    from PIL import Image

    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"{path}: no frame images")
    frames = []
    for f in files:
        with Image.open(f) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    return np.stack(frames)


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    path: str
    n_frames: int
    label: int = -1


def write_index(root: PathLike, records: Sequence[ClipRecord]) -> Path:
    out = Path(root) / INDEX_NAME
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for r in records:
            w.writerow((r.clip_id, r.path, r.n_frames, r.label))
    return out


def read_index(root: PathLike) -> List[ClipRecord]:
    index = Path(root) / INDEX_NAME
    if not index.exists():
        raise DatasetError(f"missing {index}")
    with open(index, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if rows and tuple(rows[0]) == INDEX_COLUMNS:
        rows = rows[1:]
    records = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DatasetError(f"{index}:{lineno}: expected 4 columns, got {len(row)}")
        records.append(ClipRecord(row[0], row[1], int(row[2]), int(row[3])))
    return records


class ClipDataset:
    """Index-backed clip collection with an in-memory cache."""

    def __init__(self, root: PathLike, records: Sequence[ClipRecord] = None, cache: bool = True):
        self.root = Path(root)
        self.records = list(read_index(root) if records is None else records)
        if not self.records:
            raise DatasetEmpty(f"no clips in {self.root}")
        self._cache = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ClipRecord]:
        return iter(self.records)

    def frames(self, i: int) -> np.ndarray:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        rec = self.records[i]
        p = Path(rec.path)
        arr = read_clip(p if p.is_absolute() else self.root / p)
        if self._cache is not None:
            self._cache[i] = arr
        return arr

    def label(self, i: int) -> int:
        return self.records[i].label

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "ClipDataset":
        sub = ClipDataset.__new__(ClipDataset)
        sub.root = self.root
        sub.records = [self.records[i] for i in indices]
        if not sub.records:
            raise DatasetEmpty(f"empty subset of {self.root}")
        sub._cache = {} if self._cache is not None else None
        if self._cache is not None:
            for new, old in enumerate(indices):
                if old in self._cache:
                    sub._cache[new] = self._cache[old]
        return sub
