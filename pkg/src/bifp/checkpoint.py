"""Versioned checkpoint container.

File layout (little-endian)::

    b"BFPC" | u32 version | u64 header length | JSON header | array payload

The header carries free-form metadata plus a table of named arrays
(dtype, shape, offset, byte count) and the SHA-256 of the payload. Files are
written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

from .errors import CorruptFile, VersionMismatch

MAGIC = b"BFPC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _to_numpy(value) -> np.ndarray:
    if torch.is_tensor(value):
        return value.detach().cpu().contiguous().numpy()
    return np.asarray(value, order="C")  # ascontiguousarray would turn 0-d into 1-d


def dump_bytes(arrays: Mapping[str, object], meta: Mapping[str, object]) -> bytes:
    table, chunks, offset = [], [], 0
    for name, value in arrays.items():
        arr = _to_numpy(value)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append(
            {"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps(
        {"meta": meta, "arrays": table, "sha256": hashlib.sha256(payload).hexdigest()},
        sort_keys=True,
    ).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def load_bytes(raw: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], dict]:
    if len(raw) < _PREFIX.size:
        raise CorruptFile(f"{source}: truncated prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptFile(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"{source}: format version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CorruptFile(f"{source}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except ValueError as exc:
        raise CorruptFile(f"{source}: unreadable header") from exc
    payload = raw[start:]
    expected = sum(a["nbytes"] for a in header["arrays"])
    if len(payload) != expected:
        raise CorruptFile(f"{source}: payload is {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptFile(f"{source}: payload checksum mismatch")
    arrays = {}
    for a in header["arrays"]:
        buf = payload[a["offset"]:a["offset"] + a["nbytes"]]
        dtype = np.dtype(a["dtype"]).newbyteorder("<") if np.dtype(a["dtype"]).itemsize > 1 else np.dtype(a["dtype"])
        arrays[a["name"]] = np.frombuffer(buf, dtype=dtype).reshape(a["shape"]).copy()
    return arrays, header["meta"]


def save(path, arrays: Mapping[str, object], meta: Mapping[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dump_bytes(arrays, meta)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CorruptFile(f"{path}: no such checkpoint")
    return load_bytes(path.read_bytes(), str(path))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_arrays(prefix: str, state: Mapping[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    return {f"{prefix}{k}": _to_numpy(v) for k, v in state.items()}


def extract_state(arrays: Mapping[str, np.ndarray], prefix: str) -> Dict[str, torch.Tensor]:
    return {
        k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)
    }
