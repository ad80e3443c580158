"""Binary named-tensor container used for model, optimizer, tracker and mask state.

Layout (all integers little-endian)::

    b"TPCK"  u32 version  u32 tensor_count
    per tensor:
        u16 name_len, name (UTF-8)
        u8 dtype code, u8 rank, rank x u64 dims
        payload
    u64 meta_len, meta (UTF-8 JSON, sorted keys)

dtype codes: 0 float32, 1 float64, 2 bool bitset (LSB-first, padded to a
byte), 3 int64. The file must end exactly after the metadata block.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"TPCK"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype(bool): 2, np.dtype("<i8"): 3}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 3: np.dtype("<i8")}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _dtype_code(arr: np.ndarray) -> int:
    try:
        return _CODES[arr.dtype]
    except KeyError:
        raise TypeError(f"unsupported checkpoint dtype {arr.dtype}") from None


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        if code == 2:
            buf.write(np.packbits(arr.reshape(-1), bitorder="little").tobytes())
        else:
            buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    raw_meta = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<Q", len(raw_meta)))
    buf.write(raw_meta)
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if n < 0 or pos + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {pos}, file has {len(view)}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"corrupt tensor name: {exc}") from None
        code, rank = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if code == 2:
            bits = np.frombuffer(take((n + 7) // 8), dtype=np.uint8)
            arr = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(dims)
        elif code in _DTYPES:
            dt = _DTYPES[code]
            arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
        else:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype code {code}")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor {name!r}")
        tensors[name] = arr
    (meta_len,) = struct.unpack("<Q", take(8))
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt metadata block: {exc}") from None
    if pos != len(view):
        raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after metadata")
    return Checkpoint(tensors, meta)


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    """Write atomically: the target path either keeps its old content or gets the full new file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
