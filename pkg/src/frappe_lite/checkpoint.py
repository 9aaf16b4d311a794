"""Named-tensor checkpoints.

Layout (little-endian)::

    b"FRAP" | version u32 | count u32
    per tensor: name_len u32 | name utf-8 | rank u32 | dims u32[rank] | data f32[prod(dims)]
"""

from __future__ import annotations

import hashlib
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"FRAP"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _items(tensors):
    items = tensors.items() if hasattr(tensors, "items") else tensors
    out, seen = [], set()
    for name, value in items:
        if name in seen:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
        out.append((name, np.asarray(arr)))
    return out


def encode_checkpoint(tensors) -> bytes:
    items = _items(tensors)
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, where: str = "checkpoint") -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 12:
        raise CheckpointFormatError(f"{where}: truncated header")
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{where}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{where}: format version {version}, expected {VERSION}")
    pos = 12
    out = OrderedDict()

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"{where}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{where}: tensor name is not utf-8") from exc
        if name in out:
            raise CheckpointFormatError(f"{where}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise CheckpointFormatError(f"{where}: {len(blob) - pos} trailing bytes")
    return out


def save_checkpoint(path: str | os.PathLike, tensors) -> str:
    """Write tensors and return the sha256 of the file contents."""
    blob = encode_checkpoint(tensors)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split_prefix(tensors: dict, prefix: str) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k[len(prefix):], v) for k, v in tensors.items() if k.startswith(prefix))


def with_prefix(tensors: dict, prefix: str) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((prefix + k, v) for k, v in tensors.items())
