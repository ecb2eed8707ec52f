"""Binary checkpoint archive.

Layout (little-endian)::

    b"SGAN" | version u32 | tensor count u32
    per tensor: name length u32 | name utf-8 | rank u32 | dims u32 * rank | float32 data
    config length u32 | canonical JSON (sorted keys, no whitespace)
    CRC32 u32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SGAN"
VERSION = 1


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def to_f32(arr: np.ndarray) -> np.ndarray:
    """The float64 values a checkpoint round-trip reproduces."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = canonical_json(meta)
    parts.append(struct.pack("<I", len(blob)) + blob)
    body = b"".join(parts)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or too short)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        (count,) = struct.unpack_from("<I", body, 8)
        pos = 12
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4 : pos + 4 + n].decode()
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            tensors[name] = arr.astype(np.float64)
            pos += 4 * size
        (n,) = struct.unpack_from("<I", body, pos)
        meta = json.loads(body[pos + 4 : pos + 4 + n])
        if pos + 4 + n != len(body):
            raise CheckpointError(f"{path}: trailing bytes after config")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return tensors, meta
