"""Binary checkpoint format for named float64 arrays.

Layout (all integers little-endian)::

    magic    8 bytes  b"IAMCKPT\\0"
    version  u32
    count    u32
    count x { name_len u32, name utf-8, rank u32, dims u64[rank], payload f64[prod(dims)] }

Arrays are row-major.  Loading parses the whole file before returning, so a
damaged file never yields a partial result.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"IAMCKPT\0"
VERSION = 1


def encode_checkpoint(arrays: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(arrays: dict[str, np.ndarray], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(arrays))
    tmp.replace(path)
    return path


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "header") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"array #{i} name length"))
        name = take(name_len, f"array #{i} name").decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<I", take(4, f"array {name!r} rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"array {name!r} dims"))
        n = int(np.prod(dims)) if rank else 1
        payload = take(8 * n, f"array {name!r} payload")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last array")
    return arrays


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)
