"""Versioned binary container: JSON metadata plus named arrays, sealed with a SHA-256 digest.

Layout (little endian)::

    b"DISPOCKP" | u32 version | u64 len | metadata JSON | u32 n_arrays
    per array: u16 len | name | u8 len | dtype | u8 ndim | u64 * ndim shape | u64 nbytes | data
    32-byte SHA-256 of everything above

Arrays are written in name order and metadata with sorted keys, so saving the
same bundle twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from dispo.errors import CheckpointError

MAGIC = b"DISPOCKP"
VERSION = 1


def dumps(meta: dict, arrays: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<I", version)]
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<Q", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        # np.require keeps 0-d arrays 0-d, unlike ascontiguousarray
        arr = np.require(arrays[name], requirements="C")
        if arr.dtype == object:
            raise CheckpointError(f"array {name!r} has object dtype")
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        parts += [
            struct.pack("<H", len(name_b)), name_b,
            struct.pack("<B", len(dtype_b)), dtype_b,
            struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape),
            struct.pack("<Q", arr.nbytes), arr.tobytes(),
        ]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, version: int = VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 4 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    reader = _Reader(body)
    reader.take(len(MAGIC))
    (found,) = reader.unpack("<I")
    if found != version:
        raise CheckpointError(f"checkpoint version {found} does not match supported version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (corrupt or truncated file)")
    (meta_len,) = reader.unpack("<Q")
    meta = json.loads(reader.take(meta_len).decode("utf-8"))
    (n_arrays,) = reader.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (dtype_len,) = reader.unpack("<B")
        dtype = np.dtype(reader.take(dtype_len).decode("ascii"))
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = reader.unpack("<Q")
        arr = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
        arrays[name] = arr
    if reader.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return meta, arrays


def save(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
