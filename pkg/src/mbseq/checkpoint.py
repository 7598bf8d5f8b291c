"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"MBSQCKPT"
    version      u32       1
    step         u64       progress counter (the CLI stores epochs run)
    hash_len     u16       length of the config hash string
    config_hash  hash_len bytes, ASCII hex
    n_entries    u32
    n_entries times:
        name_len u16, name (UTF-8)
        dtype    u8        0 = float64, 1 = int64
        ndim     u8
        shape    ndim x u64
        values   prod(shape) x 8 bytes, row-major, little-endian

Entries are written in sorted name order so identical contents give
identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MBSQCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


@dataclass
class Checkpoint:
    entries: dict[str, np.ndarray]
    config_hash: str
    step: int


def _dtype_code(array: np.ndarray) -> int:
    if np.issubdtype(array.dtype, np.floating):
        return 0
    if np.issubdtype(array.dtype, np.integer):
        return 1
    raise TypeError(f"unsupported dtype {array.dtype}")


def encode(entries: dict[str, np.ndarray], config_hash: str, step: int) -> bytes:
    digest = config_hash.encode("ascii")
    parts = [MAGIC, struct.pack("<IQH", VERSION, step, len(digest)), digest, struct.pack("<I", len(entries))]
    for name in sorted(entries):
        array = np.asarray(entries[name])
        code = _dtype_code(array)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    offset = 8
    version, step, hash_len = struct.unpack_from("<IQH", blob, offset)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset += struct.calcsize("<IQH")
    config_hash = blob[offset : offset + hash_len].decode("ascii")
    offset += hash_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", blob, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
        offset += 8 * ndim
        dtype = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(shape)
        offset += n * 8
        entries[name] = values.astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(entries, config_hash, int(step))


def save_checkpoint(path, entries: dict[str, np.ndarray], config_hash: str, step: int) -> str:
    """Write the checkpoint and return the SHA-256 of its bytes."""
    blob = encode(entries, config_hash, step)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def entries_digest(entries: dict[str, np.ndarray]) -> str:
    """SHA-256 of the encoded entries alone (independent of header fields)."""
    return hashlib.sha256(encode(entries, "", 0)).hexdigest()
