"""Flat binary checkpoint container.

Layout (all integers little-endian):

    magic b"PDSC" | u32 version (=1) | u32 n_entries
    entry: u16 name_len | name utf-8 | u8 ndim | u32 dims... | f64 LE data

Entries are written in dict order and read back in file order; payloads are
always float64 so save/load round-trips are bitwise regardless of platform.
Writes go through a temp file and os.replace so an abort never leaves a
truncated checkpoint behind.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PDSC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"entry {name!r} has too many dims")
        chunks.append(struct.pack("<H", len(enc)))
        chunks.append(enc)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(chunks)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = blob[pos:pos + n]
        pos += n
        return out

    pos = 0
    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, n_entries = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        count = 1
        for d in dims:
            count *= d
        data = np.frombuffer(take(8 * count, f"data of {name!r}"), dtype="<f8")
        if name in arrays:
            raise CheckpointError(f"duplicate entry {name!r}")
        arrays[name] = data.reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return arrays
