"""Binary checkpoint container for named float32 arrays.

Layout, all little-endian:

    magic   4 bytes  b"ESEG"
    version u32      currently 1
    count   u32      number of arrays
    per array:
        name_len u16, name UTF-8 bytes
        rank     u8
        extents  rank x u32
        data     prod(extents) x f32, row-major

Round-trips are bit-exact for float32 input. Insertion order is preserved.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"ESEG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(target, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``target`` (path or binary file object)."""
    if hasattr(target, "write"):
        _write(target, arrays)
        return
    with open(target, "wb") as fh:
        _write(fh, arrays)


def _write(fh: BinaryIO, arrays: dict[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        enc = name.encode("utf-8")
        fh.write(struct.pack("<H", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<B", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b"")
        fh.write(data.tobytes())


def load_checkpoint(source) -> dict[str, np.ndarray]:
    """Read named arrays back; raises CheckpointError on malformed input."""
    if hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    buf = io.BytesIO(raw)

    def need(n: int, what: str) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return chunk

    if need(4, "magic") != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", need(1, "rank"))
        shape = struct.unpack(f"<{rank}I", need(4 * rank, "extents")) if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(need(4 * n, f"data of {name!r}"), dtype="<f4")
        out[name] = data.reshape(shape).copy()
    if buf.read(1):
        raise CheckpointError("trailing bytes after last array")
    return out
