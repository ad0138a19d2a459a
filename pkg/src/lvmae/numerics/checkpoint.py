"""``LVMT`` checkpoint files: named f64 arrays, bit-exact round trip.

Layout (little-endian)::

    b"LVMT" | version u32 | records...
    record = name_len u32 | name utf-8 | rank u32 | dims u32 * rank | f64 data
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LVMT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    n = len(buf)
    try:
        while pos < n:
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > n:
                raise CheckpointError(f"truncated record {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Atomic write: a crash mid-save leaves any previous file at ``path`` intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(arrays))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
