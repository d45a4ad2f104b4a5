"""SNT1: a minimal named-tensor container.

Little-endian, no padding::

    b"SNT1"  u32 count
    count x ( u16 name_len | name (UTF-8) | u8 ndim | ndim x u32 dims | f32 data, row-major )
"""

from __future__ import annotations

import os
import struct
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"SNT1"


class SNT1Error(OSError):
    pass


def encode_snt1(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen: set[str] = set()
    parts = [MAGIC, struct.pack("<I", len(items))]
    for name, arr in items:
        if name in seen:
            raise SNT1Error(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise SNT1Error(f"tensor name too long: {name[:40]!r}...")
        a = np.asarray(arr, dtype="<f4")
        if a.ndim > 0xFF:
            raise SNT1Error(f"{name}: too many dimensions")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_snt1(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise SNT1Error(f"truncated SNT1 data at byte {off} (wanted {n} more)")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise SNT1Error("bad magic")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise SNT1Error(f"tensor name is not UTF-8: {e}") from None
        if name in out:
            raise SNT1Error(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(dims)
    if off != len(view):
        raise SNT1Error(f"{len(view) - off} trailing bytes after last tensor")
    return out


def write_snt1(path: str | os.PathLike, tensors) -> None:
    data = encode_snt1(tensors)
    with open(path, "wb") as f:
        f.write(data)


def read_snt1(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_snt1(f.read())
