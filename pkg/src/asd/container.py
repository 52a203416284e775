"""Binary container for named float64 tensors (``.asdt`` files).

Layout, all integers little-endian::

    b"ASDT" | version:u16 | count:u32 |
    count x ( name_len:u32 | name:utf-8 | dtype:u8 | rank:u32 | dims:u64*rank | payload )

Only dtype code 1 (float64) is defined. Entry order is preserved, so
``write(read(blob)) == blob``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ASDT"
VERSION = 1
DTYPE_FLOAT64 = 1


class ContainerError(ValueError):
    """Raised for malformed or unsupported container payloads."""


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8").copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", DTYPE_FLOAT64, arr.ndim))
        if arr.ndim:
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container: need {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("bad magic: not an ASDT container")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"entry name is not valid UTF-8 at offset {pos}") from exc
        dtype, rank = struct.unpack("<BI", take(5))
        if dtype != DTYPE_FLOAT64:
            raise ContainerError(f"entry {name!r}: unknown dtype code {dtype}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * size)
        if name in out:
            raise ContainerError(f"duplicate entry name {name!r}")
        out[name] = np.frombuffer(bytes(payload), dtype="<f8").reshape(dims).copy()
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
