"""Little-endian binary tensor container.

Layout: b"XRID", u32 version, u32 entry count, then per entry
u16 name length, UTF-8 name, u8 dtype code, u8 rank, u32 dims[rank] and the
raw little-endian payload. Code 0 is float32; code 1 (int64) carries labels.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"XRID"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1}


class ContainerError(ValueError):
    """Malformed container bytes or an unsupported entry."""


def _code(name: str, arr: np.ndarray) -> int:
    try:
        return CODES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise ContainerError(f"entry {name!r}: unsupported dtype {arr.dtype}") from None


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value)
        code = _code(name, arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"entry name too long ({len(raw)} bytes)")
        if arr.ndim > 0xFF:
            raise ContainerError(f"entry {name!r}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container at byte {pos} (wanted {n} more)")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise ContainerError("bad magic; not an XRID container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise ContainerError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if name in out:
            raise ContainerError(f"duplicate entry {name!r}")
        out[name] = np.frombuffer(bytes(take(size)), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after {count} entries")
    return out


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
