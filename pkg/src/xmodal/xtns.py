"""XTNS: a little-endian named-tensor container used for features and checkpoints.

Layout::

    b"XTNS"  u32 version(=1)  u32 count
    count x [ u16 name_len, name (utf-8), u8 dtype (0=f32, 1=i64),
              u8 rank, u32 dims[rank], payload ]
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"XTNS"
VERSION = 1
F32, I64 = 0, 1
_DTYPES = {F32: np.dtype("<f4"), I64: np.dtype("<i8")}


def dumps(entries: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = I64 if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else F32
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated XTNS container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(read(4)) != MAGIC:
        raise FormatError("bad magic bytes, not an XTNS container")
    version, count = struct.unpack("<II", read(8))
    if version != VERSION:
        raise FormatError(f"unsupported XTNS version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", read(2))
        try:
            name = bytes(read(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8") from exc
        code, rank = struct.unpack("<BB", read(2))
        if code not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", read(4 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(bytes(read(n * dt.itemsize)), dtype=dt).reshape(dims)
        if name in out:
            raise FormatError(f"duplicate entry {name!r}")
        out[name] = arr
    if pos != len(view):
        raise FormatError("trailing bytes after last entry")
    return out


def save(path, entries: dict) -> None:
    data = dumps(entries)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
