"""NDCK container: a flat, little-endian list of named float arrays.

Layout::

    b"NDCK" | u32 version=1 | u32 count |
    count x ( u16 name_len | name (utf-8) | u8 dtype | u8 rank | rank x u32 dim | payload )

dtype 0 is float32, 1 is float64.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"NDCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"{name}: name too long")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an NDCK container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", view, 4)
    except struct.error:
        raise CheckpointError("truncated NDCK header") from None
    if version != VERSION:
        raise CheckpointError(f"unsupported NDCK version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError(f"{name}: truncated payload")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(dims)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
            pos += nbytes
    except struct.error:
        raise CheckpointError("truncated NDCK record") from None
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(arrays))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
