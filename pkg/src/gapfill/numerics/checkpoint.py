"""Flat binary tensor files.

Layout (all integers little-endian u32):
    magic "PMND" | format version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | element bytes

Format version 1 stores elements as little-endian float32; higher-precision
tensors are cast on save.  Tensors are written in sorted-name order so equal
parameter sets produce byte-identical files.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"PMND"
VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Atomically write a name -> ndarray mapping."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_tensors(path) -> dict:
    """Read a tensor file back into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if len(raw) < 12 or bytes(view[:4]) != MAGIC:
        raise FormatError(f"{path}: not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = np.array(arr, copy=True)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after last tensor")
    return out
