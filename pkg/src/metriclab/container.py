"""Versioned binary container for model checkpoints and fitted partitioners.

Layout: magic + version line, a length-prefixed JSON header (config echo),
then named float64 tensors with shape headers, all little-endian with fixed
field widths. Writing the same header and tensors twice produces identical
bytes, and loading reproduces every tensor bitwise.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MLCK\x01\n"


class ContainerError(ValueError):
    """Corrupt or mismatched container file."""


def save_tensors(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a header dict and named float64 arrays; insertion order kept."""
    blob = bytearray()
    blob += MAGIC
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", a.ndim)
        for dim in a.shape:
            blob += struct.pack("<Q", dim)
        blob += a.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def load_tensors(path):
    """Read back (header, tensors) written by save_tensors."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise ContainerError(f"{path}: not a checkpoint container")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ContainerError(f"{path}: truncated container")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals[0] if len(vals) == 1 else vals

    header_len = take("<I")
    if pos + header_len > len(raw):
        raise ContainerError(f"{path}: truncated header")
    header = json.loads(raw[pos:pos + header_len].decode("utf-8"))
    pos += header_len

    tensors: dict[str, np.ndarray] = {}
    for _ in range(take("<I")):
        name_len = take("<H")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        ndim = take("<B")
        shape = tuple(take("<Q") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if pos + nbytes > len(raw):
            raise ContainerError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        pos += nbytes
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return header, tensors
