"""Binary tensor container for feature and weight files.

Layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON header
(array of {name, shape, dtype, offset}), then the raw tensor payload.
Tensors are float32 little-endian; offsets are relative to the payload
start (bytes).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"TNSRBIN1"


def write_tensors(path, tensors: dict) -> None:
    """Write named float32 tensors; insertion order is preserved."""
    arrays = {}
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64), dtype="<f4")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"tensor '{name}' contains non-finite values")
        arrays[name] = a
    header = []
    offset = 0
    for name, a in arrays.items():
        header.append(
            {"name": name, "shape": list(a.shape), "dtype": "f32", "offset": offset}
        )
        offset += a.nbytes
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(a.tobytes())


def read_tensors(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ParseError("tensor file not found", path=path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != MAGIC:
        raise ParseError("bad tensor-file magic", path=path, offset=0)
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + hlen > len(data):
        raise ParseError("truncated tensor header", path=path, offset=16)
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed tensor header: {exc}", path=path, offset=16)
    if not isinstance(header, list):
        raise ParseError("tensor header must be a JSON array", path=path, offset=16)
    payload = 16 + hlen
    out = {}
    for entry in header:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            dtype = entry["dtype"]
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"malformed header entry {entry!r}", path=path)
        if dtype != "f32":
            raise ParseError(f"tensor '{name}' has unsupported dtype '{dtype}'",
                             path=path)
        count = int(np.prod(shape)) if shape else 1
        start = payload + offset
        if start + 4 * count > len(data):
            raise ParseError(f"tensor '{name}' payload truncated", path=path,
                             offset=start)
        out[name] = (
            np.frombuffer(data, dtype="<f4", count=count, offset=start)
            .reshape(shape).astype(np.float32)
        )
    return out
