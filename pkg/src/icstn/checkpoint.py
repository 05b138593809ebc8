"""Flat binary container for named float64 tensors.

Layout (all integers unsigned 64-bit little-endian)::

    b"ICSTNTEN"  version  count
    repeated count times:
        name_len  name(utf-8)  rank  extent_0 .. extent_{rank-1}  payload(float64 LE)

Round trips are bit-exact for float64 inputs.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .exceptions import DataFormatError

MAGIC = b"ICSTNTEN"
VERSION = 1
_U64 = struct.Struct("<Q")


def _write_u64(fh, value):
    fh.write(_U64.pack(int(value)))


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise DataFormatError(f"truncated checkpoint while reading {what}")
    return data


def _read_u64(fh, what):
    return _U64.unpack(_read_exact(fh, 8, what))[0]


def write_tensors(fh, tensors: dict):
    fh.write(MAGIC)
    _write_u64(fh, VERSION)
    _write_u64(fh, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        # ascontiguousarray would promote rank 0 to rank 1
        arr = np.asarray(arr, dtype="<f8").copy(order="C")
        _write_u64(fh, len(raw))
        fh.write(raw)
        _write_u64(fh, arr.ndim)
        for extent in arr.shape:
            _write_u64(fh, extent)
        fh.write(arr.tobytes())


def read_tensors(fh) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}")
    version = _read_u64(fh, "version")
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    count = _read_u64(fh, "tensor count")
    out = {}
    for i in range(count):
        name_len = _read_u64(fh, f"name length of tensor {i}")
        name = _read_exact(fh, name_len, f"name of tensor {i}").decode("utf-8")
        rank = _read_u64(fh, f"rank of {name!r}")
        shape = tuple(_read_u64(fh, f"extent of {name!r}") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = _read_exact(fh, 8 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_tensors(path, tensors: dict):
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        return read_tensors(fh)


def dumps(tensors: dict) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()


def loads(data: bytes) -> dict:
    return read_tensors(io.BytesIO(data))
