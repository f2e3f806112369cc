"""Named-tensor table serialization shared by sample blobs and checkpoints.

Layout (all little-endian): int32 entry count, then per entry a name
(int32 length + utf-8 bytes), an int32 dtype code, an int32 rank, the
int32 extents, and the raw array bytes.  Parse errors always report the
byte offset.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

_DTYPES = {0: "<f8", 1: "<i4", 2: "u1"}


def _dtype_code(name, arr):
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind == "i":
        return 1
    if arr.dtype == np.uint8:
        return 2
    raise DataError(f"tensor {name!r} has unsupported dtype {arr.dtype}")


def write_tensor_table(fh, tensors: dict):
    fh.write(struct.pack("<i", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(name, arr)
        raw = name.encode("utf-8")
        fh.write(struct.pack("<i", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<ii", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor_table(buf: bytes, offset: int = 0) -> tuple[dict, int]:
    def need(n, what):
        if offset + n > len(buf):
            raise DataError(f"truncated tensor table: needed {n} bytes for {what} "
                            f"at offset {offset}, file has {len(buf)}")

    need(4, "entry count")
    (count,) = struct.unpack_from("<i", buf, offset)
    offset += 4
    if count < 0:
        raise DataError(f"negative tensor count at offset {offset - 4}")
    out = {}
    for _ in range(count):
        need(4, "name length")
        (nlen,) = struct.unpack_from("<i", buf, offset)
        offset += 4
        need(nlen, "name")
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        need(8, "dtype/rank")
        code, ndim = struct.unpack_from("<ii", buf, offset)
        offset += 8
        if code not in _DTYPES:
            raise DataError(f"unknown dtype code {code} for {name!r} at offset {offset - 8}")
        need(4 * ndim, "extents")
        shape = struct.unpack_from(f"<{ndim}i", buf, offset)
        offset += 4 * ndim
        dt = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        need(nbytes, f"data of {name!r}")
        arr = np.frombuffer(buf[offset : offset + nbytes], dtype=dt).reshape(shape).copy()
        offset += nbytes
        out[name] = arr
    return out, offset
