"""Flat little-endian float64 array containers.

Layout::

    magic      8 bytes  (e.g. b"IDSENC01")
    count      u32      number of arrays
    per array  u32 ndim, then ndim x u32 dims
    payload    all arrays, C order, little-endian float64, back to back
"""
import struct

import numpy as np

ENCODER_MAGIC = b"IDSENC01"
PREDICTOR_MAGIC = b"IDSPRD01"


def pack_arrays(magic: bytes, arrays) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    header = [magic, struct.pack("<I", len(arrays))]
    payload = []
    for arr in arrays:
        arr = np.asarray(arr, dtype="<f8")
        header.append(struct.pack("<I", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(header + payload)


def unpack_arrays(magic: bytes, data: bytes) -> list:
    if data[:8] != magic:
        raise ValueError(f"bad magic {data[:8]!r}, expected {magic!r}")
    off = 8
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", data, off))
        off += 4 * ndim
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        arrays.append(arr.astype(float))
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes after payload")
    return arrays
