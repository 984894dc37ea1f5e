"""Flat binary tensor format.

Layout (all little-endian)::

    b"Q2LT" | version u32 | rank u32 | extents u32[rank] | scalars

The scalar width (4 or 8 bytes) is implied by the payload length, so a
blob must be read with its exact byte length known.
"""
from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"Q2LT"
VERSION = 1
_WIDTH_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    """Raised for malformed serialized tensors or checkpoints."""


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in (np.float32, np.float64):
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    shape = arr.shape
    header = MAGIC + struct.pack(f"<II{len(shape)}I", VERSION, len(shape), *shape)
    return header + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    hdr = 12 + 4 * rank
    if len(buf) < hdr:
        raise FormatError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(shape)) if rank else 1
    payload = len(buf) - hdr
    if count == 0 or payload % count or payload // count not in _WIDTH_TO_DTYPE:
        raise FormatError(f"payload of {payload} bytes does not fit shape {shape}")
    dtype = _WIDTH_TO_DTYPE[payload // count]
    arr = np.frombuffer(buf, dtype=dtype, offset=hdr).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
