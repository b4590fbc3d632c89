"""Binary checkpoint format with a bit-exact round trip.

Layout (little-endian): magic ``OCTK``, uint32 version, uint32 tensor
count, then per tensor (names sorted lexicographically): uint32 name
length + UTF-8 name, uint32 rank, int64 extents, float32 payload.
Optimizer moments and the step counter are stored in the same table under
``adam_m/``, ``adam_v/`` and ``adam_step`` names.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .errors import FormatError

MAGIC = b"OCTK"
VERSION = 1


def save_checkpoint(path, arrays: dict):
    """Write named arrays (or Tensors) as float32, names sorted."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name in sorted(arrays.keys()):
            value = arrays[name]
            data = np.ascontiguousarray(
                value.data if isinstance(value, T.Tensor) else np.asarray(value),
                dtype="<f4",
            )
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<q", extent))
            fh.write(data.tobytes())
    return path


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 12:
        raise FormatError("header truncated", offset=len(blob))
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    offset = 12
    arrays = {}
    for _ in range(count):
        if offset + 4 > len(blob):
            raise FormatError("tensor header truncated", offset=offset)
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + name_len > len(blob):
            raise FormatError("tensor name truncated", offset=offset)
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if offset + 4 > len(blob):
            raise FormatError(f"rank of {name!r} truncated", offset=offset)
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + 8 * rank > len(blob):
            raise FormatError(f"extents of {name!r} truncated", offset=offset)
        shape = struct.unpack_from(f"<{rank}q", blob, offset) if rank else ()
        offset += 8 * rank
        n_elements = int(np.prod(shape)) if rank else 1
        nbytes = 4 * n_elements
        if offset + nbytes > len(blob):
            raise FormatError(f"payload of {name!r} truncated", offset=offset)
        data = np.frombuffer(blob, dtype="<f4", count=n_elements, offset=offset)
        offset += nbytes
        arrays[name] = data.reshape(shape).copy()
    if offset != len(blob):
        raise FormatError("trailing bytes after final tensor", offset=offset)
    return arrays


def params_to_arrays(params: dict) -> dict:
    return {name: tensor.data for name, tensor in params.items()}


def load_params_into(arrays: dict, params: dict, dtype=np.float32):
    """Copy checkpoint arrays into an existing parameter dict, verifying
    that every tensor exists with the right shape."""
    for name, tensor in params.items():
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        stored = arrays[name]
        if tuple(stored.shape) != tuple(tensor.data.shape):
            raise FormatError(
                f"tensor {name!r} has shape {tuple(stored.shape)}, "
                f"expected {tuple(tensor.data.shape)}"
            )
        tensor.data = stored.astype(dtype)
    return params


def arrays_to_params(arrays: dict, dtype=np.float32) -> dict:
    return {
        name: T.Tensor(data.astype(dtype), requires_grad=True)
        for name, data in arrays.items()
    }
