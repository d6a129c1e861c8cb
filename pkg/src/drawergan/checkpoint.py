"""Binary checkpoint container.

Layout (little-endian)::

    b"UMITCKPT"  u32 version  u64 iteration  u32 tensor_count
    per tensor: u16 name_len, UTF-8 name, u8 rank, u32 dims[rank], f32 values
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"UMITCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQI")


class CheckpointFormatError(ValueError):
    pass


def encoded_size(tensors):
    """Exact byte size of a container holding ``tensors``."""
    total = _HEADER.size
    for name, arr in tensors.items():
        total += 2 + len(name.encode("utf-8")) + 1 + 4 * np.ndim(arr) + 4 * int(np.size(arr))
    return total


def save_tensors(path, tensors, iteration=0):
    parts = [_HEADER.pack(MAGIC, VERSION, int(iteration), len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointFormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor {name!r} has rank {arr.ndim}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def _read_tensors(buf):
    if len(buf) < _HEADER.size:
        raise CheckpointFormatError("truncated header")
    magic, version, iteration, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    pos = _HEADER.size
    out = {}
    for idx in range(count):
        where = f"tensor {idx}"
        if pos + 2 > len(buf):
            raise CheckpointFormatError(f"truncated at name length of {where}")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen + 1 > len(buf):
            raise CheckpointFormatError(f"truncated at name of {where}")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"invalid UTF-8 name for {where}") from exc
        pos += nlen
        rank = buf[pos]
        pos += 1
        if pos + 4 * rank > len(buf):
            raise CheckpointFormatError(f"truncated at dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(buf):
            raise CheckpointFormatError(f"truncated in values of {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(np.float32)
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes after last tensor")
    return iteration, out


def load_tensors(path):
    with open(path, "rb") as fh:
        return _read_tensors(fh.read())[1]


def load_container(path):
    """Return (iteration, {name: float32 array})."""
    with open(path, "rb") as fh:
        return _read_tensors(fh.read())
