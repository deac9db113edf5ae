"""Binary checkpoint container.

Layout, little-endian throughout, no alignment padding:

    magic "BCCT" | format version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | dtype tag u8 (0=f32, 1=f64)
                | ndim u8 | dims u32 each | raw row-major data
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BCCT"
FORMAT_VERSION = 1

_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors):
    """Write a name -> ndarray mapping in insertion order."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays never hit this (always contiguous)
        if arr.dtype not in _DTYPE_TO_TAG:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(enc)))
        chunks.append(enc)
        chunks.append(struct.pack("<BB", _DTYPE_TO_TAG[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> ndarray dict."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    off = 4

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {off}")
        piece = buf[off:off + n]
        off += n
        return piece

    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if tag not in _TAG_TO_DTYPE:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for tensor '{name}'")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of '{name}'"))
        dtype = _TAG_TO_DTYPE[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        raw = take(nbytes, f"data of '{name}'")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        out[name] = arr
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    return out
