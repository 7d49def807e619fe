"""Flat binary tensor format and the checkpoint container built on it.

Tensor record layout (little-endian throughout):

    magic   4 bytes  b"EXFT"
    version u32      currently 1
    rank    u32
    dims    rank * u32
    dtype   u8       0 = float32, 1 = float64
    values  product(dims) floats, row-major

Checkpoint file layout:

    header_len u32
    header     JSON (utf-8): architecture, counters, rng state and a
               manifest mapping tensor name -> byte offset into the
               blob region
    blobs      concatenated tensor records
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"EXFT"
FORMAT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1}


class FormatError(ValueError):
    """Malformed or truncated serialized data."""


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> int:
    """Append one tensor record; returns the number of bytes written."""
    arr = np.asarray(arr, order="C")  # ascontiguousarray would flatten rank 0
    if arr.dtype == np.float32:
        tag, arr = 0, arr.astype("<f4", copy=False)
    elif arr.dtype == np.float64:
        tag, arr = 1, arr.astype("<f8", copy=False)
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32/float64")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    header += struct.pack("<B", tag)
    payload = arr.tobytes()
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_tensor(fh: BinaryIO) -> np.ndarray:
    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
        return buf

    if take(4) != MAGIC:
        raise FormatError("bad magic; not a tensor record")
    version, rank = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
    (tag,) = struct.unpack("<B", take(1))
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(take(count * dtype.itemsize), dtype=dtype)
    return data.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write a checkpoint: JSON metadata plus named tensor blobs."""
    manifest: dict[str, int] = {}
    blob_parts: list[bytes] = []
    offset = 0
    import io

    for name in sorted(tensors):
        buf = io.BytesIO()
        n = write_tensor(buf, tensors[name])
        manifest[name] = offset
        blob_parts.append(buf.getvalue())
        offset += n
    header = dict(meta)
    header["manifest"] = manifest
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for part in blob_parts:
            fh.write(part)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError(f"{path}: truncated checkpoint header")
        (header_len,) = struct.unpack("<I", raw)
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise FormatError(f"{path}: truncated checkpoint header")
        header = json.loads(header_bytes.decode("utf-8"))
        manifest = header.pop("manifest")
        blob_start = 4 + header_len
        tensors: dict[str, np.ndarray] = {}
        for name, off in manifest.items():
            fh.seek(blob_start + off)
            tensors[name] = read_tensor(fh)
    return tensors, header
