"""Binary tensor container format.

A single tensor is stored as a 4-byte little-endian header length,
a UTF-8 JSON header ``{"shape": [...], "dtype": "float32"|"float64"}``,
then the raw little-endian float payload in row-major order.

Multi-tensor files (checkpoints, sample containers) start with a 4-byte
magic, a u32 format version, a JSON manifest block (same length-prefixed
encoding), then the tensor payloads in manifest order.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np
import torch

MAGIC = b"UNTS"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


class FormatError(ValueError):
    """Raised on malformed container files."""


def _write_block(fh: BinaryIO, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_block(fh: BinaryIO) -> bytes:
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated file: missing block length")
    (n,) = struct.unpack("<I", raw)
    payload = fh.read(n)
    if len(payload) != n:
        raise FormatError(f"truncated block: expected {n} bytes, got {len(payload)}")
    return payload


def write_tensor(fh: BinaryIO, t: torch.Tensor) -> None:
    arr = t.detach().cpu().numpy()
    if arr.dtype == np.float32:
        dtype = "float32"
    elif arr.dtype == np.float64:
        dtype = "float64"
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = json.dumps({"shape": list(arr.shape), "dtype": dtype}).encode("utf-8")
    _write_block(fh, header)
    data = np.ascontiguousarray(arr)
    if data.dtype.byteorder == ">":
        data = data.byteswap().view(data.dtype.newbyteorder("<"))
    fh.write(data.tobytes())


def read_tensor(fh: BinaryIO) -> torch.Tensor:
    header = json.loads(_read_block(fh).decode("utf-8"))
    shape = tuple(header["shape"])
    np_dtype = _DTYPES.get(header["dtype"])
    if np_dtype is None:
        raise FormatError(f"unknown dtype {header['dtype']!r}")
    nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.dtype(np_dtype).newbyteorder("<")).reshape(shape)
    return torch.from_numpy(arr.astype(np_dtype, copy=True))


def save_container(path, manifest: dict, tensors: dict[str, torch.Tensor]) -> None:
    manifest = dict(manifest)
    manifest["tensors"] = list(tensors.keys())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_block(fh, json.dumps(manifest).encode("utf-8"))
        for t in tensors.values():
            write_tensor(fh, t)


def load_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError("truncated file: missing version")
        (version,) = struct.unpack("<I", raw)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        manifest = json.loads(_read_block(fh).decode("utf-8"))
        tensors = {name: read_tensor(fh) for name in manifest.get("tensors", [])}
    return manifest, tensors
