"""Versioned binary container shared by checkpoints and databases.

Layout::

    magic      8 bytes
    version    uint32, little endian
    hdr_len    uint32, little endian
    header     hdr_len bytes of UTF-8 text, one record per line:
                 meta <key> <value...>
                 tensor <name> <dim0> <dim1> ...
    payload    each tensor as little-endian float64, in header order

Writing the same tensors twice yields identical bytes.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from sbevloc.errors import CheckpointError


def encode(magic: bytes, version: int, meta: dict[str, str], tensors: list[tuple[str, np.ndarray]]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    lines = []
    for k, v in meta.items():
        if any(ch.isspace() for ch in k) or "\n" in str(v):
            raise ValueError(f"bad meta entry {k!r}")
        lines.append(f"meta {k} {v}")
    payload = []
    for name, arr in tensors:
        if any(ch.isspace() for ch in name):
            raise ValueError(f"bad tensor name {name!r}")
        arr = np.asarray(arr, dtype="<f8")
        lines.append(" ".join(["tensor", name, *map(str, arr.shape)]) if arr.ndim else f"tensor {name}")
        payload.append(np.ascontiguousarray(arr).tobytes())
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return magic + struct.pack("<II", version, len(header)) + header + b"".join(payload)


def decode(raw: bytes, magic: bytes) -> tuple[int, dict[str, str], dict[str, np.ndarray]]:
    if raw[:8] != magic:
        raise CheckpointError(f"bad magic {raw[:8]!r}, expected {magic!r}")
    try:
        version, hdr_len = struct.unpack("<II", raw[8:16])
        header = raw[16:16 + hdr_len].decode("utf-8")
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    offset = 16 + hdr_len
    for line in header.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "tensor":
            shape = tuple(int(d) for d in parts[2:])
            count = int(np.prod(shape)) if shape else 1
            nbytes = 8 * count
            if offset + nbytes > len(raw):
                raise CheckpointError(f"truncated payload for {parts[1]}")
            arr = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8").reshape(shape)
            tensors[parts[1]] = arr.astype(np.float64)
            offset += nbytes
        else:
            raise CheckpointError(f"unknown header record {parts[0]!r}")
    if offset != len(raw):
        raise CheckpointError("trailing bytes after payload")
    return version, meta, tensors


def write(path: str | os.PathLike, magic: bytes, version: int, meta, tensors) -> None:
    Path(path).write_bytes(encode(magic, version, meta, tensors))


def read(path: str | os.PathLike, magic: bytes):
    return decode(Path(path).read_bytes(), magic)
