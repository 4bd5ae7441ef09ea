"""Named-tensor container used for backbone checkpoints and learner snapshots.

Layout (all integers little-endian)::

    b"PROLCKPT"                     8-byte magic
    u32 version
    repeated per tensor:
        u32 name length, UTF-8 name
        u8 dtype code (0 = f32), u8 rank, rank x u64 dims
        row-major f32 payload
    u32 CRC32 of everything between the version field and the CRC

The tensor section has no count prefix; records are read until the trailing
CRC is reached.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"PROLCKPT"
VERSION = 1
DTYPE_F32 = 0


def encode(tensors: Mapping[str, torch.Tensor], version: int = VERSION) -> bytes:
    body = bytearray()
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().contiguous()
        if arr.dtype != torch.float32:
            raise CheckpointError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is storable")
        raw_name = name.encode("utf-8")
        body += struct.pack("<I", len(raw_name)) + raw_name
        body += struct.pack("<BB", DTYPE_F32, arr.dim())
        body += struct.pack(f"<{arr.dim()}Q", *arr.shape)
        body += arr.numpy().astype("<f4", copy=False).tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return MAGIC + struct.pack("<I", version) + bytes(body) + struct.pack("<I", crc)


def decode(blob: bytes, expected_version: int = VERSION) -> "OrderedDict[str, torch.Tensor]":
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("file truncated: shorter than header + CRC")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:len(MAGIC)]!r}; not a prol checkpoint")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != expected_version:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {expected_version})")
    body = blob[len(MAGIC) + 4 : -4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt or truncated")

    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    pos = 0
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code != DTYPE_F32:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(body):
                raise CheckpointError(f"tensor {name!r}: payload truncated")
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += nbytes
            out[name] = torch.from_numpy(arr.astype(np.float32, copy=True))
    except struct.error as exc:
        raise CheckpointError(f"malformed tensor record at byte {pos}: {exc}") from exc
    return out


def write(path, tensors: Mapping[str, torch.Tensor], version: int = VERSION) -> None:
    Path(path).write_bytes(encode(tensors, version))


def read(path, expected_version: int = VERSION) -> "OrderedDict[str, torch.Tensor]":
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob, expected_version)
