"""Binary checkpoint format.

Layout (little-endian):

    b"PNMT"  uint32 version
    uint32 header length, UTF-8 JSON header (model config, trainer state)
    uint32 tensor count, then per tensor:
        uint32 name length, UTF-8 name, uint32 rank, rank x uint64 extents,
        float64 data in C order
    uint32 CRC-32 of every preceding byte

Parameters are stored as ``param/<name>``, optimizer moments as
``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PNMT"
VERSION = 1


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint of this version."""


class CheckpointConsistencyError(ValueError):
    """The file is well formed but disagrees with the declared config."""


@dataclass
class CheckpointData:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        chunks += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(chunks)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointFormatError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> CheckpointData:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {VERSION}")
    if len(buf) < 12:
        raise CheckpointFormatError("truncated checkpoint")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    r = _Reader(body)
    r.take(8)
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header") from exc
    data = CheckpointData(header)
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        data.tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointFormatError(f"{path}: trailing bytes after tensors")
    return data
