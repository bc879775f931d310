"""VDCKPT checkpoint files: a metadata block and named float64 tensors.

Layout (all integers little-endian)::

    magic "VDCKPT" | u16 version | u32 meta_len | meta JSON
    u32 n_tensors | n x (u16 name_len | name | u8 rank | rank x u64 dims | f64 payload)
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, VersionError

MAGIC = b"VDCKPT"
VERSION = 1
_HEAD = struct.Struct("<6sH")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def checkpoint_to_bytes(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [_HEAD.pack(MAGIC, VERSION), _U32.pack(len(meta)), meta, _U32.pack(len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")  # tobytes() below is C order
        raw = name.encode()
        parts += [_U16.pack(len(raw)), raw, bytes([arr.ndim])]
        parts += [_U64.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint ends early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, s: struct.Struct):
        return s.unpack(self.take(s.size))[0]


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _HEAD.size + _U32.size:
        raise ChecksumError("checkpoint is truncated")
    magic, version = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("not a VDCKPT checkpoint")
    body, (crc,) = blob[:-_U32.size], _U32.unpack(blob[-_U32.size:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC mismatch")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    rd = _Reader(body)
    rd.take(_HEAD.size)
    try:
        metadata = json.loads(rd.take(rd.unpack(_U32)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from None
    tensors = {}
    for _ in range(rd.unpack(_U32)):
        name = rd.take(rd.unpack(_U16)).decode()
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        rank = rd.take(1)[0]
        shape = tuple(rd.unpack(_U64) for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(rd.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if rd.pos != len(body):
        raise FormatError("trailing bytes after the tensor table")
    return Checkpoint(tensors, metadata)


def save_checkpoint(tensors: dict[str, np.ndarray], metadata: dict | None, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_to_bytes(tensors, metadata))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def prefixed(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in tensors.items()}


def unprefixed(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    lead = prefix + "."
    return {k[len(lead):]: v for k, v in tensors.items() if k.startswith(lead)}
