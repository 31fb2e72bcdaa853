"""Raw tensor container shared by checkpoints, datasets and adversarial batches.

Layout (all integers little-endian)::

    magic      8 bytes  b"CAPSTNSR"
    version    u32
    tag        u32 length + UTF-8 bytes (architecture tag or payload kind)
    classes    u32
    input      u32 rank + rank * u64 extents
    meta       u32 length + UTF-8 JSON (may be "{}")
    count      u32 number of arrays
    arrays     count * (u32 name length + UTF-8 name, u32 rank,
                        rank * u64 extents, float32 data)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CAPSTNSR"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


@dataclass
class Container:
    tag: str
    n_classes: int
    input_shape: tuple[int, ...]
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_shape(shape) -> bytes:
    return struct.pack("<I", len(shape)) + b"".join(struct.pack("<Q", int(d)) for d in shape)


def encode(c: Container) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _pack_str(c.tag),
        struct.pack("<I", c.n_classes),
        _pack_shape(c.input_shape),
        _pack_str(json.dumps(c.meta, sort_keys=True)),
        struct.pack("<I", len(c.arrays)),
    ]
    for name, arr in c.arrays.items():
        arr = np.asarray(arr)
        parts += [_pack_str(name), _pack_shape(arr.shape), arr.astype("<f4").tobytes(order="C")]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError("truncated container")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def shape(self) -> tuple[int, ...]:
        rank = self.u32()
        return tuple(struct.unpack("<Q", self.take(8))[0] for _ in range(rank))


def decode(buf: bytes) -> Container:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise ContainerError("bad magic: not a tensor container")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    tag = r.string()
    n_classes = r.u32()
    input_shape = r.shape()
    meta = json.loads(r.string())
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        shape = r.shape()
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise ContainerError("trailing bytes after last array")
    return Container(tag, n_classes, input_shape, arrays, meta)


def atomic_write(path: str | os.PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def save(path, container: Container) -> Path:
    return atomic_write(path, encode(container))


def load(path) -> Container:
    return decode(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
