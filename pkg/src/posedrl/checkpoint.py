"""LSC1 checkpoint container.

Layout (all integers little-endian)::

    b"LSC1" | u32 format version | u32 n | config text (n bytes, UTF-8 JSON)
    u32 count | parameter blocks
    u32 count | optimizer blocks
    u32 count | blobs

A block is ``u16 name length | name | u8 ndim | u32 dims... | float64 payload``;
a blob is ``u16 name length | name | u32 n | n bytes``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LSC1"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    config: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    blobs: dict[str, bytes] = field(default_factory=dict)


def _write_blocks(fh, blocks: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        enc = name.encode("utf-8")
        fh.write(struct.pack("<H", len(enc)) + enc)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def dumps(ck: CheckpointData) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    text = json.dumps(ck.config, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<II", FORMAT_VERSION, len(text)))
    fh.write(text)
    _write_blocks(fh, ck.params)
    _write_blocks(fh, ck.optimizer)
    fh.write(struct.pack("<I", len(ck.blobs)))
    for name, data in ck.blobs.items():
        enc = name.encode("utf-8")
        fh.write(struct.pack("<H", len(enc)) + enc)
        fh.write(struct.pack("<I", len(data)))
        fh.write(data)
    return fh.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("checkpoint truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def blocks(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            name = self.name()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).copy()
        return out


def loads(raw: bytes) -> CheckpointData:
    if raw[:4] != MAGIC:
        raise FormatError("not an LSC1 checkpoint")
    r = _Reader(raw)
    r.take(4)
    version, n = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(r.take(n).decode("utf-8"))
        params = r.blocks()
        optimizer = r.blocks()
        (count,) = r.unpack("<I")
        blobs = {}
        for _ in range(count):
            name = r.name()
            (m,) = r.unpack("<I")
            blobs[name] = r.take(m)
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if r.pos != len(raw):
        raise FormatError("trailing bytes after checkpoint")
    return CheckpointData(config, params, optimizer, blobs)


def save(ck: CheckpointData, path) -> None:
    Path(path).write_bytes(dumps(ck))


def load(path) -> CheckpointData:
    return loads(Path(path).read_bytes())
