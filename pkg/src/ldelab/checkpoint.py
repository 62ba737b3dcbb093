"""SCKP checkpoints: a named float32 tensor table plus the resolved config text.

Layout, little-endian: ``b"SCKP"``, u32 version (1), u32 tensor count; per
tensor a u16 name length, the UTF-8 name, u8 rank, rank x u32 dims and the
row-major f32 payload; then u32 config length and the UTF-8 config text.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ldelab.errors import FormatError
from ldelab.synthdata.io import atomic_write

SCKP_MAGIC = b"SCKP"
SCKP_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config_text: str = ""


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [SCKP_MAGIC, struct.pack("<II", SCKP_VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} has non-finite values")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r}: name or rank too large for SCKP")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    cfg = ckpt.config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=len(self.buf))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != SCKP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SCKP_MAGIC!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != SCKP_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        start = r.pos
        (n,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(n, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not UTF-8", offset=start + 2) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", offset=start)
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (clen,) = r.unpack("<I", "config length")
    start = r.pos
    try:
        text = r.take(clen, "config text").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config text is not UTF-8", offset=start) from None
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after config", offset=r.pos)
    return Checkpoint(tensors, text)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
