"""SFEA feature files and trial lists.

SFEA layout (all little-endian): ``b"SFEA"``, u32 version (1), u32 T, u32 F,
then T*F float32 values row-major.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ldelab.errors import FormatError
from ldelab.synthdata.corpus import FeatureSequence

SFEA_MAGIC = b"SFEA"
SFEA_VERSION = 1
_HEADER = struct.Struct("<4sIII")

TARGET = "target"
NONTARGET = "nontarget"


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_features(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError(f"features must be a T x F matrix, got shape {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("features contain non-finite values")
    t, f = frames.shape
    return _HEADER.pack(SFEA_MAGIC, SFEA_VERSION, t, f) + frames.astype("<f4").tobytes(order="C")


def decode_features(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated SFEA header", offset=len(buf))
    magic, version, t, f = _HEADER.unpack_from(buf, 0)
    if magic != SFEA_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SFEA_MAGIC!r}", offset=0)
    if version != SFEA_VERSION:
        raise FormatError(f"unsupported SFEA version {version}", offset=4)
    need = _HEADER.size + 4 * t * f
    if len(buf) < need:
        raise FormatError(f"truncated payload: {len(buf)} bytes, need {need}", offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", offset=need)
    if t < 1 or f < 1:
        raise FormatError(f"empty feature matrix {t}x{f}", offset=8)
    return np.frombuffer(buf, dtype="<f4", count=t * f, offset=_HEADER.size).reshape(t, f).astype(np.float32)


def write_features(path, seq: FeatureSequence) -> None:
    atomic_write(path, encode_features(seq.frames))


def read_features(path, utterance_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    frames = decode_features(path.read_bytes())
    return FeatureSequence(utterance_id or path.stem, frames)


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str

    @property
    def is_target(self) -> bool:
        return self.label == TARGET


def format_trials(trials) -> str:
    return "".join(f"{t.enroll_id} {t.test_id} {t.label}\n" for t in trials)


def parse_trials(text: str) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 3 or parts[2] not in (TARGET, NONTARGET) or not parts[0] or not parts[1]:
            raise FormatError(f"trial line {lineno} is malformed: {line!r}")
        trials.append(Trial(*parts))
    return trials


def write_trials(path, trials) -> None:
    atomic_write(path, format_trials(trials))


def read_trials(path) -> list[Trial]:
    return parse_trials(Path(path).read_text(encoding="utf-8"))
