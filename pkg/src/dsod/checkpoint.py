"""Binary checkpoint container: magic, version, JSON metadata, named float64 arrays.

Layout (little-endian)::

    b"DSOD" | u32 version | u32 meta_len | meta JSON (sorted keys)
    u32 count | count x (u16 name_len | name | u8 ndim | ndim x u32 dim | float64 data)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import FOUNDATION_PREFIX
from .tensor import ParamStore

MAGIC = b"DSOD"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def encode(params: ParamStore, meta: dict | None = None) -> bytes:
    meta = dict(meta or {})
    meta["frozen"] = sorted(params.frozen)
    meta["locked"] = sorted(params.locked)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode()
        arr = np.asarray(t.data, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[ParamStore, dict]:
    if buf[:4] != MAGIC:
        raise CorruptHeaderError("not a checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(meta_len))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"unreadable metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    frozen, locked = set(meta.pop("frozen", [])), set(meta.pop("locked", []))
    params = ParamStore()
    for _ in range(count):
        name_len, ndim = r.unpack("<HB")
        name = r.take(name_len).decode()
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        params.add(name, data, frozen=name in frozen, locked=name in locked or name.startswith(FOUNDATION_PREFIX))
    if r.pos != len(buf):
        raise CorruptHeaderError(f"{len(buf) - r.pos} trailing bytes after the last array")
    return params, meta


def save_checkpoint(path: str | Path, params: ParamStore, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(params, meta))
    return path


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    return decode(Path(path).read_bytes())
