"""Single-file binary checkpoint.

Layout (all integers little-endian u32 unless noted)::

    b"BRIDGECOND1"
    len, JSON header (model config, vocabulary, stage, step, extra metadata)
    count, then per parameter: name_len, name, rank, dims..., float64 data
    optimizer: u64 step, count, then per entry: name_len, name, rank, dims..., m data, v data
    len, JSON RNG state (numpy bit-generator state)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BRIDGECOND1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    params: dict[str, np.ndarray]
    opt_step: int = 0
    opt_moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    rng_state: dict | None = None

    @property
    def stage(self) -> int:
        return int(self.header.get("stage", 0))


def _u32(buf, v: int) -> None:
    buf.write(struct.pack("<I", v))


def _write_blob(buf, obj) -> None:
    data = json.dumps(obj, sort_keys=True).encode("utf-8")
    _u32(buf, len(data))
    buf.write(data)


def _write_name_shape(buf, name: str, shape: tuple) -> None:
    raw = name.encode("utf-8")
    _u32(buf, len(raw))
    buf.write(raw)
    _u32(buf, len(shape))
    for d in shape:
        _u32(buf, d)


def _f64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_blob(buf, ckpt.header)
    _u32(buf, len(ckpt.params))
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name])
        _write_name_shape(buf, name, arr.shape)
        buf.write(_f64(arr))
    buf.write(struct.pack("<Q", ckpt.opt_step))
    _u32(buf, len(ckpt.opt_moments))
    for name in sorted(ckpt.opt_moments):
        m, v = ckpt.opt_moments[name]
        _write_name_shape(buf, name, m.shape)
        buf.write(_f64(m) + _f64(v))
    _write_blob(buf, ckpt.rng_state)
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self):
        return json.loads(self.take(self.u32()).decode("utf-8"))

    def name_shape(self) -> tuple[str, tuple]:
        name = self.take(self.u32()).decode("utf-8")
        return name, tuple(self.u32() for _ in range(self.u32()))

    def array(self, shape: tuple) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def loads(raw: bytes, path="<bytes>") -> Checkpoint:
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(raw, path)
    r.take(len(MAGIC))
    header = r.blob()
    params = {}
    for _ in range(r.u32()):
        name, shape = r.name_shape()
        params[name] = r.array(shape)
    opt_step = struct.unpack("<Q", r.take(8))[0]
    moments = {}
    for _ in range(r.u32()):
        name, shape = r.name_shape()
        moments[name] = (r.array(shape), r.array(shape))
    rng_state = r.blob()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    return Checkpoint(header, params, opt_step, moments, rng_state)


def save(path, ckpt: Checkpoint) -> None:
    try:
        Path(path).write_bytes(dumps(ckpt))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def load(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads(raw, path)
