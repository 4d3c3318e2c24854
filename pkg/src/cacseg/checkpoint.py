"""Binary checkpoint files.

Layout (little-endian)::

    magic    8 bytes  b"CACCKPT1"
    version  u32
    text     u32 length + UTF-8 canonical key = value text (run config,
             epoch, n_classes, d_in, rng_state)
    count    u32 number of parameter records
    records  u32 name length, name, u32 rank, u32 dims..., f64 payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import config as cfgtext
from .train import Checkpoint, RunConfig

MAGIC = b"CACCKPT1"
VERSION = 1
_META_KEYS = ("epoch", "n_classes", "d_in", "rng_state")


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is malformed."""


def _text(ckpt: Checkpoint) -> str:
    return ckpt.config.dumps() + cfgtext.dump(
        {"epoch": ckpt.epoch, "n_classes": ckpt.n_classes, "d_in": ckpt.d_in, "rng_state": ckpt.rng_state}
    )


def to_bytes(ckpt: Checkpoint) -> bytes:
    text = _text(ckpt).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(ckpt.params))]
    for name, value in ckpt.params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated {what} at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def from_bytes(raw: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(raw, path)
    magic = r.take(8, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r} at offset 0")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} at offset 8")
    text_at = r.pos
    text = r.take(r.u32("config length"), "config text").decode("utf-8")
    try:
        values = cfgtext.parse(text)
        meta = {k: values.pop(k) for k in _META_KEYS}
        config = RunConfig.loads(cfgtext.dump(values))
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: bad config text at offset {text_at}: {exc}") from None
    params = {}
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32("rank")
        if rank > 3:
            raise CheckpointFormatError(f"{path}: rank {rank} of {name!r} exceeds 3 at offset {r.pos - 4}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count, f"payload of {name!r}"), dtype="<f8").reshape(dims).copy()
    if r.pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(config, params, int(meta["epoch"]), meta["rng_state"], int(meta["n_classes"]), int(meta["d_in"]))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), path)
