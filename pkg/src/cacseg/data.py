"""Synthetic contextual scenes and their binary file format.

Each image draws a scene type. Every pixel's raw feature is its class
embedding plus the scene's context vector plus Gaussian noise, so the same
class lands in a different place in feature space depending on the scene.
The context vector is shared by all pixels of an image and never exposed to
the model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .labels import IGNORE

MAGIC = b"CACDATA1"
VERSION = 1
FILE_IGNORE = 65535
_HEADER = struct.Struct("<8sIIIIII")


class SpecError(ValueError):
    """Raised for scene specifications that cannot generate data."""


class FormatError(ValueError):
    """Raised when a dataset file is malformed."""


@dataclass(frozen=True)
class SceneSpec:
    n_classes: int = 8
    n_scene_types: int = 4
    d_in: int = 16
    h: int = 16
    w: int = 16
    context_shift_scale: float = 2.0
    noise_scale: float = 0.5
    class_embedding_separation: float = 2.0
    latent_dim: int = 4
    classes_per_scene: int = 5
    max_regions: int = 5
    ignore_border: int = 1
    seed: int = 0
    sample_seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_scene_types < 2:
            raise SpecError(f"need at least 2 scene types, got {self.n_scene_types}")
        if self.context_shift_scale < 0 or self.noise_scale < 0 or self.class_embedding_separation < 0:
            raise SpecError("scales must be non-negative")
        if not 2 <= self.classes_per_scene <= self.n_classes:
            raise SpecError(f"classes_per_scene must lie in [2, {self.n_classes}], got {self.classes_per_scene}")
        if not 1 <= self.latent_dim <= self.d_in:
            raise SpecError(f"latent_dim must lie in [1, d_in={self.d_in}], got {self.latent_dim}")
        if self.max_regions < 2:
            raise SpecError(f"max_regions must be >= 2, got {self.max_regions}")
        inner_h = self.h - 2 * self.ignore_border
        inner_w = self.w - 2 * self.ignore_border
        if self.ignore_border < 0 or inner_h < 2 or inner_w < 2:
            raise SpecError(f"a {self.h}x{self.w} grid with border {self.ignore_border} leaves no room for two classes")
        if self.n_classes >= FILE_IGNORE or self.n_scene_types > FILE_IGNORE:
            raise SpecError("class and scene counts must fit in u16")

    @property
    def hw(self) -> int:
        return self.h * self.w

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Sample:
    x: np.ndarray  # float32 [hw, d_in]
    y: np.ndarray  # int64 [hw], IGNORE allowed
    scene_id: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True)
class SceneWorld:
    """Fixed geometry shared by every split generated from one ``seed``."""

    class_embeddings: np.ndarray  # [n, d_in]
    scene_vectors: np.ndarray  # [T, d_in]
    scene_classes: tuple[tuple[int, ...], ...]


def build_world(spec: SceneSpec) -> SceneWorld:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    basis, _ = np.linalg.qr(rng.standard_normal((spec.d_in, spec.latent_dim)))

    def directions(k):
        v = rng.standard_normal((k, spec.latent_dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    emb = spec.class_embedding_separation * directions(spec.n_classes) @ basis.T
    ctx = spec.context_shift_scale * directions(spec.n_scene_types) @ basis.T
    subsets = tuple(
        tuple(sorted(rng.choice(spec.n_classes, size=spec.classes_per_scene, replace=False).tolist()))
        for _ in range(spec.n_scene_types)
    )
    return SceneWorld(emb, ctx, subsets)


def _rectangles(rng: np.random.Generator, h: int, w: int, count: int) -> list[tuple[int, int, int, int]]:
    """Guillotine partition of an ``h x w`` grid into up to ``count`` rectangles."""
    rects = [(0, h, 0, w)]
    while len(rects) < count:
        splittable = [i for i, (r0, r1, c0, c1) in enumerate(rects) if r1 - r0 >= 2 or c1 - c0 >= 2]
        if not splittable:
            break
        r0, r1, c0, c1 = rects.pop(splittable[rng.integers(len(splittable))])
        vertical = (c1 - c0 >= 2) and (r1 - r0 < 2 or rng.random() < 0.5)
        if vertical:
            cut = int(rng.integers(c0 + 1, c1))
            rects += [(r0, r1, c0, cut), (r0, r1, cut, c1)]
        else:
            cut = int(rng.integers(r0 + 1, r1))
            rects += [(r0, cut, c0, c1), (cut, r1, c0, c1)]
    return rects


def _layout(rng: np.random.Generator, spec: SceneSpec, classes: Sequence[int]) -> np.ndarray:
    grid = np.empty((spec.h, spec.w), dtype=np.int64)
    b = spec.ignore_border
    while True:
        n_regions = int(rng.integers(2, spec.max_regions + 1))
        for r0, r1, c0, c1 in _rectangles(rng, spec.h, spec.w, n_regions):
            grid[r0:r1, c0:c1] = classes[rng.integers(len(classes))]
        labels = grid.copy()
        if b:
            labels[:b, :] = IGNORE
            labels[-b:, :] = IGNORE
            labels[:, :b] = IGNORE
            labels[:, -b:] = IGNORE
        if len(np.unique(labels[labels != IGNORE])) >= 2:
            return grid.reshape(-1), labels.reshape(-1)


def generate(spec: SceneSpec, count: int) -> list[Sample]:
    """``count`` samples, a pure function of ``(spec, count)``."""
    world = build_world(spec)
    rng = np.random.default_rng([spec.seed, 1, spec.sample_seed])
    out = []
    for _ in range(count):
        scene = int(rng.integers(spec.n_scene_types))
        content, labels = _layout(rng, spec, world.scene_classes[scene])
        x = world.class_embeddings[content] + world.scene_vectors[scene]
        x = x + spec.noise_scale * rng.standard_normal(x.shape)
        out.append(Sample(x.astype(np.float32), labels, scene))
    return out


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``X [N, hw, d_in]`` (float64) and ``Y [N, hw]`` (int64)."""
    X = np.stack([s.x for s in samples]).astype(np.float64)
    Y = np.stack([s.y for s in samples]).astype(np.int64)
    return X, Y


def _record_dtype(hw: int, d_in: int) -> np.dtype:
    return np.dtype([("x", "<f4", (hw * d_in,)), ("y", "<u2", (hw,)), ("scene", "<u2"), ("pad", "<u2")])


def dataset_size(count: int, hw: int, d_in: int) -> int:
    return _HEADER.size + count * _record_dtype(hw, d_in).itemsize


def write_dataset(path, samples: Sequence[Sample], h: int, w: int, n_classes: int) -> None:
    if not samples:
        raise ValueError("cannot write an empty dataset")
    hw = h * w
    d_in = samples[0].x.shape[-1]
    rec = np.zeros(len(samples), dtype=_record_dtype(hw, d_in))
    for i, s in enumerate(samples):
        if s.x.shape != (hw, d_in) or s.y.shape != (hw,):
            raise ValueError(f"sample {i} has shapes {s.x.shape}, {s.y.shape}; expected ({hw}, {d_in}), ({hw},)")
        rec[i]["x"] = s.x.reshape(-1)
        rec[i]["y"] = np.where(s.y == IGNORE, FILE_IGNORE, s.y)
        rec[i]["scene"] = s.scene_id
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(samples), h, w, d_in, n_classes))
        fh.write(rec.tobytes())


@dataclass
class Dataset:
    samples: list[Sample]
    h: int
    w: int
    n_classes: int

    @property
    def d_in(self) -> int:
        return self.samples[0].x.shape[-1]

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return stack(self.samples)


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {_HEADER.size} bytes)")
    magic, version, count, h, w, d_in, n_classes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 8")
    dt = _record_dtype(h * w, d_in)
    expected = _HEADER.size + count * dt.itemsize
    if len(raw) != expected:
        at = min(len(raw), expected)
        raise FormatError(f"{path}: size {len(raw)} != expected {expected}; payload ends early or overruns at offset {at}")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=_HEADER.size)
    samples = []
    for i, r in enumerate(rec):
        y = r["y"].astype(np.int64)
        bad = (y != FILE_IGNORE) & (y >= n_classes)
        if bad.any():
            offset = _HEADER.size + i * dt.itemsize + dt.fields["y"][1] + 2 * int(np.argmax(bad))
            raise FormatError(f"{path}: label {int(y[bad][0])} >= n_classes={n_classes} at offset {offset}")
        y[y == FILE_IGNORE] = IGNORE
        samples.append(Sample(r["x"].reshape(h * w, d_in).copy(), y, int(r["scene"])))
    return Dataset(samples, h, w, n_classes)
