from dataclasses import replace

import numpy as np
import pytest

from cacseg.data import (
    MAGIC,
    Dataset,
    FormatError,
    SceneSpec,
    SpecError,
    build_world,
    dataset_size,
    generate,
    read_dataset,
    write_dataset,
)
from cacseg.labels import IGNORE
from cacseg.metrics import mean_iou

SMALL = SceneSpec(h=8, w=8)


def _write(path, spec, count):
    write_dataset(path, generate(spec, count), spec.h, spec.w, spec.n_classes)


def test_no_shift_no_noise_class_features_identical_across_scenes():
    spec = replace(SMALL, context_shift_scale=0.0, noise_scale=0.0, ignore_border=0)
    per_class = {}
    for s in generate(spec, 40):
        for k in np.unique(s.y):
            rows = s.x[s.y == k]
            assert np.all(rows == rows[0])
            per_class.setdefault(int(k), set()).add(rows[0].tobytes())
    assert all(len(v) == 1 for v in per_class.values())


def test_same_seed_gives_identical_files(tmp_path):
    _write(tmp_path / "a.bin", SMALL, 20)
    _write(tmp_path / "b.bin", SMALL, 20)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_different_sample_seed_shares_geometry():
    a, b = generate(SMALL, 5), generate(replace(SMALL, sample_seed=1), 5)
    assert not all(x == y for x, y in zip(a, b))
    w1, w2 = build_world(SMALL), build_world(replace(SMALL, sample_seed=1))
    assert np.array_equal(w1.class_embeddings, w2.class_embeddings)


def test_nearest_embedding_rule_on_separable_data():
    spec = replace(SceneSpec(), context_shift_scale=0.0, noise_scale=0.05, class_embedding_separation=4.0)
    world = build_world(spec)
    samples = generate(spec, 32)
    X = np.concatenate([s.x for s in samples]).astype(np.float64)
    Y = np.concatenate([s.y for s in samples])
    d2 = ((X[:, None, :] - world.class_embeddings[None]) ** 2).sum(-1)
    _, miou = mean_iou(d2.argmin(1), Y, spec.n_classes)
    assert miou >= 0.99


def test_samples_respect_invariants():
    for s in generate(SMALL, 50):
        valid = s.y[s.y != IGNORE]
        assert valid.max() < SMALL.n_classes and len(np.unique(valid)) >= 2
        grid = s.y.reshape(SMALL.h, SMALL.w)
        assert np.all(grid[0] == IGNORE) and np.all(grid[:, -1] == IGNORE)
        assert 0 <= s.scene_id < SMALL.n_scene_types


def test_scene_shift_separates_same_class_features():
    spec = SceneSpec()
    samples = generate(spec, 200)
    means = {}
    for s in samples:
        for k in np.unique(s.y[s.y != IGNORE]):
            means.setdefault(int(k), []).append((s.scene_id, s.x[s.y == k].astype(np.float64).mean(0)))
    within, across = [], []
    for entries in means.values():
        for i, (si, mi) in enumerate(entries):
            for sj, mj in entries[i + 1:]:
                (within if si == sj else across).append(np.linalg.norm(mi - mj))
    assert np.mean(across) > 2 * np.mean(within)


def test_round_trip(tmp_path):
    samples = generate(SMALL, 7)
    write_dataset(tmp_path / "d.bin", samples, SMALL.h, SMALL.w, SMALL.n_classes)
    back = read_dataset(tmp_path / "d.bin")
    assert back.samples == samples and (back.h, back.w, back.n_classes) == (8, 8, 8)
    write_dataset(tmp_path / "e.bin", back.samples, back.h, back.w, back.n_classes)
    assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes()


def test_file_size_arithmetic(tmp_path):
    _write(tmp_path / "d.bin", SMALL, 9)
    header = 8 + 6 * 4
    per_sample = 64 * 16 * 4 + 64 * 2 + 2 + 2
    assert (tmp_path / "d.bin").stat().st_size == header + 9 * per_sample == dataset_size(9, 64, 16)


def test_bad_magic(tmp_path):
    _write(tmp_path / "d.bin", SMALL, 2)
    raw = bytearray((tmp_path / "d.bin").read_bytes())
    raw[0:8] = b"NOTADATA"
    (tmp_path / "d.bin").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="offset 0"):
        read_dataset(tmp_path / "d.bin")


def test_bad_version(tmp_path):
    _write(tmp_path / "d.bin", SMALL, 2)
    raw = bytearray((tmp_path / "d.bin").read_bytes())
    raw[8] = 9
    (tmp_path / "d.bin").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_dataset(tmp_path / "d.bin")


@pytest.mark.parametrize("cut", [4, 20, 100])
def test_truncated(tmp_path, cut):
    _write(tmp_path / "d.bin", SMALL, 2)
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "d.bin").write_bytes(raw[:-cut] if cut != 4 else raw[:cut])
    with pytest.raises(FormatError, match="offset"):
        read_dataset(tmp_path / "d.bin")


def test_magic_constant():
    assert MAGIC == b"CACDATA1"


@pytest.mark.parametrize("bad", [dict(n_classes=1), dict(n_scene_types=1), dict(noise_scale=-1.0),
                                 dict(classes_per_scene=9), dict(h=3, w=3)])
def test_impossible_specs(bad):
    with pytest.raises(SpecError):
        generate(replace(SMALL, **bad), 1)


def test_dataset_arrays_shapes():
    ds = Dataset(generate(SMALL, 3), SMALL.h, SMALL.w, SMALL.n_classes)
    X, Y = ds.arrays()
    assert X.shape == (3, 64, 16) and X.dtype == np.float64 and Y.shape == (3, 64)
