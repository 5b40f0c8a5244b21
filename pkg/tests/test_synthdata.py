import math

import numpy as np
import pytest

from vcvrl.synthdata import (
    AugmentationConfig,
    DataQualityError,
    GeneratorConfig,
    VolumeSample,
    extract_patch,
    flip,
    generate_volume,
    make_dataset,
    read_dataset,
    rotate90,
    write_dataset,
)


def test_generation_is_deterministic():
    a = generate_volume(GeneratorConfig(seed=3))
    b = generate_volume(GeneratorConfig(seed=3))
    assert np.array_equal(a.volume, b.volume) and np.array_equal(a.label, b.label)
    c = generate_volume(GeneratorConfig(seed=4))
    assert not np.array_equal(a.label, c.label)


def test_ranges():
    s = generate_volume(GeneratorConfig(seed=1, noise_sigma=0.3))
    assert s.volume.dtype == np.float32 and s.label.dtype == np.uint8
    assert s.volume.min() >= 0 and s.volume.max() <= 1
    assert set(np.unique(s.label).tolist()) <= {0, 1}
    assert 0 < s.foreground_fraction < 1


def test_noiseless_volume_equals_label():
    s = generate_volume(GeneratorConfig(seed=2, noise_sigma=0.0, intensity_range=(1.0, 1.0)))
    assert np.array_equal(s.volume, s.label.astype(np.float32))


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_single_straight_tube_matches_cylinder_volume(seed):
    cfg = GeneratorConfig(
        dims=(48, 48, 48), branch_count=1, step_length=4.0, radius_range=(2.0, 2.0), curvature=0.0, noise_sigma=0.0, seed=seed
    )
    s = generate_volume(cfg)
    branch = s.provenance["branches"][0]
    expected = math.pi * branch["radius"] ** 2 * branch["length"]
    assert abs(int(s.label.sum()) - expected) <= 0.3 * expected


@pytest.mark.parametrize(
    "kwargs",
    [dict(dims=(4, 16, 16)), dict(radius_range=(0.5, 1.0)), dict(dims=(8, 8, 8), radius_range=(4.0, 4.0))],
)
def test_invalid_generator_config(kwargs):
    with pytest.raises(ValueError):
        GeneratorConfig(**kwargs)


def test_dataset_split_counts_and_distinct_seeds():
    data = make_dataset(GeneratorConfig(dims=(16, 16, 8)), (5, 2, 3))
    assert [len(data[k]) for k in ("train", "val", "test")] == [5, 2, 3]
    seeds = [s.seed for split in data.values() for s in split]
    assert len(set(seeds)) == len(seeds)


def _sample(seed=0):
    return generate_volume(GeneratorConfig(dims=(24, 24, 12), seed=seed))


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_double_flip_is_identity(axis):
    s = _sample()
    back = flip(flip(s, axis), axis)
    assert np.array_equal(back.volume, s.volume) and np.array_equal(back.label, s.label)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_rotation_keeps_label_conditioned_mean(k):
    s = _sample(1)
    r = rotate90(s, k)
    fg = s.volume[s.label == 1].astype(np.float64)
    fg_r = r.volume[r.label == 1].astype(np.float64)
    assert fg_r.size == fg.size
    assert fg_r.mean() == pytest.approx(fg.mean(), abs=1e-12)
    assert np.array_equal(rotate90(r, 4 - k).label, s.label)


def test_patches_meet_floor_and_shape():
    s = _sample(2)
    aug = AugmentationConfig(crop=(16, 16, 8))
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = extract_patch(s, aug, rng)
        assert p.volume.shape == (16, 16, 8) == p.label.shape
        assert p.foreground_fraction > 0.001


def test_patch_augmentation_is_paired():
    s = _sample(3)
    # a volume that is exactly its label makes any mismatch between the two visible
    paired = VolumeSample(s.label.astype(np.float32), s.label, s.seed)
    rng = np.random.default_rng(5)
    for _ in range(30):
        p = extract_patch(paired, AugmentationConfig(crop=(12, 12, 6)), rng)
        assert np.array_equal(p.volume, p.label.astype(np.float32))


def test_patches_are_seed_deterministic():
    s = _sample(4)
    aug = AugmentationConfig(crop=(16, 16, 8))
    a = extract_patch(s, aug, np.random.default_rng(9))
    b = extract_patch(s, aug, np.random.default_rng(9))
    assert np.array_equal(a.volume, b.volume) and a.provenance == b.provenance


def test_unreachable_floor_raises():
    empty = VolumeSample(np.zeros((16, 16, 8), np.float32), np.zeros((16, 16, 8), np.uint8), 0)
    with pytest.raises(DataQualityError):
        extract_patch(empty, AugmentationConfig(crop=(8, 8, 8), max_redraws=5), np.random.default_rng(0))


def test_crop_larger_than_volume_rejected():
    with pytest.raises(ValueError):
        extract_patch(_sample(), AugmentationConfig(crop=(32, 8, 8)), np.random.default_rng(0))


def test_dataset_round_trip(tmp_path):
    data = make_dataset(GeneratorConfig(dims=(16, 16, 8)), (2, 1, 1))
    write_dataset(tmp_path, data)
    back = read_dataset(tmp_path)
    for split in data:
        for a, b in zip(data[split], back[split]):
            assert np.array_equal(a.volume, b.volume) and np.array_equal(a.label, b.label)
            assert a.seed == b.seed


def test_dataset_without_manifest(tmp_path):
    data = make_dataset(GeneratorConfig(dims=(16, 16, 8)), (2, 1, 1))
    write_dataset(tmp_path, data)
    (tmp_path / "manifest.json").unlink()
    back = read_dataset(tmp_path)
    assert [len(back[k]) for k in ("train", "val", "test")] == [2, 1, 1]
