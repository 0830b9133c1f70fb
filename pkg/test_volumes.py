import json
import os

import numpy as np
import pytest

import config
from volumes import (PhantomConfig, VolumeFormatError, VolumeSample, center_crop, load_dataset, load_volume,
                     random_crop, read_array, read_mask, save_volume, split, synth_generate, write_array)


@pytest.fixture(scope="module")
def phantoms():
    return synth_generate(11, 4, config.DEFAULT_VOLUME_SHAPE)


def test_phantoms_are_deterministic_per_seed_and_index():
    a = synth_generate(5, 2, (16, 16, 16))
    b = synth_generate(5, 3, (16, 16, 16))
    np.testing.assert_array_equal(a[1].image, b[1].image)
    np.testing.assert_array_equal(a[1].mask, b[1].mask)
    assert not np.array_equal(a[0].mask, a[1].mask)
    assert a[0].meta == {"seed": 5, "index": 0, "spacing": 0.625}


def test_foreground_fraction_in_range(phantoms):
    for sample in phantoms:
        assert sample.shape == (64, 64, 32)
        assert sample.mask.dtype == np.uint8
        assert 0.01 <= sample.foreground_fraction <= 0.25


def test_noise_free_untextured_phantom_has_two_intensities():
    cfg = PhantomConfig(noise_sigma=0.0, texture_amplitude=0.0, fg_intensity=3.0, bg_intensity=1.0)
    sample = synth_generate(0, 1, (16, 16, 16), cfg)[0]
    assert set(np.unique(sample.image)) == {1.0, 3.0}
    np.testing.assert_array_equal(sample.image == 3.0, sample.mask == 1)


def test_invalid_generation_arguments():
    with pytest.raises(ValueError, match=">= 16"):
        synth_generate(0, 1, (8, 16, 16))
    with pytest.raises(ValueError, match="count"):
        synth_generate(0, 0, (16, 16, 16))
    with pytest.raises(ValueError, match="unknown phantom settings"):
        PhantomConfig.from_dict({"radius": 3})


def test_full_size_crop_is_identity(phantoms):
    sample = phantoms[0]
    crop = random_crop(sample, sample.shape, 0)
    assert crop.meta["crop_origin"] == [0, 0, 0]
    np.testing.assert_array_equal(crop.image, sample.image)


def test_crop_matches_source_at_recorded_origin(phantoms):
    sample = phantoms[1]
    rng = np.random.default_rng(0)
    for _ in range(20):
        crop = random_crop(sample, (32, 32, 16), rng)
        x, y, z = crop.meta["crop_origin"]
        np.testing.assert_array_equal(crop.mask, sample.mask[x:x + 32, y:y + 32, z:z + 16])
        np.testing.assert_array_equal(crop.image, sample.image[x:x + 32, y:y + 32, z:z + 16])


def test_crop_coverage_is_uniform():
    shape, crop_shape, n = (16, 16, 16), (8, 8, 8), 1000
    sample = VolumeSample(np.zeros(shape), np.zeros(shape, dtype=np.uint8))
    rng = np.random.default_rng(42)
    coverage = np.zeros(shape)
    origins = np.zeros((n, 3))
    for t in range(n):
        x, y, z = random_crop(sample, crop_shape, rng).meta["crop_origin"]
        origins[t] = (x, y, z)
        coverage[x:x + 8, y:y + 8, z:z + 8] += 1

    # origins are uniform on 0..8 per axis: mean 4, variance 80 / 12
    assert np.all(np.abs(origins.mean(axis=0) - 4.0) <= 3 * np.sqrt(80 / 12 / n))

    # per-axis probability that a voxel lies inside the crop
    axis_p = np.array([sum(o <= i < o + 8 for o in range(9)) / 9 for i in range(16)])
    p = axis_p[:, None, None] * axis_p[None, :, None] * axis_p[None, None, :]
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(coverage[8, 8, 8] - n * p[8, 8, 8]) <= 3 * sigma[8, 8, 8]
    # 4096 voxels checked at once, with small expected counts at the corners
    assert np.all(np.abs(coverage - n * p) <= 5 * sigma + 3)


def test_crop_errors(phantoms):
    with pytest.raises(ValueError, match="exceeds volume shape"):
        random_crop(phantoms[0], (65, 8, 8), 0)
    with pytest.raises(ValueError, match="anchor"):
        center_crop(phantoms[0], (8, 8, 8), anchor="corner")


def test_center_crop_on_foreground_contains_centroid(phantoms):
    sample = phantoms[2]
    crop = center_crop(sample, (16, 16, 8), anchor="foreground")
    centroid = np.argwhere(sample.mask).mean(axis=0)
    origin = np.array(crop.meta["crop_origin"])
    assert np.all(origin <= centroid) and np.all(centroid < origin + np.array([16, 16, 8]))
    assert crop.mask.sum() > 0


def test_volume_round_trip_is_bitwise(tmp_path, phantoms):
    crop = random_crop(phantoms[3], (32, 32, 16), 7)
    path = str(tmp_path / "vol")
    save_volume(crop, path)
    loaded = load_volume(path)
    assert loaded.image.tobytes() == crop.image.tobytes()
    assert loaded.mask.tobytes() == crop.mask.tobytes()
    assert loaded.meta["crop_origin"] == crop.meta["crop_origin"]
    with open(path + ".json") as f:
        assert json.load(f)["dtype"] == "f64"


def test_payload_size_mismatch_reported(tmp_path):
    path = str(tmp_path / "arr")
    write_array(np.zeros((2, 3, 4), dtype=np.uint8), path)
    with open(path + ".raw", "ab") as f:
        f.write(b"\x00")
    with pytest.raises(VolumeFormatError, match="has 25 bytes.*expects 24 bytes"):
        read_array(path)
    with pytest.raises(FileNotFoundError):
        read_array(str(tmp_path / "missing"))


def test_read_mask_variants(tmp_path, phantoms):
    sample = random_crop(phantoms[0], (16, 16, 16), 1)
    save_volume(sample, str(tmp_path / "s"))
    np.testing.assert_array_equal(read_mask(str(tmp_path / "s")), sample.mask)
    write_array(np.array([[[0.2, 0.7]]]), str(tmp_path / "prob"))
    np.testing.assert_array_equal(read_mask(str(tmp_path / "prob.json")), [[[0, 1]]])


def test_dataset_loading(tiny_dataset):
    samples = load_dataset(tiny_dataset)
    assert len(samples) == 5
    assert samples[0].meta["case"] == "case_000"
    for s in samples:
        assert s.image.min() == 0.0 and s.image.max() == 1.0
    with pytest.raises(FileNotFoundError, match="no dataset manifest"):
        load_dataset(os.path.dirname(tiny_dataset))


def test_split_is_disjoint_and_deterministic():
    items = list(range(10))
    train, test = split(items, 0.8, seed=3)
    assert len(train) == 8 and len(test) == 2
    assert sorted(train + test) == items
    assert split(items, 0.8, seed=3) == (train, test)
    with pytest.raises(ValueError):
        split(items, 1.0)


def test_sample_validation():
    with pytest.raises(ValueError, match="differ"):
        VolumeSample(np.zeros((2, 2, 2)), np.zeros((2, 2, 1)))
    with pytest.raises(ValueError, match="binary"):
        VolumeSample(np.zeros((2, 2, 2)), np.full((2, 2, 2), 2))
