import json

import numpy as np
import pandas as pd
import pytest

from eval_infer import (MetricsReport, assd, binarize, case_metrics, coverage_counts, dice, hd95, jaccard,
                        sliding_window_infer, surface_distances, surface_voxels, window_origins)
from seg_net import ArchSpec, init_model, predict
from tensor_core import ShapeError


def oracle_surface(mask):
    """Surface voxels by explicit 6-neighbour scan, outside counted as background."""
    padded = np.pad(mask.astype(bool), 1, constant_values=False)
    points = []
    for x, y, z in np.argwhere(mask):
        px, py, pz = x + 1, y + 1, z + 1
        neighbours = [padded[px - 1, py, pz], padded[px + 1, py, pz], padded[px, py - 1, pz],
                      padded[px, py + 1, pz], padded[px, py, pz - 1], padded[px, py, pz + 1]]
        if not all(neighbours):
            points.append((x, y, z))
    return np.array(points, dtype=float)


def oracle_distances(a, b, spacing):
    pa, pb = oracle_surface(a) * spacing, oracle_surface(b) * spacing
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    return np.concatenate([d.min(axis=1), d.min(axis=0)])


def test_overlap_metrics_examples():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros((4, 4, 4), dtype=np.uint8)
    a[0, 0, :] = 1
    a[0, 1, :] = 1
    b[0, 1, :] = 1
    b[0, 2, :] = 1
    assert dice(a, b) == 0.5
    assert jaccard(a, b) == pytest.approx(1 / 3)
    assert dice(a, a) == jaccard(a, a) == 1.0
    assert dice(a, np.roll(a, 2, axis=0)) == 0.0
    assert dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0
    with pytest.raises(ShapeError):
        dice(a, np.zeros((4, 4, 3)))


def test_jaccard_dice_relation_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(25):
        a = rng.random((8, 8, 8)) < 0.3
        b = rng.random((8, 8, 8)) < 0.3
        d, j = dice(a, b), jaccard(a, b)
        assert j <= d
        assert abs(j - d / (2 - d)) <= 1e-12
        assert dice(a, b) == dice(b, a)


def test_single_voxel_distance():
    a = np.zeros((8, 8, 8), dtype=np.uint8)
    b = np.zeros((8, 8, 8), dtype=np.uint8)
    a[2, 3, 3] = 1
    b[6, 3, 3] = 1
    assert hd95(a, b, 0.625) == pytest.approx(2.5)
    assert assd(a, b, 0.625) == pytest.approx(2.5)
    assert hd95(a, a) == 0.0 and assd(a, a) == 0.0


def test_surface_voxels_of_a_block():
    mask = np.zeros((6, 6, 6), dtype=np.uint8)
    mask[1:5, 1:5, 1:5] = 1
    surface = surface_voxels(mask)
    assert surface.sum() == 64 - 8
    assert not surface[2, 2, 2]
    assert surface_voxels(np.ones((3, 3, 3))).sum() == 26


def test_surface_distances_match_all_pairs_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = rng.random((16, 16, 16)) < 0.05
        b = rng.random((16, 16, 16)) < 0.05
        d_ab, d_ba = surface_distances(a, b, 0.625)
        union = oracle_distances(a, b, 0.625)
        np.testing.assert_allclose(np.sort(np.concatenate([d_ab, d_ba])), np.sort(union), atol=1e-9)
        assert abs(hd95(a, b) - np.percentile(union, 95)) <= 1e-9
        assert abs(assd(a, b) - union.mean()) <= 1e-9


def test_empty_mask_distance_raises():
    a = np.zeros((4, 4, 4))
    b = np.ones((4, 4, 4))
    with pytest.raises(ValueError, match="undefined surface distance for empty mask"):
        hd95(a, b)


def test_binarize():
    assert np.all(binarize(np.full((2, 2, 2), 0.5)) == 1)
    assert np.all(binarize(np.full((2, 2, 2), 0.49)) == 0)
    assert np.all(binarize(np.zeros((2, 2, 2)), threshold=0.0) == 1)


def test_window_origins_and_coverage():
    assert window_origins(48, 32, 16) == [0, 16]
    assert window_origins(50, 32, 16) == [0, 16, 18]
    assert window_origins(32, 32, 5) == [0]
    counts = coverage_counts((48, 48, 48), (32, 32, 32), (16, 16, 16))
    axis = np.array([1] * 16 + [2] * 16 + [1] * 16)
    np.testing.assert_array_equal(counts, axis[:, None, None] * axis[None, :, None] * axis[None, None, :])
    assert coverage_counts((20, 17, 9), (8, 8, 4), (7, 5, 3)).min() >= 1
    with pytest.raises(ValueError, match="exceeds"):
        window_origins(8, 16, 4)


def test_constant_predictor_aggregates_to_constant():
    volume = np.random.default_rng(2).random((20, 18, 10))
    out = sliding_window_infer(None, volume, (8, 8, 4), stride=(3, 5, 2),
                               predictor=lambda patch: np.full(patch.shape, 0.5))
    np.testing.assert_allclose(out, 0.5)


def test_averaging_uses_coverage_counts():
    volume = np.zeros((12, 8, 8))
    out = sliding_window_infer(None, volume, (8, 8, 8), stride=(4, 4, 4),
                               predictor=lambda patch: np.ones(patch.shape))
    np.testing.assert_array_equal(out, 1.0)


def test_single_window_equals_forward_and_threads_agree():
    params = init_model(ArchSpec(channels=(2, 4, 4), sram_kernel=3), seed=0)
    volume = np.random.default_rng(3).random((8, 8, 8))
    np.testing.assert_array_equal(sliding_window_infer(params, volume, (8, 8, 8)), predict(params, volume))

    big = np.random.default_rng(4).random((12, 12, 8))
    serial = sliding_window_infer(params, big, (8, 8, 8), stride=(4, 4, 4))
    threaded = sliding_window_infer(params, big, (8, 8, 8), stride=(4, 4, 4), workers=3)
    np.testing.assert_array_equal(serial, threaded)
    with pytest.raises(ShapeError, match="divisible"):
        sliding_window_infer(params, big, (6, 8, 8))


def test_case_metrics_with_empty_prediction(caplog):
    truth = np.zeros((6, 6, 6), dtype=np.uint8)
    truth[2:4, 2:4, 2:4] = 1
    row = case_metrics(np.zeros_like(truth), truth)
    assert row["dice"] == 0.0
    assert np.isnan(row["hd95"]) and np.isnan(row["assd"])
    assert "NaN" in caplog.text


def test_metrics_report_frames_and_files(tmp_path):
    truth = np.zeros((8, 8, 8), dtype=np.uint8)
    truth[2:6, 2:6, 2:6] = 1
    shifted = np.roll(truth, 1, axis=0)
    report = MetricsReport(run_config={"window": [8, 8, 8]})
    report.add_case("a", truth, truth)
    report.add_case("b", shifted, truth)

    frame = report.to_frame()
    assert list(frame["case"]) == ["a", "b", "mean", "std"]
    assert frame.loc[2, "dice"] == pytest.approx((1.0 + 0.75) / 2)
    assert frame.loc[3, "dice"] == pytest.approx(0.125)

    report.save_json(str(tmp_path / "m.json"))
    report.save_csv(str(tmp_path / "m.csv"))
    with open(tmp_path / "m.json") as f:
        saved = json.load(f)
    assert saved["config"] == {"window": [8, 8, 8]}
    assert len(saved["cases"]) == 2
    assert pd.read_csv(tmp_path / "m.csv").shape == (4, 5)
