import numpy as np
import pytest

from position_transform import (build_plan, candidate_menu, kappa, kappa_table, menu_for_shape, menu_logits,
                                reorder, select_ratios, shuffle, transpose_shuffle)
from tensor_core import Tape


def test_kappa_example_sequence():
    x = np.array([10.0, 20.0, 30.0, 40.0, 50.0, 60.0]).reshape(1, 6, 1, 1)
    plan = build_plan((6, 1, 1), (3, 1, 1))
    out = shuffle(x, plan).data.reshape(-1)
    np.testing.assert_array_equal(out, [10, 30, 50, 20, 40, 60])
    assert [kappa(i, 2, 3) for i in range(1, 7)] == [1, 4, 2, 5, 3, 6]


def test_kappa_bijection_and_round_trip_exhaustive():
    rng = np.random.default_rng(0)
    for size in range(1, 65):
        for ratio in [r for r in range(1, size + 1) if size % r == 0]:
            table = kappa_table(size, ratio)
            assert sorted(table) == list(range(1, size + 1))
            plan = build_plan((size, 1, 1), (ratio, 1, 1))
            x = rng.standard_normal((2, size, 1, 1))
            np.testing.assert_array_equal(reorder(shuffle(x, plan), plan).data, x)


def test_round_trip_3d():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 8, 12, 4))
    plan = build_plan((8, 12, 4), (2, 3, 4))
    np.testing.assert_array_equal(reorder(shuffle(x, plan), plan).data, x)


def test_ratio_one_and_full_size_are_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 5, 7, 3))
    for ratios in [(1, 1, 1), (5, 7, 3)]:
        plan = build_plan((5, 7, 3), ratios)
        assert plan.is_identity
        np.testing.assert_array_equal(shuffle(x, plan).data, x)


def test_transpose_shuffle_equals_gather():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 6, 4))
    plan = build_plan((8, 6, 4), (4, 3, 2))
    np.testing.assert_array_equal(transpose_shuffle(x, plan), shuffle(x, plan).data)


def test_non_divisor_ratio_names_dimension():
    with pytest.raises(ValueError, match="dimension w"):
        build_plan((8, 6, 4), (2, 4, 2))


def test_identity_plan_records_no_permutation():
    tape = Tape()
    x = tape.watch(np.ones((1, 4, 4, 4)), "x")
    shuffle(x, build_plan((4, 4, 4), (1, 1, 1)))
    assert tape.count("permute") == 0
    shuffle(x, build_plan((4, 4, 4), (2, 1, 1)))
    assert tape.count("permute") == 1


def test_select_ratios_argmax_and_ties():
    menu = ([1, 2, 4], [1, 2], [1])
    assert select_ratios([0.1, 0.9, 0.2, 0.0, 3.0, 5.0], (8, 6, 3), menu) == (2, 2, 1)
    assert select_ratios([1.0, 1.0, 1.0, 2.0, 2.0, 0.0], (8, 6, 3), menu) == (1, 1, 1)


def test_select_ratios_empty_menu_defaults_to_one():
    assert select_ratios([0.0, 1.0], (4, 5, 7), ([1, 2], [], [])) == (2, 1, 1)


def test_select_ratios_rejects_invalid_menu():
    with pytest.raises(ValueError, match="does not divide"):
        select_ratios([0.0, 1.0, 0.0], (6, 1, 1), ([1, 4], [1], []))


def test_candidate_menu_and_logit_masking():
    assert candidate_menu(12) == [1, 2, 4]
    assert candidate_menu(5) == [1]
    menu = menu_for_shape((16, 8, 6))
    assert menu == ([1, 2, 4, 8, 16], [1, 2, 4, 8], [1, 2])
    logits = np.arange(15, dtype=float)
    picked = menu_logits(logits, (16, 8, 6))
    np.testing.assert_array_equal(picked, [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11])
    assert select_ratios(picked, (16, 8, 6), menu) == (16, 8, 2)
