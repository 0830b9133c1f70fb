import numpy as np
import pytest

import tensor_core as tc
from gradcheck import numeric_grad, relative_error
from tensor_core import ShapeError, Tape


def naive_conv(x, kernel, bias, stride=1, mode="constant"):
    k = kernel.shape[-1]
    pad = k // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)), mode=mode)
    c_out = kernel.shape[0]
    h, w, d = (n // stride for n in x.shape[1:])
    out = np.zeros((c_out, h, w, d))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                for l in range(d):
                    a, b, c = i * stride, j * stride, l * stride
                    out[o, i, j, l] = np.sum(padded[:, a:a + k, b:b + k, c:c + k] * kernel[o]) + bias[o]
    return out


@pytest.mark.parametrize("padding, mode", [("zero", "constant"), ("replicate", "edge")])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv3d_matches_direct_loops(padding, mode, stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 6, 4, 4))
    kernel = rng.standard_normal((3, 2, 3, 3, 3))
    bias = rng.standard_normal(3)

    out = tc.conv3d(x, kernel, bias, stride=stride, padding=padding).data

    np.testing.assert_allclose(out, naive_conv(x, kernel, bias, stride, mode), atol=1e-12)


def test_conv3d_shape_errors():
    x = np.zeros((2, 4, 4, 4))
    with pytest.raises(ShapeError, match="input channels"):
        tc.conv3d(x, np.zeros((1, 3, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="odd cube"):
        tc.conv3d(x, np.zeros((1, 2, 2, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeError, match="stride"):
        tc.conv3d(np.zeros((2, 5, 4, 4)), np.zeros((1, 2, 3, 3, 3)), np.zeros(1), stride=2)
    with pytest.raises(ValueError, match="padding"):
        tc.conv3d(x, np.zeros((1, 2, 3, 3, 3)), np.zeros(1), padding="reflect")


def test_backward_product_rule():
    tape = Tape()
    x = tape.watch(np.array([1.0, -2.0, 3.0]), "x")
    loss = tc.sum_all(tc.mul(x, x))
    grads = tc.backward(tape, loss)

    np.testing.assert_array_equal(grads[x.node_id], [2.0, -4.0, 6.0])
    np.testing.assert_array_equal(tape.gradients()["x"], [2.0, -4.0, 6.0])


def test_backward_accumulates_over_reused_nodes():
    tape = Tape()
    x = tape.watch(np.array([2.0]), "x")
    y = tc.add(tc.scale(x, 3.0), x)
    tc.backward(tape, tc.sum_all(y))
    assert x.grad[0] == pytest.approx(4.0)


def test_backward_needs_scalar_loss():
    tape = Tape()
    x = tape.watch(np.ones(3), "x")
    with pytest.raises(ShapeError, match="scalar"):
        tc.backward(tape, tc.relu(x))


def test_unreachable_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.watch(np.ones(2), "x")
    tape.watch(np.ones(4), "unused")
    tc.backward(tape, tc.sum_all(x))
    assert np.all(tape.gradients()["unused"] == 0)


def test_ops_without_tape_record_nothing():
    out = tc.relu(np.array([-1.0, 2.0]))
    assert out.tape is None
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_non_finite_values_raise():
    with pytest.raises(FloatingPointError, match="scale"):
        tc.scale(np.array([np.inf]), 2.0)


def test_gate_scales_features():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((3, 2, 2, 2))
    out = tc.gate(f, np.zeros((1, 2, 2, 2))).data
    np.testing.assert_array_equal(out, f)
    with pytest.raises(ShapeError):
        tc.gate(f, np.zeros((2, 2, 2, 2)))


def test_pool_shapes_and_values():
    x = np.arange(16, dtype=float).reshape(2, 2, 2, 2)
    np.testing.assert_array_equal(tc.pool_spatial(x, "max").data, [7.0, 15.0])
    np.testing.assert_array_equal(tc.pool_spatial(x, "avg").data, [3.5, 11.5])
    assert tc.pool_channel(x, "max").shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(tc.pool_channel(x, "avg").data[0], (x[0] + x[1]) / 2)
    with pytest.raises(ValueError):
        tc.pool_spatial(x, "median")


def test_permute_spatial_backward_applies_inverse():
    rng = np.random.default_rng(2)
    x_data = rng.standard_normal((1, 4, 3, 2))
    r = rng.standard_normal((1, 4, 3, 2))
    idx = (np.array([2, 0, 3, 1]), np.array([1, 2, 0]), np.array([1, 0]))

    tape = Tape()
    x = tape.watch(x_data, "x")
    tc.backward(tape, tc.sum_all(tc.mul(tc.permute_spatial(x, idx), r)))

    expected = np.zeros_like(x_data)
    for a in range(4):
        for b in range(3):
            for c in range(2):
                expected[0, idx[0][a], idx[1][b], idx[2][c]] += r[0, a, b, c]
    np.testing.assert_allclose(x.grad, expected)
    assert tape.count("permute") == 1


def test_permute_spatial_rejects_non_permutation():
    with pytest.raises(ShapeError, match="not a permutation"):
        tc.permute_spatial(np.zeros((1, 3, 1, 1)), (np.array([0, 0, 1]), np.array([0]), np.array([0])))


def test_upsample_and_concat_shapes():
    x = np.ones((2, 2, 2, 1))
    assert tc.nearest_upsample2x(x).shape == (2, 4, 4, 2)
    assert tc.concat_channels([x, x]).shape == (4, 2, 2, 1)
    with pytest.raises(ShapeError):
        tc.concat_channels([x, np.ones((1, 3, 2, 1))])


def test_linear():
    w = np.array([[1.0, 2.0], [0.0, -1.0]])
    out = tc.linear(np.array([3.0, 4.0]), w, np.array([0.5, 0.0]))
    np.testing.assert_array_equal(out.data, [11.5, -4.0])


def test_precision_switch():
    tc.set_precision("float32")
    assert tc.Tensor([1.0]).data.dtype == np.float32
    tc.set_precision("float64")
    assert tc.Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError, match="Unknown precision"):
        tc.set_precision("float16")


def _away_from_zero(rng, shape):
    return np.sign(rng.standard_normal(shape)) * rng.uniform(0.1, 1.0, shape)


def _spatial_permutation(rng):
    return rng.permutation(3), rng.permutation(2), rng.permutation(4)


OP_CASES = {
    "relu": (lambda a: tc.relu(a), lambda rng: [_away_from_zero(rng, (2, 3, 3, 3))]),
    "sigmoid": (lambda a: tc.sigmoid(a), lambda rng: [rng.standard_normal((2, 3, 3, 3))]),
    "add": (lambda a, b: tc.add(a, b), lambda rng: [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
    "mul": (lambda a, b: tc.mul(a, b), lambda rng: [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
    "scale": (lambda a: tc.scale(a, -1.7), lambda rng: [rng.standard_normal((4,))]),
    "reshape": (lambda a: tc.reshape(a, (4, 6)), lambda rng: [rng.standard_normal((2, 3, 4))]),
    "concat_channels": (lambda a, b: tc.concat_channels([a, b]),
                        lambda rng: [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((1, 3, 2, 2))]),
    "nearest_upsample2x": (lambda a: tc.nearest_upsample2x(a), lambda rng: [rng.standard_normal((2, 2, 2, 2))]),
    "pool_spatial_max": (lambda a: tc.pool_spatial(a, "max"), lambda rng: [rng.standard_normal((3, 3, 3, 2))]),
    "pool_spatial_avg": (lambda a: tc.pool_spatial(a, "avg"), lambda rng: [rng.standard_normal((3, 3, 3, 2))]),
    "pool_channel_max": (lambda a: tc.pool_channel(a, "max"), lambda rng: [rng.standard_normal((4, 3, 2, 2))]),
    "pool_channel_avg": (lambda a: tc.pool_channel(a, "avg"), lambda rng: [rng.standard_normal((4, 3, 2, 2))]),
    "gate": (lambda a, b: tc.gate(a, b),
             lambda rng: [rng.standard_normal((2, 3, 3, 2)), rng.uniform(0.0, 1.0, (1, 3, 3, 2))]),
    "linear": (lambda x, w, b: tc.linear(x, w, b),
               lambda rng: [rng.standard_normal(5), rng.standard_normal((3, 5)), rng.standard_normal(3)]),
    "permute_spatial": (lambda a: tc.permute_spatial(a, _spatial_permutation(np.random.default_rng(0))),
                        lambda rng: [rng.standard_normal((2, 3, 2, 4))]),
    "conv3d": (lambda x, k, b: tc.conv3d(x, k, b),
               lambda rng: [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 2, 3, 3, 3)),
                            rng.standard_normal(2)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradient_matches_central_differences(name, seed):
    op, make_inputs = OP_CASES[name]
    rng = np.random.default_rng(seed)
    arrays = make_inputs(rng)
    out_weights = rng.standard_normal(op(*arrays).shape)

    def loss(*inputs):
        return tc.sum_all(tc.mul(op(*inputs), out_weights))

    tape = Tape()
    leaves = [tape.watch(a.copy(), f"in{i}") for i, a in enumerate(arrays)]
    tc.backward(tape, loss(*leaves))

    for leaf, array in zip(leaves, arrays):
        idx = np.arange(array.size)
        numeric = numeric_grad(lambda: loss(*arrays).item(), array, idx)
        assert relative_error(leaf.grad.reshape(-1), numeric) <= 1e-6, name
