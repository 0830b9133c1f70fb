"""
Dense tensors and a minimal reverse-mode differentiation tape.

Tensors are channel-first (C, H, W, D). Every op works with or without a tape:
when at least one input lives on a Tape the op records a backward rule,
otherwise it only computes the value.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

import config

logger = logging.getLogger(__name__)

_PRECISIONS = {"float64": np.float64, "float32": np.float32}
_dtype = _PRECISIONS.get(config.PRECISION, np.float64)

PADDING_MODES = ("zero", "replicate")
POOL_MODES = ("max", "avg")

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, Sequence[float]]


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform for an op."""


def set_precision(name: str) -> None:
    """
    Select the scalar precision used for new tensors.

    Args:
        name: "float64" (default) or "float32"
    """
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]
    logger.debug(f"Tensor precision set to {name}")


def get_dtype() -> type:
    return _dtype


class Tensor:
    """A dense real array, optionally registered as a node on a Tape."""

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.name = name
        self.tape: Optional["Tape"] = None
        self.node_id: Optional[int] = None
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        where = f" node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{where})"


@dataclass
class TapeOp:
    name: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: BackwardFn


class Tape:
    """
    Ordered record of ops for one forward pass.

    Ops are appended in execution order, so the op list is already
    topologically sorted. A tape is single-owner and not thread-safe.
    """

    def __init__(self):
        self.nodes: List[Tensor] = []
        self.ops: List[TapeOp] = []
        self.leaves: Dict[str, Tensor] = {}

    def _register(self, tensor: Tensor) -> Tensor:
        tensor.tape = self
        tensor.node_id = len(self.nodes)
        self.nodes.append(tensor)
        return tensor

    def watch(self, value: ArrayLike, name: Optional[str] = None) -> Tensor:
        """
        Register a leaf (parameter or input) whose gradient should be tracked.

        Args:
            value: Array data for the leaf
            name: Optional name; named leaves are listed in `leaves`

        Returns:
            The leaf tensor
        """
        leaf = self._register(Tensor(value.data if isinstance(value, Tensor) else value, name=name))
        if name is not None:
            self.leaves[name] = leaf
        return leaf

    def record(self, name: str, inputs: Sequence[Tensor], data: np.ndarray,
               backward_fn: BackwardFn) -> Tensor:
        for t in inputs:
            if t.tape is not None and t.tape is not self:
                raise ValueError(f"{name}: inputs belong to different tapes")
        out = self._register(Tensor(data))
        input_ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self.ops.append(TapeOp(name, input_ids, out.node_id, backward_fn))
        return out

    def count(self, op_name: str) -> int:
        """Number of recorded ops with the given name."""
        return sum(1 for op in self.ops if op.name == op_name)

    def gradients(self) -> Dict[str, np.ndarray]:
        """Gradients of the named leaves after backward() (zeros where unreachable)."""
        return {
            name: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for name, leaf in self.leaves.items()
        }


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(data: np.ndarray, op_name: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op_name} produced non-finite values")


def custom_op(name: str, inputs: Sequence[Tensor], data: np.ndarray,
              backward_fn: BackwardFn) -> Tensor:
    """
    Build an op from a precomputed value and a backward rule.

    The backward rule receives the upstream gradient and returns one gradient
    per input (None where an input needs no gradient).
    """
    data = np.asarray(data, dtype=_dtype)
    _check_finite(data, name)
    tape = next((t.tape for t in inputs if t.tape is not None), None)
    if tape is None:
        return Tensor(data)
    return tape.record(name, inputs, data, backward_fn)


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Reverse sweep over the tape, seeding d(loss)/d(loss) = 1.

    Args:
        tape: The tape the loss was recorded on
        loss: Scalar loss tensor

    Returns:
        Gradient table mapping node id -> gradient array. Each reachable node's
        `grad` attribute is set as well.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    for node in tape.nodes:
        node.grad = None

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        upstream = grads.get(op.output)
        if upstream is None:
            continue
        input_grads = op.backward(upstream)
        for node_id, g in zip(op.inputs, input_grads):
            if node_id is None or g is None:
                continue
            g = np.asarray(g, dtype=tape.nodes[node_id].data.dtype)
            if g.shape != tape.nodes[node_id].shape:
                raise ShapeError(f"{op.name}: gradient shape {g.shape} != value shape {tape.nodes[node_id].shape}")
            grads[node_id] = grads[node_id] + g if node_id in grads else g

    for node_id, g in grads.items():
        tape.nodes[node_id].grad = g
    return grads


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _pad(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    widths = ((0, 0), (pad, pad), (pad, pad), (pad, pad))
    return np.pad(x, widths, mode="edge" if mode == "replicate" else "constant")


def _unpad(g: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return g
    if mode == "replicate":
        # edge padding copies the border voxel, so its gradient collects the pad region
        g = g.copy()
        for axis in (1, 2, 3):
            view = np.moveaxis(g, axis, 0)
            view[pad] += view[:pad].sum(axis=0)
            view[-pad - 1] += view[-pad:].sum(axis=0)
    return g[:, pad:-pad, pad:-pad, pad:-pad]


def conv3d(x: ArrayLike, kernel: ArrayLike, bias: ArrayLike, stride: int = 1,
           padding: str = "zero") -> Tensor:
    """
    Same-padded 3D convolution (cross-correlation).

    Args:
        x: Input of shape (C_in, H, W, D)
        kernel: Weights of shape (C_out, C_in, k, k, k), k odd
        bias: Bias of shape (C_out,)
        stride: Positive stride; must divide every spatial size
        padding: "zero" or "replicate"

    Returns:
        Output of shape (C_out, H/stride, W/stride, D/stride)
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d expects a (C, H, W, D) input, got shape {x.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d expects a (C_out, C_in, k, k, k) kernel, got shape {kernel.shape}")
    c_out, c_in, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"conv3d kernel stencil must be an odd cube, got {kernel.shape[2:]}")
    if c_in != x.shape[0]:
        raise ShapeError(f"kernel shape {kernel.shape} expects {c_in} input channels, input shape is {x.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if padding not in PADDING_MODES:
        raise ValueError(f"Unknown padding '{padding}', expected one of {PADDING_MODES}")
    if stride < 1 or any(n % stride for n in x.shape[1:]):
        raise ShapeError(f"stride {stride} does not divide spatial shape {x.shape[1:]}")

    pad = k // 2
    padded = _pad(x.data, pad, padding)
    windows = sliding_window_view(padded, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    out = np.tensordot(kernel.data, windows, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out = out + bias.data[:, None, None, None]

    def _backward(grad: np.ndarray):
        g_bias = grad.sum(axis=(1, 2, 3))
        g_kernel = np.tensordot(grad, windows, axes=([1, 2, 3], [1, 2, 3]))
        h, w, d = grad.shape[1:]
        g_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    contrib = np.tensordot(kernel.data[:, :, i, j, l], grad, axes=([0], [0]))
                    g_padded[:, i:i + stride * h:stride, j:j + stride * w:stride, l:l + stride * d:stride] += contrib
        return _unpad(g_padded, pad, padding), g_kernel, g_bias

    return custom_op("conv3d", (x, kernel, bias), out, _backward)


# ---------------------------------------------------------------------------
# Pointwise and shape ops
# ---------------------------------------------------------------------------

def _same_shape(op_name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op_name}: shapes {a.shape} and {b.shape} differ")


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return custom_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return custom_op("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return custom_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return custom_op("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = as_tensor(x)
    return custom_op("scale", (x,), x.data * factor, lambda g: (g * factor,))


def sum_all(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return custom_op("sum", (x,), np.sum(x.data), lambda g: (np.full(x.shape, g, dtype=x.data.dtype),))


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from e
    return custom_op("reshape", (x,), data, lambda g: (g.reshape(x.shape),))


def concat_channels(tensors: Sequence[ArrayLike]) -> Tensor:
    """Concatenate along the leading (channel) axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    rest = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != rest:
            raise ShapeError(f"concat_channels: trailing shapes {rest} and {t.shape[1:]} differ")
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(grad: np.ndarray):
        return tuple(np.split(grad, bounds, axis=0))

    return custom_op("concat", tensors, np.concatenate([t.data for t in tensors], axis=0), _backward)


def nearest_upsample2x(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"nearest_upsample2x expects (C, H, W, D), got {x.shape}")
    c, h, w, d = x.shape
    data = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def _backward(grad: np.ndarray):
        return (grad.reshape(c, h, 2, w, 2, d, 2).sum(axis=(2, 4, 6)),)

    return custom_op("upsample", (x,), data, _backward)


def linear(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """y = W x + b for a vector x of shape (n,) and W of shape (m, n)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: weight {weight.shape} does not map input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    def _backward(grad: np.ndarray):
        return weight.data.T @ grad, np.outer(grad, x.data), grad

    return custom_op("linear", (x, weight, bias), weight.data @ x.data + bias.data, _backward)


def gate(features: ArrayLike, attention: ArrayLike) -> Tensor:
    """(A + 1) * F with a single-channel attention map broadcast over channels."""
    features, attention = as_tensor(features), as_tensor(attention)
    if attention.shape != (1,) + features.shape[1:]:
        raise ShapeError(f"gate: attention {attention.shape} does not match features {features.shape}")
    multiplier = attention.data + 1.0

    def _backward(grad: np.ndarray):
        return grad * multiplier, np.sum(grad * features.data, axis=0, keepdims=True)

    return custom_op("gate", (features, attention), multiplier * features.data, _backward)


def _check_pool_mode(mode: str) -> None:
    if mode not in POOL_MODES:
        raise ValueError(f"Unknown pooling mode '{mode}', expected one of {POOL_MODES}")


def pool_spatial(x: ArrayLike, mode: str) -> Tensor:
    """Reduce (C, H, W, D) over all spatial positions to (C,)."""
    x = as_tensor(x)
    _check_pool_mode(mode)
    flat = x.data.reshape(x.shape[0], -1)
    if mode == "max":
        idx = np.argmax(flat, axis=1)
        data = flat[np.arange(flat.shape[0]), idx]

        def _backward(grad: np.ndarray):
            g = np.zeros_like(flat)
            g[np.arange(flat.shape[0]), idx] = grad
            return (g.reshape(x.shape),)
    else:
        n = flat.shape[1]
        data = flat.sum(axis=1) / n

        def _backward(grad: np.ndarray):
            return (np.broadcast_to((grad / n)[:, None], flat.shape).reshape(x.shape).copy(),)

    return custom_op(f"pool_spatial_{mode}", (x,), data, _backward)


def pool_channel(x: ArrayLike, mode: str) -> Tensor:
    """Reduce (C, H, W, D) over channels to (1, H, W, D)."""
    x = as_tensor(x)
    _check_pool_mode(mode)
    c = x.shape[0]
    if mode == "max":
        idx = np.argmax(x.data, axis=0)
        data = np.take_along_axis(x.data, idx[None], axis=0)

        def _backward(grad: np.ndarray):
            g = np.zeros_like(x.data)
            np.put_along_axis(g, idx[None], grad, axis=0)
            return (g,)
    else:
        data = x.data.sum(axis=0, keepdims=True) / c

        def _backward(grad: np.ndarray):
            return (np.repeat(grad / c, c, axis=0),)

    return custom_op(f"pool_channel_{mode}", (x,), data, _backward)


def permute_spatial(x: ArrayLike, indices: Tuple[np.ndarray, np.ndarray, np.ndarray]) -> Tensor:
    """
    Gather along H, W and D: out[:, a, b, c] = x[:, ih[a], iw[b], id[c]].

    Each index array must be a permutation of its axis; the backward rule
    applies the inverse permutation to the upstream gradient.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"permute_spatial expects (C, H, W, D), got {x.shape}")
    inverses = []
    for axis, idx in enumerate(indices, start=1):
        idx = np.asarray(idx)
        if idx.shape != (x.shape[axis],) or not np.array_equal(np.sort(idx), np.arange(x.shape[axis])):
            raise ShapeError(f"permute_spatial: index array for axis {axis} is not a permutation of {x.shape[axis]}")
        inverses.append(np.argsort(idx))

    data = x.data
    for axis, idx in enumerate(indices, start=1):
        data = np.take(data, idx, axis=axis)

    def _backward(grad: np.ndarray):
        g = grad
        for axis, inv in enumerate(inverses, start=1):
            g = np.take(g, inv, axis=axis)
        return (g,)

    return custom_op("permute", (x,), data, _backward)
