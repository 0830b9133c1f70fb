"""
Dual fine-grained boundary (DFB) weighting and the segmentation losses.

The DFB map gives every voxel 1 + the number of opposite-label voxels in its
k x k x k neighborhood, so interior voxels weigh 1 and boundary voxels on
either side of the surface weigh more. The DFB loss is a soft Dice with
those weights on both sums; the total loss adds binary cross-entropy.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

import config
import tensor_core as tc
from tensor_core import ArrayLike, ShapeError, Tensor


@dataclass(frozen=True, eq=False)
class DfbMap:
    weights: np.ndarray  # (H, W, D), values in [1, k^3]
    k: int
    mask: np.ndarray

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor
    boundary: Optional[Tensor]

    def as_floats(self) -> dict:
        return {
            "total": self.total.item(),
            "ce": self.ce.item(),
            "boundary": self.boundary.item() if self.boundary is not None else 0.0,
        }


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeError(f"expected an (H, W, D) mask, got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (values 0 and 1 only)")
    return mask


def _check_k(k: int) -> None:
    if k < 3 or k % 2 == 0:
        raise ValueError(f"neighborhood size k must be odd and >= 3, got {k}")


def neighbor_count(mask: np.ndarray, k: int) -> np.ndarray:
    """
    Foreground voxels in the k^3 neighborhood of each voxel, center included.

    Computed as a conv3d with an all-ones kernel and replicate padding, so
    neighborhoods at the volume border are filled with copies of the border.
    """
    mask = _check_mask(mask)
    _check_k(k)
    dtype = tc.get_dtype()
    ones = np.ones((1, 1, k, k, k), dtype=dtype)
    counts = tc.conv3d(mask[None].astype(dtype), ones, np.zeros(1, dtype=dtype), padding="replicate").data[0]
    return np.rint(counts)


def dfb_map(mask: np.ndarray, k: int = config.DEFAULT_DFB_K) -> DfbMap:
    """
    Build the DFB weight map for a binary mask.

    Args:
        mask: Binary ground truth (H, W, D)
        k: Odd neighborhood size

    Returns:
        DfbMap with w = k^3 - count + 1 on foreground and count + 1 on background
    """
    mask = _check_mask(mask)
    counts = neighbor_count(mask, k)
    weights = np.where(mask == 1, k ** 3 - counts + 1, counts + 1).astype(tc.get_dtype())
    return DfbMap(weights=weights, k=k, mask=mask)


def edge_weights(mask: np.ndarray, k: int = 3, boundary_weight: float = 2.0) -> np.ndarray:
    """
    Single-sided uniform boundary weights: foreground voxels with at least one
    background voxel in their k^3 neighborhood get boundary_weight, all else 1.
    """
    mask = _check_mask(mask)
    counts = neighbor_count(mask, k)
    on_edge = (mask == 1) & (counts < k ** 3)
    return np.where(on_edge, boundary_weight, 1.0).astype(tc.get_dtype())


def _weights_array(weights) -> np.ndarray:
    return weights.weights if isinstance(weights, DfbMap) else np.asarray(weights, dtype=tc.get_dtype())


def _check_loss_inputs(p: Tensor, g: np.ndarray, w: Optional[np.ndarray] = None) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match mask shape {g.shape}")
    if w is not None and w.shape != g.shape:
        raise ShapeError(f"weight shape {w.shape} does not match mask shape {g.shape}")


def weighted_dice_grad(p: np.ndarray, g: np.ndarray, w: np.ndarray,
                       eps: float = config.DEFAULT_EPSILON) -> np.ndarray:
    """
    d(loss)/d(p_i) of the weighted soft Dice:
    -2 w_i g_i / S_den + 2 S_num w_i / S_den^2
    """
    s_num = np.sum(w * p * g) + eps
    s_den = np.sum(w * p + w * g) + eps
    return -2.0 * w * g / s_den + 2.0 * s_num * w / s_den ** 2


def weighted_dice_loss(p: ArrayLike, g: np.ndarray, w: np.ndarray,
                       eps: float = config.DEFAULT_EPSILON) -> Tensor:
    """
    1 - 2 (sum w p g + eps) / (sum (w p + w g) + eps), differentiable in p.
    Weights are constants.
    """
    p = tc.as_tensor(p)
    g = np.asarray(g, dtype=p.data.dtype)
    w = np.asarray(w, dtype=p.data.dtype)
    _check_loss_inputs(p, g, w)
    s_num = np.sum(w * p.data * g) + eps
    s_den = np.sum(w * p.data + w * g) + eps
    value = 1.0 - 2.0 * s_num / s_den

    def _backward(grad: np.ndarray):
        return (grad * weighted_dice_grad(p.data, g, w, eps),)

    return tc.custom_op("weighted_dice", (p,), value, _backward)


def dfb_loss(p: ArrayLike, g: np.ndarray, w, eps: float = config.DEFAULT_EPSILON) -> Tensor:
    """
    DFB loss of a probability map against a binary mask.

    Args:
        p: Probabilities in [0, 1], same shape as g
        g: Binary ground truth
        w: DfbMap (or a raw weight array)
        eps: Smoothing constant

    Returns:
        Scalar loss (<= 1); -1 for an empty mask predicted as all zeros
    """
    return weighted_dice_loss(p, g, _weights_array(w), eps)


def dfb_loss_grad(p: ArrayLike, g: np.ndarray, w, eps: float = config.DEFAULT_EPSILON) -> np.ndarray:
    """Per-voxel analytic gradient of dfb_loss with respect to p."""
    p = tc.as_tensor(p)
    g = np.asarray(g, dtype=p.data.dtype)
    weights = _weights_array(w)
    _check_loss_inputs(p, g, weights)
    return weighted_dice_grad(p.data, g, weights, eps)


def ce_loss(p: ArrayLike, g: np.ndarray, clamp: float = config.CE_CLAMP) -> Tensor:
    """Mean binary cross-entropy with p clamped to [clamp, 1 - clamp]."""
    p = tc.as_tensor(p)
    g = np.asarray(g, dtype=p.data.dtype)
    _check_loss_inputs(p, g)
    pc = np.clip(p.data, clamp, 1.0 - clamp)
    n = p.size
    value = -np.mean(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc))
    inside = (p.data >= clamp) & (p.data <= 1.0 - clamp)

    def _backward(grad: np.ndarray):
        d = (-g / pc + (1.0 - g) / (1.0 - pc)) / n
        return (grad * np.where(inside, d, 0.0),)

    return tc.custom_op("ce", (p,), value, _backward)


def loss_terms(p: ArrayLike, g: np.ndarray, k: int = config.DEFAULT_DFB_K,
               eps: float = config.DEFAULT_EPSILON, weights=None) -> LossTerms:
    """
    CE plus DFB loss, keeping both components.

    Args:
        p: Probabilities
        g: Binary ground truth
        k: DFB neighborhood size (ignored when weights are given)
        eps: Dice smoothing constant
        weights: Precomputed DfbMap or weight array

    Returns:
        LossTerms with total = ce + boundary
    """
    p = tc.as_tensor(p)
    if weights is None:
        weights = dfb_map(g, k)
    ce = ce_loss(p, g)
    boundary = dfb_loss(p, g, weights, eps)
    return LossTerms(total=tc.add(ce, boundary), ce=ce, boundary=boundary)


def total_loss(p: ArrayLike, g: np.ndarray, k: int = config.DEFAULT_DFB_K,
               eps: float = config.DEFAULT_EPSILON) -> Tensor:
    """ce_loss + dfb_loss with w = dfb_map(g, k); w carries no gradient."""
    return loss_terms(p, g, k, eps).total
