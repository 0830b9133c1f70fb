"""
Shuffle-then-Reorder Attention Module (SRAM).

A spatial-attention block whose attention conv runs on a shuffled copy of
the pooled descriptor. Shuffle ratios come from a linear head over the
channel descriptor and are chosen afresh on every forward pass.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

import tensor_core as tc
from position_transform import (RATIO_CANDIDATES, build_plan, menu_for_shape, menu_logits,
                                reorder, select_ratios, shuffle)
from tensor_core import ArrayLike, ShapeError, Tensor

DEFAULT_ATTENTION_KERNEL = 7


@dataclass
class SramParams:
    head_weight: np.ndarray  # (3 * len(RATIO_CANDIDATES), 2C)
    head_bias: np.ndarray    # (3 * len(RATIO_CANDIDATES),)
    conv_weight: np.ndarray  # (1, 2, k_a, k_a, k_a)
    conv_bias: np.ndarray    # (1,)

    @property
    def channels(self) -> int:
        return self.head_weight.shape[1] // 2

    @property
    def kernel_size(self) -> int:
        return self.conv_weight.shape[-1]

    def as_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {
            f"{prefix}head_weight": self.head_weight,
            f"{prefix}head_bias": self.head_bias,
            f"{prefix}conv_weight": self.conv_weight,
            f"{prefix}conv_bias": self.conv_bias,
        }


def init_sram(channels: int, rng: np.random.Generator,
              kernel_size: int = DEFAULT_ATTENTION_KERNEL,
              head_scale: float = 0.0) -> SramParams:
    """
    Fresh SRAM parameters: fan-in uniform attention conv and zero conv bias.

    The ratio head is zero unless head_scale > 0, so by default every ratio
    starts at the identity tie-break. Ratio choice is a hard argmax and the
    head never receives a gradient; a non-zero head_scale gives it random
    fixed weights so ratios still vary with the input.
    """
    if channels < 1:
        raise ValueError(f"SRAM needs at least one channel, got {channels}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"attention kernel size must be odd, got {kernel_size}")
    dtype = tc.get_dtype()
    n_logits = 3 * len(RATIO_CANDIDATES)
    fan_in = 2 * kernel_size ** 3
    bound = np.sqrt(6.0 / fan_in)
    return SramParams(
        head_weight=(head_scale * rng.standard_normal((n_logits, 2 * channels))).astype(dtype),
        head_bias=np.zeros(n_logits, dtype=dtype),
        conv_weight=rng.uniform(-bound, bound, size=(1, 2, kernel_size, kernel_size, kernel_size)).astype(dtype),
        conv_bias=np.zeros(1, dtype=dtype),
    )


def channel_descriptor(features: ArrayLike) -> Tensor:
    """Per-channel spatial max followed by per-channel spatial mean, shape (2C,)."""
    return tc.concat_channels([tc.pool_spatial(features, "max"), tc.pool_spatial(features, "avg")])


def spatial_descriptor(features: ArrayLike) -> Tensor:
    """Per-voxel channel max (channel 0) and channel mean (channel 1), shape (2, H, W, D)."""
    return tc.concat_channels([tc.pool_channel(features, "max"), tc.pool_channel(features, "avg")])


def compute_ratios(features: ArrayLike, params: SramParams) -> Tuple[int, int, int]:
    """Shuffle ratios chosen by the ratio head for this input."""
    features = tc.as_tensor(features)
    logits = tc.linear(channel_descriptor(features.data), params.head_weight, params.head_bias).data
    shape = features.shape[1:]
    return select_ratios(menu_logits(logits, shape), shape, menu_for_shape(shape))


def sram_forward(features: ArrayLike, params: SramParams,
                 ratios: Optional[Sequence[int]] = None,
                 param_tensors: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """
    Refine features with shuffle-then-reorder spatial attention.

    Args:
        features: F_org of shape (C, H, W, D)
        params: SRAM parameters
        ratios: Fixed (r_h, r_w, r_d); chosen by the ratio head when omitted
        param_tensors: Taped leaves for conv_weight / conv_bias (training)

    Returns:
        (A + 1) * F_org, same shape as the input
    """
    features = tc.as_tensor(features)
    if features.data.ndim != 4:
        raise ShapeError(f"SRAM expects (C, H, W, D) features, got {features.shape}")
    if features.shape[0] != params.channels:
        raise ShapeError(f"SRAM built for {params.channels} channels, got features {features.shape}")
    if ratios is None:
        ratios = compute_ratios(features, params)
    plan = build_plan(features.shape[1:], ratios)

    conv_weight = params.conv_weight
    conv_bias = params.conv_bias
    if param_tensors is not None:
        conv_weight = param_tensors.get("conv_weight", conv_weight)
        conv_bias = param_tensors.get("conv_bias", conv_bias)

    descriptor = shuffle(spatial_descriptor(features), plan)
    logits = tc.conv3d(descriptor, conv_weight, conv_bias, stride=1, padding="zero")
    attention = tc.sigmoid(reorder(logits, plan))
    return tc.gate(features, attention)

