"""
Shuffle-then-reorder position transform.

Each spatial dimension of size n = g * r is permuted by the kappa index map
kappa(i) = ((i - 1) mod g) * r + floor((i - 1) / g) + 1, which is the
transpose of an (r, g) index grid. Shuffling scatters element i to position
kappa(i); reordering gathers it back.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from tensor_core import ArrayLike, ShapeError, Tensor, as_tensor, permute_spatial

DIM_NAMES = ("h", "w", "d")

# Ratios the attention head can choose from, per dimension
RATIO_CANDIDATES = (1, 2, 4, 8, 16)


def kappa(i: int, groups: int, ratio: int) -> int:
    """
    Shuffled position of 1-based index i.

    Args:
        i: 1-based index, 1 <= i <= groups * ratio
        groups: Number of groups g
        ratio: Shuffle ratio r

    Returns:
        1-based shuffled index
    """
    if groups < 1 or ratio < 1:
        raise ValueError(f"groups and ratio must be positive, got g={groups}, r={ratio}")
    if not 1 <= i <= groups * ratio:
        raise ValueError(f"index {i} outside [1, {groups * ratio}]")
    return ((i - 1) % groups) * ratio + (i - 1) // groups + 1


def kappa_table(size: int, ratio: int) -> np.ndarray:
    """kappa(i) for i = 1..size as a 1-based integer array."""
    groups = size // ratio
    i = np.arange(size)
    return (i % groups) * ratio + i // groups + 1


@dataclass(frozen=True)
class DimPlan:
    size: int
    ratio: int
    groups: int
    forward: np.ndarray  # gather indices for shuffle (0-based)
    inverse: np.ndarray  # gather indices for reorder (0-based)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.forward, np.arange(self.size)))


@dataclass(frozen=True)
class ShufflePlan:
    dims: Tuple[DimPlan, DimPlan, DimPlan]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(p.size for p in self.dims)

    @property
    def ratios(self) -> Tuple[int, int, int]:
        return tuple(p.ratio for p in self.dims)

    @property
    def is_identity(self) -> bool:
        return all(p.is_identity for p in self.dims)


def _dim_plan(name: str, size: int, ratio: int) -> DimPlan:
    if size < 1:
        raise ValueError(f"dimension {name} must be positive, got {size}")
    if ratio < 1 or size % ratio:
        raise ValueError(f"shuffle ratio {ratio} does not divide dimension {name} of size {size}")
    inverse = kappa_table(size, ratio) - 1
    forward = np.argsort(inverse)
    inverse.setflags(write=False)
    forward.setflags(write=False)
    return DimPlan(size=size, ratio=ratio, groups=size // ratio, forward=forward, inverse=inverse)


def build_plan(shape: Sequence[int], ratios: Sequence[int]) -> ShufflePlan:
    """
    Precompute the per-dimension permutations for a spatial shape.

    Args:
        shape: (H, W, D)
        ratios: (r_h, r_w, r_d), each dividing its dimension

    Returns:
        An immutable ShufflePlan
    """
    if len(shape) != 3 or len(ratios) != 3:
        raise ValueError(f"expected three spatial sizes and ratios, got {tuple(shape)} and {tuple(ratios)}")
    return ShufflePlan(dims=tuple(_dim_plan(n, int(s), int(r)) for n, s, r in zip(DIM_NAMES, shape, ratios)))


def _check_plan(x: Tensor, plan: ShufflePlan, op_name: str) -> None:
    if x.data.ndim != 4 or x.shape[1:] != plan.shape:
        raise ShapeError(f"{op_name}: tensor shape {x.shape} does not match plan shape {plan.shape}")


def shuffle(features: ArrayLike, plan: ShufflePlan) -> Tensor:
    """Move every element at 1-based position i to position kappa(i), per spatial dim."""
    features = as_tensor(features)
    _check_plan(features, plan, "shuffle")
    if plan.is_identity:
        return features
    return permute_spatial(features, tuple(p.forward for p in plan.dims))


def reorder(shuffled: ArrayLike, plan: ShufflePlan) -> Tensor:
    """Inverse of shuffle: restore original spatial positions."""
    shuffled = as_tensor(shuffled)
    _check_plan(shuffled, plan, "reorder")
    if plan.is_identity:
        return shuffled
    return permute_spatial(shuffled, tuple(p.inverse for p in plan.dims))


def transpose_shuffle(array: np.ndarray, plan: ShufflePlan) -> np.ndarray:
    """
    Shuffle a (C, H, W, D) array by reshape and transpose instead of a gather.

    Along each dimension the axis is viewed as an (r, g) grid and transposed
    to (g, r). Produces exactly the same result as shuffle().
    """
    out = np.asarray(array)
    for axis, p in enumerate(plan.dims, start=1):
        moved = np.moveaxis(out, axis, 0)
        grid = moved.reshape((p.ratio, p.groups) + moved.shape[1:])
        moved = np.swapaxes(grid, 0, 1).reshape(moved.shape)
        out = np.moveaxis(moved, 0, axis)
    return np.ascontiguousarray(out)


def candidate_menu(size: int, candidates: Sequence[int] = RATIO_CANDIDATES) -> List[int]:
    """Candidate ratios for one dimension: 1 plus the candidates dividing the size."""
    return [r for r in candidates if r == 1 or size % r == 0]


def menu_for_shape(shape: Sequence[int]) -> Tuple[List[int], List[int], List[int]]:
    return tuple(candidate_menu(int(n)) for n in shape)


def menu_logits(full_logits: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """
    Pick the logits of the candidates valid for `shape` out of a head output
    covering RATIO_CANDIDATES for each of the three dimensions.
    """
    full_logits = np.asarray(full_logits).reshape(-1)
    n = len(RATIO_CANDIDATES)
    if full_logits.shape[0] != 3 * n:
        raise ShapeError(f"expected {3 * n} ratio logits, got {full_logits.shape[0]}")
    picked = []
    for dim, size in enumerate(shape):
        for j, r in enumerate(RATIO_CANDIDATES):
            if r == 1 or size % r == 0:
                picked.append(full_logits[dim * n + j])
    return np.asarray(picked)


def select_ratios(logits: ArrayLike, dim_sizes: Sequence[int],
                  menu: Sequence[Sequence[int]]) -> Tuple[int, int, int]:
    """
    Hard argmax over each dimension's candidate ratios.

    Args:
        logits: Flat logits, one per candidate, in h, w, d order
        dim_sizes: (H, W, D)
        menu: Candidate ratio list per dimension

    Returns:
        (r_h, r_w, r_d); ties go to the lowest ratio, an empty menu yields 1
    """
    values = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=float).reshape(-1)
    total = sum(len(m) for m in menu)
    if values.shape[0] != total:
        raise ShapeError(f"got {values.shape[0]} logits for a menu of {total} candidates")

    ratios = []
    offset = 0
    for name, size, options in zip(DIM_NAMES, dim_sizes, menu):
        options = [int(r) for r in options]
        for r in options:
            if size % r:
                raise ValueError(f"menu ratio {r} does not divide dimension {name} of size {size}")
        if not options:
            ratios.append(1)
            continue
        block = values[offset:offset + len(options)]
        offset += len(options)
        best = max(block)
        ratios.append(min(r for r, v in zip(options, block) if v == best))
    return tuple(ratios)
