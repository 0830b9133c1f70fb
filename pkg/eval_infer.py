"""
Segmentation metrics and sliding-window inference.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial.distance import cdist

import config
import utils
from seg_net import ModelParams, predict
from tensor_core import ShapeError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["dice", "jaccard", "hd95", "assd"]
_CHUNK = 4096


def _binary_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes {a.shape} and {b.shape} differ")
    return a, b


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a & b| / (|a| + |b|); 1.0 when both masks are empty."""
    a, b = _binary_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; 1.0 when both masks are empty."""
    a, b = _binary_pair(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with at least one background 6-neighbour; outside the volume is background."""
    mask = np.asarray(mask).astype(bool)
    eroded = binary_erosion(mask, structure=generate_binary_structure(3, 1), border_value=0)
    return mask & ~eroded


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    out = np.empty(len(src))
    for start in range(0, len(src), _CHUNK):
        out[start:start + _CHUNK] = cdist(src[start:start + _CHUNK], dst).min(axis=1)
    return out


def surface_distances(a: np.ndarray, b: np.ndarray,
                      spacing: float = config.DEFAULT_SPACING) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest-surface distances in mm, both directions.

    Returns:
        (sorted distances a -> b, sorted distances b -> a)
    """
    a, b = _binary_pair(a, b)
    if not a.any() or not b.any():
        raise ValueError("undefined surface distance for empty mask")
    pts_a = np.argwhere(surface_voxels(a)) * float(spacing)
    pts_b = np.argwhere(surface_voxels(b)) * float(spacing)
    return np.sort(_directed(pts_a, pts_b)), np.sort(_directed(pts_b, pts_a))


def hd95(a: np.ndarray, b: np.ndarray, spacing: float = config.DEFAULT_SPACING) -> float:
    """95th percentile (linear interpolation) of the union of both directed distance lists."""
    d_ab, d_ba = surface_distances(a, b, spacing)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95, method="linear"))


def assd(a: np.ndarray, b: np.ndarray, spacing: float = config.DEFAULT_SPACING) -> float:
    d_ab, d_ba = surface_distances(a, b, spacing)
    return float(np.concatenate([d_ab, d_ba]).mean())


def binarize(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(p) >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# Sliding window
# ---------------------------------------------------------------------------

def window_origins(size: int, window: int, stride: int) -> List[int]:
    """Arithmetic progression by stride plus a final origin abutting the far boundary."""
    if window > size:
        raise ValueError(f"window {window} exceeds volume size {size}")
    if stride < 1:
        raise ValueError(f"stride must be at least 1, got {stride}")
    origins = list(range(0, size - window + 1, stride))
    if origins[-1] != size - window:
        origins.append(size - window)
    return origins


def _grid_origins(shape: Sequence[int], window: Sequence[int], stride: Sequence[int]) -> List[Tuple[int, int, int]]:
    per_dim = [window_origins(n, w, s) for n, w, s in zip(shape, window, stride)]
    return [(i, j, k) for i in per_dim[0] for j in per_dim[1] for k in per_dim[2]]


def coverage_counts(shape: Sequence[int], window: Sequence[int], stride: Sequence[int]) -> np.ndarray:
    """Number of windows covering each voxel."""
    counts = np.zeros(tuple(shape), dtype=np.int64)
    for o in _grid_origins(shape, window, stride):
        counts[o[0]:o[0] + window[0], o[1]:o[1] + window[1], o[2]:o[2] + window[2]] += 1
    return counts


def sliding_window_infer(params: Optional[ModelParams], volume: np.ndarray, window: Sequence[int],
                         stride: Optional[Sequence[int]] = None,
                         predictor: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                         workers: int = 1) -> np.ndarray:
    """
    Average window probabilities over a full volume.

    Args:
        params: Model parameters (ignored when predictor is given)
        volume: (H, W, D) intensity volume
        window: Window size per dim; must satisfy the network's divisibility
        stride: Stride per dim (default: half the window, at least 1)
        predictor: Window -> probabilities function replacing the network
        workers: Threads used for window predictions

    Returns:
        Probability volume of the input's shape
    """
    volume = np.asarray(volume, dtype=np.float64)
    window = tuple(int(w) for w in window)
    if volume.ndim != 3 or len(window) != 3:
        raise ShapeError(f"expected an (H, W, D) volume and a 3-d window, got {volume.shape} and {window}")
    if any(w > n for w, n in zip(window, volume.shape)):
        raise ValueError(f"window {window} exceeds volume shape {volume.shape}")
    stride = tuple(max(1, w // 2) for w in window) if stride is None else tuple(int(s) for s in stride)
    if predictor is None:
        if params is None:
            raise ValueError("either params or predictor is required")
        if any(w % params.arch.divisor for w in window):
            raise ShapeError(f"window {window} must be divisible by {params.arch.divisor}")
        predictor = lambda patch: predict(params, patch)

    origins = _grid_origins(volume.shape, window, stride)

    def _run(o):
        patch = volume[o[0]:o[0] + window[0], o[1]:o[1] + window[1], o[2]:o[2] + window[2]]
        return predictor(patch)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run, origins))
    else:
        outputs = [_run(o) for o in origins]

    prob_sum = np.zeros(volume.shape, dtype=np.float64)
    counts = np.zeros(volume.shape, dtype=np.int64)
    # fixed window order keeps the sum reproducible
    for o, out in zip(origins, outputs):
        region = (slice(o[0], o[0] + window[0]), slice(o[1], o[1] + window[1]), slice(o[2], o[2] + window[2]))
        prob_sum[region] += out
        counts[region] += 1
    logger.debug(f"Sliding window: {len(origins)} windows of {window}, stride {stride}")
    return prob_sum / counts


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def case_metrics(pred: np.ndarray, truth: np.ndarray, spacing: float = config.DEFAULT_SPACING) -> Dict[str, float]:
    """All four metrics; surface metrics are NaN when either mask is empty."""
    pred, truth = _binary_pair(pred, truth)
    row = {"dice": dice(pred, truth), "jaccard": jaccard(pred, truth)}
    if pred.any() and truth.any():
        d_ab, d_ba = surface_distances(pred, truth, spacing)
        union = np.concatenate([d_ab, d_ba])
        row["hd95"] = float(np.percentile(union, 95, method="linear"))
        row["assd"] = float(union.mean())
    else:
        logger.warning("Empty prediction or ground truth: HD95 and ASSD recorded as NaN")
        row["hd95"] = float("nan")
        row["assd"] = float("nan")
    return row


@dataclass
class MetricsReport:
    run_config: dict = field(default_factory=dict)
    cases: List[dict] = field(default_factory=list)

    def add_case(self, case_id: str, pred: np.ndarray, truth: np.ndarray,
                 spacing: float = config.DEFAULT_SPACING) -> dict:
        row = {"case": case_id, **case_metrics(pred, truth, spacing)}
        self.cases.append(row)
        return row

    def case_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.cases, columns=["case"] + METRIC_COLUMNS)

    def summary(self) -> Dict[str, Dict[str, float]]:
        """Mean and (population) std per metric, ignoring NaN."""
        df = self.case_frame()
        return {m: {"mean": float(df[m].mean()), "std": float(df[m].std(ddof=0))} for m in METRIC_COLUMNS}

    def to_frame(self) -> pd.DataFrame:
        """Per-case rows followed by 'mean' and 'std' aggregate rows."""
        df = self.case_frame()
        summary = self.summary()
        aggregates = pd.DataFrame([
            {"case": "mean", **{m: summary[m]["mean"] for m in METRIC_COLUMNS}},
            {"case": "std", **{m: summary[m]["std"] for m in METRIC_COLUMNS}},
        ])
        return pd.concat([df, aggregates], ignore_index=True)

    def to_dict(self) -> dict:
        def _clean(v):
            return None if isinstance(v, float) and np.isnan(v) else v

        return {
            "config": self.run_config,
            "cases": [{k: _clean(v) for k, v in row.items()} for row in self.cases],
            "aggregate": {m: {k: _clean(v) for k, v in s.items()} for m, s in self.summary().items()},
        }

    def save_json(self, path: str) -> None:
        utils.save_json(self.to_dict(), path)

    def save_csv(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
