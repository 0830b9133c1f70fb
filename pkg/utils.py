import json
import os
from typing import Any, Tuple, Union

import numpy as np


def parse_shape(text: str) -> Tuple[int, int, int]:
    """
    Parse an "HxWxD" string.

    Args:
        text: Shape such as "64x64x32"

    Returns:
        (H, W, D) as positive integers
    """
    parts = text.lower().replace(" ", "").split("x")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"invalid shape '{text}', expected HxWxD") from None
    if len(shape) != 3 or any(n < 1 for n in shape):
        raise ValueError(f"invalid shape '{text}', expected three positive sizes HxWxD")
    return shape


def format_shape(shape) -> str:
    return "x".join(str(int(n)) for n in shape)


def get_file_size(file: Union[str, Any]) -> str:
    """
    Get human-readable file size.

    Args:
        file: A path, or an object with getvalue() (e.g. a Streamlit upload)

    Returns:
        Formatted file size string
    """
    size_bytes = float(os.path.getsize(file) if isinstance(file, str) else len(file.getvalue()))

    for unit in ['B', 'KB', 'MB', 'GB']:
        if size_bytes < 1024.0:
            return f"{size_bytes:.2f} {unit}"
        size_bytes /= 1024.0

    return f"{size_bytes:.2f} TB"


def slice_to_uint8(volume: np.ndarray, axis: int = 2, index: int = None) -> np.ndarray:
    """
    Extract one 2D slice and rescale it to 0..255 for display.

    Args:
        volume: (H, W, D) array
        axis: Slicing axis
        index: Slice index (default: middle slice)

    Returns:
        uint8 image; a constant slice maps to all zeros
    """
    volume = np.asarray(volume, dtype=np.float64)
    if index is None:
        index = volume.shape[axis] // 2
    if not 0 <= index < volume.shape[axis]:
        raise IndexError(f"slice {index} outside axis {axis} of size {volume.shape[axis]}")
    plane = np.take(volume, index, axis=axis)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.rint(255.0 * (plane - lo) / (hi - lo)).astype(np.uint8)


def load_json(path: str) -> Any:
    with open(path) as f:
        return json.load(f)


def save_json(data: Any, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
