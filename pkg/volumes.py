"""
Synthetic phantom volumes, raw+JSON volume files, cropping and dataset splits.

Phantoms stand in for annotated cardiac scans: a randomly posed ellipsoid with
one to three attached cylindrical protrusions, on a smooth textured background.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

import config

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int], np.random.Generator]

_DTYPES = {"f64": np.dtype("<f8"), "u8": np.dtype("u1")}
MIN_EXTENT = 16


class VolumeFormatError(ValueError):
    """Raised when a volume sidecar and its payload disagree."""


@dataclass
class VolumeSample:
    image: np.ndarray  # float64 (H, W, D)
    mask: np.ndarray   # uint8 (H, W, D), values 0/1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image shape {self.image.shape} and mask shape {self.mask.shape} differ")
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("mask must be binary (values 0 and 1 only)")
        self.meta.setdefault("spacing", config.DEFAULT_SPACING)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.image.shape

    @property
    def spacing(self) -> float:
        return float(self.meta["spacing"])

    @property
    def foreground_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class PhantomConfig:
    fg_intensity: float = 1.0
    bg_intensity: float = 0.0
    noise_sigma: float = 0.1          # relative to fg/bg contrast
    texture_amplitude: float = 0.05   # relative to fg/bg contrast
    texture_sigma: float = 2.0        # voxels
    min_axis: float = 0.15            # ellipsoid semi-axis, fraction of extent
    max_axis: float = 0.35
    max_rotation_deg: float = 20.0
    min_protrusions: int = 1
    max_protrusions: int = 3
    spacing: float = config.DEFAULT_SPACING

    def validate(self) -> None:
        if not 0 < self.min_axis <= self.max_axis < 0.5:
            raise ValueError(f"ellipsoid axis range must satisfy 0 < min <= max < 0.5, "
                             f"got [{self.min_axis}, {self.max_axis}]")
        if not 0 <= self.min_protrusions <= self.max_protrusions:
            raise ValueError("protrusion count range is invalid")
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise ValueError("noise and texture amplitudes must be non-negative")
        if self.spacing <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PhantomConfig":
        d = d or {}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom settings: {sorted(unknown)}")
        return cls(**d)


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _grid(shape: Tuple[int, int, int]) -> np.ndarray:
    """Voxel-center coordinates, shape (H, W, D, 3)."""
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"), axis=-1)


def _ellipsoid(coords: np.ndarray, center: np.ndarray, axes: np.ndarray, rotation: Rotation) -> np.ndarray:
    local = (coords - center) @ rotation.as_matrix()
    return np.sum((local / axes) ** 2, axis=-1) <= 1.0


def _cylinder(coords: np.ndarray, start: np.ndarray, direction: np.ndarray,
              length: float, radius: float) -> np.ndarray:
    rel = coords - start
    t = rel @ direction
    radial = rel - t[..., None] * direction
    return (t >= 0) & (t <= length) & (np.sum(radial ** 2, axis=-1) <= radius ** 2)


def _phantom(shape: Tuple[int, int, int], rng: np.random.Generator, cfg: PhantomConfig) -> np.ndarray:
    extent = np.asarray(shape, dtype=np.float64)
    coords = _grid(shape)

    axes = rng.uniform(cfg.min_axis, cfg.max_axis, size=3) * extent
    angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3)
    rotation = Rotation.from_euler("xyz", angles, degrees=True)
    # keep the ellipsoid's bounding box inside the volume where possible
    reach = np.sqrt(((rotation.as_matrix() * axes) ** 2).sum(axis=1))
    low = np.minimum(reach, extent / 2)
    high = np.maximum(extent - 1 - reach, extent / 2)
    center = rng.uniform(low, high)
    mask = _ellipsoid(coords, center, axes, rotation)

    min_extent = float(extent.min())
    for _ in range(rng.integers(cfg.min_protrusions, cfg.max_protrusions + 1)):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        body = rotation.inv().apply(direction)
        surface = rotation.apply(body / np.sqrt(np.sum((body / axes) ** 2)))
        radius = max(1.0, rng.uniform(0.04, 0.08) * min_extent)
        length = rng.uniform(0.15, 0.3) * min_extent
        start = center + surface - 0.3 * length * direction
        mask |= _cylinder(coords, start, direction, 1.3 * length, radius)
    return mask.astype(np.uint8)


def synth_generate(seed: int, count: int, shape: Sequence[int] = config.DEFAULT_VOLUME_SHAPE,
                   cfg: Optional[PhantomConfig] = None) -> List[VolumeSample]:
    """
    Generate phantom volumes.

    Args:
        seed: Base seed; sample i uses the RNG stream (seed, i)
        count: Number of samples (>= 1)
        shape: (H, W, D), each >= 16
        cfg: Phantom settings

    Returns:
        List of VolumeSample with meta {seed, index, spacing}
    """
    cfg = cfg or PhantomConfig()
    cfg.validate()
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or any(n < MIN_EXTENT for n in shape):
        raise ValueError(f"phantom shape must have three sizes >= {MIN_EXTENT}, got {shape}")
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")

    contrast = abs(cfg.fg_intensity - cfg.bg_intensity) or 1.0
    samples = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        mask = _phantom(shape, rng, cfg)
        texture = gaussian_filter(rng.standard_normal(shape), sigma=cfg.texture_sigma, mode="reflect")
        texture = texture / (np.abs(texture).max() or 1.0)
        image = np.where(mask == 1, cfg.fg_intensity, cfg.bg_intensity) + cfg.texture_amplitude * contrast * texture
        if cfg.noise_sigma > 0:
            image = image + rng.normal(0.0, cfg.noise_sigma * contrast, size=shape)
        samples.append(VolumeSample(image, mask, {"seed": seed, "index": index, "spacing": cfg.spacing}))
        logger.debug(f"Phantom {index}: foreground fraction {mask.mean():.3f}")
    return samples


def _crop(sample: VolumeSample, origin: Sequence[int], crop_shape: Sequence[int]) -> VolumeSample:
    window = tuple(slice(o, o + c) for o, c in zip(origin, crop_shape))
    meta = dict(sample.meta)
    meta["crop_origin"] = [int(o) for o in origin]
    return VolumeSample(sample.image[window].copy(), sample.mask[window].copy(), meta)


def _check_crop(sample: VolumeSample, crop_shape: Sequence[int]) -> Tuple[int, int, int]:
    crop_shape = tuple(int(c) for c in crop_shape)
    if len(crop_shape) != 3 or any(c < 1 for c in crop_shape):
        raise ValueError(f"crop shape must have three positive sizes, got {crop_shape}")
    if any(c > n for c, n in zip(crop_shape, sample.shape)):
        raise ValueError(f"crop shape {crop_shape} exceeds volume shape {sample.shape}")
    return crop_shape


def random_crop(sample: VolumeSample, crop_shape: Sequence[int], rng_seed: SeedLike) -> VolumeSample:
    """Crop at an origin drawn uniformly over all valid positions; may contain no foreground."""
    crop_shape = _check_crop(sample, crop_shape)
    rng = _rng(rng_seed)
    origin = [int(rng.integers(0, n - c + 1)) for n, c in zip(sample.shape, crop_shape)]
    return _crop(sample, origin, crop_shape)


def center_crop(sample: VolumeSample, crop_shape: Sequence[int], anchor: str = "volume") -> VolumeSample:
    """
    Deterministic crop centered on the volume ("volume") or on the mask
    centroid ("foreground"), clamped to stay inside the volume.
    """
    crop_shape = _check_crop(sample, crop_shape)
    if anchor == "volume":
        center = np.asarray(sample.shape, dtype=np.float64) / 2
    elif anchor == "foreground":
        if not sample.mask.any():
            raise ValueError("cannot center a crop on an empty mask")
        center = np.argwhere(sample.mask).mean(axis=0) + 0.5
    else:
        raise ValueError(f"Unknown crop anchor '{anchor}', expected 'volume' or 'foreground'")
    origin = [int(min(max(np.floor(m - c / 2), 0), n - c)) for m, c, n in zip(center, crop_shape, sample.shape)]
    return _crop(sample, origin, crop_shape)


# ---------------------------------------------------------------------------
# File format: <name>.json sidecar + <name>.raw little-endian payload
# ---------------------------------------------------------------------------

def _stem(path: str) -> str:
    for ext in (".json", ".raw"):
        if path.endswith(ext):
            return path[:-len(ext)]
    return path


def write_array(array: np.ndarray, path: str, meta: Optional[dict] = None) -> None:
    """Write one f64 or u8 array as a sidecar/payload pair."""
    stem = _stem(path)
    array = np.asarray(array)
    code = "u8" if array.dtype == np.uint8 else "f64"
    sidecar = {"shape": list(array.shape), "dtype": code}
    sidecar.update(meta or {})
    directory = os.path.dirname(stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(stem + ".raw", "wb") as f:
        f.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes(order="C"))
    with open(stem + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def read_array(path: str) -> Tuple[np.ndarray, dict]:
    """
    Read a sidecar/payload pair.

    Returns:
        (array, sidecar dict); f64 arrays come back as float64, u8 as uint8
    """
    stem = _stem(path)
    if not os.path.exists(stem + ".json"):
        raise FileNotFoundError(f"no volume sidecar at {stem}.json")
    with open(stem + ".json") as f:
        try:
            sidecar = json.load(f)
        except json.JSONDecodeError as e:
            raise VolumeFormatError(f"invalid sidecar {stem}.json: {e}") from e
    code = sidecar.get("dtype")
    if code not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {code!r} in {stem}.json (expected 'f64' or 'u8')")
    shape = tuple(int(n) for n in sidecar.get("shape", ()))
    expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize
    with open(stem + ".raw", "rb") as f:
        payload = f.read()
    if len(payload) != expected:
        raise VolumeFormatError(f"payload {stem}.raw has {len(payload)} bytes, "
                                f"sidecar shape {list(shape)} ({code}) expects {expected} bytes")
    array = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape)
    return array.astype(np.uint8 if code == "u8" else np.float64), sidecar


def save_volume(sample: VolumeSample, path: str) -> None:
    """Write image to <path>.json/.raw and mask to <path>_mask.json/.raw."""
    stem = _stem(path)
    meta = {
        "spacing": sample.spacing,
        "seed": sample.meta.get("seed"),
        "index": sample.meta.get("index"),
        "crop_origin": sample.meta.get("crop_origin"),
    }
    write_array(sample.image, stem, meta)
    write_array(sample.mask, stem + "_mask", meta)


def load_volume(path: str) -> VolumeSample:
    stem = _stem(path)
    image, sidecar = read_array(stem)
    mask, _ = read_array(stem + "_mask")
    if mask.shape != image.shape:
        raise VolumeFormatError(f"mask shape {mask.shape} does not match image shape {image.shape}")
    meta = {k: sidecar[k] for k in ("spacing", "seed", "index", "crop_origin") if sidecar.get(k) is not None}
    return VolumeSample(image, mask, meta)


def read_mask(path: str) -> np.ndarray:
    """
    Binary mask from a file: a u8 mask array, an f64 probability map
    (thresholded at 0.5), or a sample stem whose _mask companion exists.
    """
    stem = _stem(path)
    if os.path.exists(stem + "_mask.json"):
        stem = stem + "_mask"
    array, _ = read_array(stem)
    if array.dtype == np.uint8:
        if array.size and array.max() > 1:
            raise ValueError(f"{stem} is not a binary mask")
        return array
    return (array >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def write_dataset(samples: Sequence[VolumeSample], out_dir: str, extra: Optional[dict] = None) -> str:
    """Save every sample as case_NNN and write the manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    cases = []
    for i, sample in enumerate(samples):
        name = f"case_{i:03d}"
        save_volume(sample, os.path.join(out_dir, name))
        cases.append(name)
    manifest = {"count": len(cases), "cases": cases,
                "shape": list(samples[0].shape) if samples else [], **(extra or {})}
    manifest_path = os.path.join(out_dir, config.MANIFEST_NAME)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Wrote {len(cases)} volumes to {out_dir}")
    return manifest_path


def min_max_scale(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros_like(image, dtype=np.float64)
    return (image - lo) / (hi - lo)


def load_dataset(data_dir: str, scale: bool = True) -> List[VolumeSample]:
    """Load every case listed in a dataset manifest, min-max scaling images to [0, 1]."""
    manifest_path = os.path.join(data_dir, config.MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    samples = []
    for name in manifest.get("cases", []):
        sample = load_volume(os.path.join(data_dir, name))
        if scale:
            sample = VolumeSample(min_max_scale(sample.image), sample.mask, dict(sample.meta, case=name))
        else:
            sample.meta["case"] = name
        samples.append(sample)
    if not samples:
        raise ValueError(f"dataset at {data_dir} lists no cases")
    return samples


def split(samples: Sequence, train_fraction: float = 0.8, seed: int = 0) -> Tuple[list, list]:
    """
    Deterministic shuffled train/test split.

    The train part holds round(train_fraction * n) items; the two parts are
    disjoint and together contain every input item.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_fraction * len(samples)))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def phantom_config_dict(cfg: PhantomConfig) -> dict:
    return asdict(cfg)
