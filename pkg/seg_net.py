"""
Small VNet-style 3D encoder-decoder with optional SRAM blocks, plus the
versioned binary checkpoint codec.

Each resolution level has two 3x3x3 convs with an additive residual, the
encoder downsamples with stride-2 convs, the decoder upsamples by nearest
neighbour followed by a conv and adds the matching encoder output. A 1x1x1
conv and a sigmoid produce per-voxel foreground probabilities.
"""

import json
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import config
import tensor_core as tc
from sram_attention import DEFAULT_ATTENTION_KERNEL, SramParams, compute_ratios, init_sram, sram_forward
from tensor_core import ArrayLike, ShapeError, Tape, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DPBN"
FORMAT_VERSION = 1
SRAM_FIELDS = ("head_weight", "head_bias", "conv_weight", "conv_bias")


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


@dataclass
class ArchSpec:
    stages: int = 3
    channels: Tuple[int, ...] = (8, 16, 32)
    sram_flags: Tuple[bool, ...] = (True, True, True)
    sram_kernel: int = DEFAULT_ATTENTION_KERNEL
    ratio_head_scale: float = 1.0
    dfb_k: int = config.DEFAULT_DFB_K
    in_channels: int = 1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.sram_flags = tuple(bool(f) for f in self.sram_flags)

    def validate(self) -> None:
        if self.stages < 2:
            raise ValueError(f"architecture needs at least 2 stages, got {self.stages}")
        if len(self.channels) != self.stages or any(c < 1 for c in self.channels):
            raise ValueError(f"need {self.stages} positive channel widths, got {self.channels}")
        if len(self.sram_flags) != self.stages:
            raise ValueError(f"need {self.stages} SRAM flags, got {self.sram_flags}")
        if self.sram_kernel < 1 or self.sram_kernel % 2 == 0:
            raise ValueError(f"SRAM kernel size must be odd, got {self.sram_kernel}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be positive, got {self.in_channels}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["sram_flags"] = list(self.sram_flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ModelParams:
    arch: ArchSpec
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def sram(self, stage: int) -> Optional[SramParams]:
        if not self.arch.sram_flags[stage]:
            return None
        prefix = f"enc{stage}.sram."
        return SramParams(**{name: self.tensors[prefix + name] for name in SRAM_FIELDS})

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(ArchSpec.from_dict(self.arch.to_dict()),
                           OrderedDict((k, v.copy()) for k, v in self.tensors.items()))


def param_shapes(arch: ArchSpec) -> "OrderedDict[str, Tuple[int, ...]]":
    """Expected parameter names and shapes, in canonical order."""
    arch.validate()
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    ch = arch.channels

    def conv(name: str, c_out: int, c_in: int, k: int = 3):
        shapes[f"{name}.weight"] = (c_out, c_in, k, k, k)
        shapes[f"{name}.bias"] = (c_out,)

    for s in range(arch.stages):
        if s > 0:
            conv(f"down{s - 1}", ch[s], ch[s - 1])
        conv(f"enc{s}.conv_a", ch[s], arch.in_channels if s == 0 else ch[s])
        conv(f"enc{s}.conv_b", ch[s], ch[s])
        if arch.sram_flags[s]:
            n_logits = 15
            k = arch.sram_kernel
            shapes[f"enc{s}.sram.head_weight"] = (n_logits, 2 * ch[s])
            shapes[f"enc{s}.sram.head_bias"] = (n_logits,)
            shapes[f"enc{s}.sram.conv_weight"] = (1, 2, k, k, k)
            shapes[f"enc{s}.sram.conv_bias"] = (1,)
    for s in reversed(range(arch.stages - 1)):
        conv(f"up{s}", ch[s], ch[s + 1])
        conv(f"dec{s}.conv_a", ch[s], ch[s])
        conv(f"dec{s}.conv_b", ch[s], ch[s])
    conv("head", 1, ch[0], k=1)
    return shapes


def check_params(params: ModelParams) -> None:
    expected = param_shapes(params.arch)
    if list(expected) != list(params.tensors):
        missing = sorted(set(expected) - set(params.tensors))
        extra = sorted(set(params.tensors) - set(expected))
        raise ShapeError(f"parameters do not match architecture (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params.tensors[name].shape != shape:
            raise ShapeError(f"parameter {name} has shape {params.tensors[name].shape}, expected {shape}")


def init_model(arch: ArchSpec, seed: int) -> ModelParams:
    """
    Deterministic parameter initialization.

    Conv weights are fan-in scaled uniform, biases zero; SRAM blocks follow
    init_sram. The same (arch, seed) always gives bitwise-identical tensors.
    """
    shapes = param_shapes(arch)
    rng = np.random.default_rng(seed)
    dtype = tc.get_dtype()
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in shapes.items():
        if ".sram." in name:
            if name.endswith("head_weight"):
                stage = int(name[3:name.index(".")])
                sram = init_sram(arch.channels[stage], rng, arch.sram_kernel, arch.ratio_head_scale)
                tensors.update(sram.as_dict(prefix=name[:-len("head_weight")]))
            continue
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in) if name == "head.weight" else np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    # keep canonical order
    params = ModelParams(arch, OrderedDict((name, tensors[name]) for name in shapes))
    logger.debug(f"Initialized model with {params.count()} parameters (seed {seed})")
    return params


def _block(h: Tensor, p: Dict[str, ArrayLike], prefix: str) -> Tensor:
    a = tc.relu(tc.conv3d(h, p[f"{prefix}.conv_a.weight"], p[f"{prefix}.conv_a.bias"]))
    b = tc.conv3d(a, p[f"{prefix}.conv_b.weight"], p[f"{prefix}.conv_b.bias"])
    return tc.relu(tc.add(b, a))


def forward(params: ModelParams, x: ArrayLike, tape: Optional[Tape] = None,
            ratios: Optional[Dict[int, Tuple[int, int, int]]] = None,
            trace: Optional[Dict[int, Tuple[int, int, int]]] = None) -> Tensor:
    """
    Per-voxel foreground probabilities for one volume.

    Args:
        params: Model parameters
        x: Input of shape (in_channels, H, W, D); H, W, D divisible by 2^(stages-1)
        tape: When given, parameters are registered as named leaves and every op is recorded
        ratios: Per-stage shuffle ratios to use instead of the ratio heads' choice
        trace: Filled with the shuffle ratios used at each SRAM stage

    Returns:
        Probability tensor of shape (H, W, D)
    """
    arch = params.arch
    x = tc.as_tensor(x)
    if x.data.ndim != 4 or x.shape[0] != arch.in_channels:
        raise ShapeError(f"expected input of shape ({arch.in_channels}, H, W, D), got {x.shape}")
    if any(n % arch.divisor for n in x.shape[1:]):
        raise ShapeError(f"spatial shape {x.shape[1:]} must be divisible by {arch.divisor} "
                         f"for a {arch.stages}-stage network")

    if tape is not None:
        p = OrderedDict((name, tape.watch(value, name)) for name, value in params.tensors.items())
    else:
        p = params.tensors

    skips: List[Tensor] = []
    h = x
    for s in range(arch.stages):
        if s > 0:
            h = tc.relu(tc.conv3d(h, p[f"down{s - 1}.weight"], p[f"down{s - 1}.bias"], stride=2))
        h = _block(h, p, f"enc{s}")
        sram = params.sram(s)
        if sram is not None:
            stage_ratios = ratios.get(s) if ratios else None
            if stage_ratios is None:
                stage_ratios = compute_ratios(h, sram)
            if trace is not None:
                trace[s] = tuple(stage_ratios)
            leaves = {name: p[f"enc{s}.sram.{name}"] for name in ("conv_weight", "conv_bias")}
            h = sram_forward(h, sram, ratios=stage_ratios, param_tensors=leaves)
        skips.append(h)

    for s in reversed(range(arch.stages - 1)):
        up = tc.relu(tc.conv3d(tc.nearest_upsample2x(h), p[f"up{s}.weight"], p[f"up{s}.bias"]))
        h = _block(tc.add(up, skips[s]), p, f"dec{s}")

    prob = tc.sigmoid(tc.conv3d(h, p["head.weight"], p["head.bias"]))
    return tc.reshape(prob, prob.shape[1:])


def predict(params: ModelParams, volume: np.ndarray) -> np.ndarray:
    """Tape-free forward on an (H, W, D) intensity volume."""
    return forward(params, np.asarray(volume)[None]).data


# ---------------------------------------------------------------------------
# Checkpoint codec
# ---------------------------------------------------------------------------

def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    name_bytes = name.encode("utf-8")
    parts = [struct.pack("<I", len(name_bytes)), name_bytes, struct.pack("<I", array.ndim)]
    parts.extend(struct.pack("<I", n) for n in array.shape)
    parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path: str, extra: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> None:
    """
    Write a checkpoint.

    Layout: b"DPBN", u32 version, u32 length + UTF-8 JSON descriptor
    ({"arch": ..., "meta": ...}), u32 tensor count, then per tensor u32 name
    length + name, u32 ndim, ndim x u32 dims, little-endian float64 data.

    Args:
        params: Model parameters
        path: Output file
        extra: Additional named tensors (e.g. optimizer moments)
        meta: JSON-serializable metadata stored in the descriptor
    """
    check_params(params)
    tensors = OrderedDict(params.tensors)
    for name, array in (extra or {}).items():
        if name in tensors:
            raise ValueError(f"extra tensor name '{name}' collides with a parameter")
        tensors[name] = array
    descriptor = json.dumps({"arch": params.arch.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")

    body = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(descriptor)), descriptor,
            struct.pack("<I", len(tensors))]
    body.extend(_encode_tensor(name, array) for name, array in tensors.items())

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(b"".join(body))
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.offset}, "
                                  f"file has {len(self.buf)} bytes")
        chunk = self.buf[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path: str) -> Tuple[ArchSpec, "OrderedDict[str, np.ndarray]", dict]:
    """
    Decode every tensor in a checkpoint.

    Returns:
        (architecture, all named tensors in file order, metadata)
    """
    with open(path, "rb") as f:
        reader = _Reader(f.read())

    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError("not a DPBN checkpoint (bad magic at offset 0)")
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4 (expected {FORMAT_VERSION})")
    text_offset = reader.offset
    text = reader.take(reader.u32("descriptor length"), "descriptor")
    try:
        descriptor = json.loads(text.decode("utf-8"))
        arch = ArchSpec.from_dict(descriptor["arch"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"invalid architecture descriptor at offset {text_offset}: {e}") from e

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    count = reader.u32("tensor count")
    for _ in range(count):
        name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8")
        ndim = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"shape of {name}") for _ in range(ndim))
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(n_bytes, f"data of {name}"), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(tc.get_dtype())
    if reader.offset != len(reader.buf):
        raise CheckpointError(f"unexpected trailing bytes at offset {reader.offset}")
    return arch, tensors, descriptor.get("meta", {})


def load_checkpoint(path: str) -> ModelParams:
    """Load model parameters, validated against the stored architecture."""
    arch, tensors, _ = read_checkpoint(path)
    expected = param_shapes(arch)
    missing = [name for name in expected if name not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {missing}")
    params = ModelParams(arch, OrderedDict((name, tensors[name]) for name in expected))
    check_params(params)
    return params
