"""
Central finite-difference checks of the analytic gradients.

Each suite builds a random instance from a seed, computes gradients with the
tape, perturbs a sample of entries by +/- h and reports the relative error
max|a - n| / max(max|a|, max|n|, 1e-12).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

import tensor_core as tc
from boundary_loss import ce_loss, dfb_loss, dfb_map, loss_terms
from seg_net import ArchSpec, forward, init_model
from sram_attention import init_sram, sram_forward
from tensor_core import Tape

logger = logging.getLogger(__name__)

STEP = 1e-6
TOLERANCES = {"dfb": 1e-5, "ce": 1e-5, "total": 1e-5, "sram": 1e-5, "conv": 1e-5, "net": 1e-4}


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], array: np.ndarray, indices, h: float = STEP) -> np.ndarray:
    """Central differences of f() with respect to array[idx] for each flat index (array is restored)."""
    flat = array.reshape(-1)
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        saved = flat[idx]
        flat[idx] = saved + h
        up = f()
        flat[idx] = saved - h
        down = f()
        flat[idx] = saved
        out[n] = (up - down) / (2.0 * h)
    return out


def _sample(rng: np.random.Generator, size: int, limit: Optional[int]) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def _random_case(rng: np.random.Generator, shape=(8, 8, 8)):
    g = (rng.random(shape) < 0.4).astype(np.uint8)
    p = rng.uniform(0.05, 0.95, size=shape)
    return p, g


def _loss_suite(name: str, seed: int, make_loss) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    p, g = _random_case(rng)
    tape = Tape()
    leaf = tape.watch(p.copy(), "p")
    tc.backward(tape, make_loss(leaf, g))
    idx = _sample(rng, p.size, None)
    numeric = numeric_grad(lambda: make_loss(p, g).item(), p, idx)
    err = relative_error(leaf.grad.reshape(-1)[idx], numeric)
    return GradcheckResult(name, err, TOLERANCES[name], len(idx))


def check_dfb(seed: int) -> GradcheckResult:
    weights = {}

    def _loss(p, g):
        if "w" not in weights:
            weights["w"] = dfb_map(g, 3)
        return dfb_loss(p, g, weights["w"])

    return _loss_suite("dfb", seed, _loss)


def check_ce(seed: int) -> GradcheckResult:
    return _loss_suite("ce", seed, lambda p, g: ce_loss(p, g))


def check_total(seed: int) -> GradcheckResult:
    weights = {}

    def _loss(p, g):
        if "w" not in weights:
            weights["w"] = dfb_map(g, 3)
        return loss_terms(p, g, weights=weights["w"]).total

    return _loss_suite("total", seed, _loss)


def check_conv(seed: int) -> GradcheckResult:
    """conv3d with replicate padding and stride 2, all three inputs."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 6, 6, 4))
    kernel = rng.standard_normal((3, 2, 3, 3, 3))
    bias = rng.standard_normal(3)
    r = rng.standard_normal((3, 3, 3, 2))

    def _loss(x_, k_, b_):
        return tc.sum_all(tc.mul(tc.conv3d(x_, k_, b_, stride=2, padding="replicate"), r))

    tape = Tape()
    leaves = [tape.watch(x.copy(), "x"), tape.watch(kernel.copy(), "kernel"), tape.watch(bias.copy(), "bias")]
    tc.backward(tape, _loss(*leaves))
    errors, count = [], 0
    for leaf, array in zip(leaves, (x, kernel, bias)):
        idx = _sample(rng, array.size, 60)
        numeric = numeric_grad(lambda: _loss(x, kernel, bias).item(), array, idx)
        errors.append(relative_error(leaf.grad.reshape(-1)[idx], numeric))
        count += len(idx)
    return GradcheckResult("conv", max(errors), TOLERANCES["conv"], count)


def check_sram(seed: int) -> GradcheckResult:
    """SRAM forward with frozen ratios: gradients of features and attention conv."""
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((4, 8, 8, 8))
    params = init_sram(4, rng, kernel_size=3)
    params.conv_bias[:] = rng.standard_normal(1)
    ratios = (2, 4, 2)
    r = rng.standard_normal(features.shape)

    def _loss(f_, w_, b_):
        out = sram_forward(f_, params, ratios=ratios, param_tensors={"conv_weight": w_, "conv_bias": b_})
        return tc.sum_all(tc.mul(out, r))

    tape = Tape()
    leaves = [tape.watch(features.copy(), "features"), tape.watch(params.conv_weight.copy(), "conv_weight"),
              tape.watch(params.conv_bias.copy(), "conv_bias")]
    tc.backward(tape, _loss(*leaves))
    errors, count = [], 0
    for leaf, array in zip(leaves, (features, params.conv_weight, params.conv_bias)):
        idx = _sample(rng, array.size, 100)
        numeric = numeric_grad(lambda: _loss(features, params.conv_weight, params.conv_bias).item(), array, idx)
        errors.append(relative_error(leaf.grad.reshape(-1)[idx], numeric))
        count += len(idx)
    return GradcheckResult("sram", max(errors), TOLERANCES["sram"], count)


def check_net(seed: int, n_params: int = 200) -> GradcheckResult:
    """Total loss through the full network on a 16x16x8 input, ratios frozen."""
    rng = np.random.default_rng(seed)
    arch = ArchSpec(stages=3, channels=(4, 8, 8), sram_flags=(True, True, True), sram_kernel=3,
                    ratio_head_scale=0.5)
    params = init_model(arch, seed)
    x = rng.standard_normal((1, 16, 16, 8))
    g = np.zeros((16, 16, 8), dtype=np.uint8)
    g[4:12, 3:11, 2:6] = 1
    weights = dfb_map(g, 3)

    ratios: Dict[int, tuple] = {}
    tape = Tape()
    prob = forward(params, x, tape=tape, trace=ratios)
    tc.backward(tape, loss_terms(prob, g, weights=weights).total)
    grads = tape.gradients()

    def _value() -> float:
        return loss_terms(forward(params, x, ratios=ratios), g, weights=weights).total.item()

    names = [n for n in params.tensors if ".sram.head_" not in n]
    sizes = np.array([params.tensors[n].size for n in names])
    picks = _sample(rng, int(sizes.sum()), n_params)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for pick in picks:
        i = int(np.searchsorted(offsets, pick, side="right") - 1)
        name, local = names[i], int(pick - offsets[i])
        analytic.append(grads[name].reshape(-1)[local])
        numeric.append(numeric_grad(_value, params.tensors[name], [local])[0])
    return GradcheckResult("net", relative_error(np.array(analytic), np.array(numeric)), TOLERANCES["net"], len(picks))


SUITES: Dict[str, Callable[[int], GradcheckResult]] = {
    "dfb": check_dfb,
    "ce": check_ce,
    "total": check_total,
    "conv": check_conv,
    "sram": check_sram,
    "net": check_net,
}


def run_suites(names: List[str], seed: int) -> List[GradcheckResult]:
    """Run the named suites in 64-bit precision."""
    previous = tc.get_dtype()
    tc.set_precision("float64")
    try:
        results = []
        for name in names:
            if name not in SUITES:
                raise ValueError(f"Unknown gradcheck suite '{name}', expected one of {list(SUITES)}")
            result = SUITES[name](seed)
            logger.info(f"gradcheck {name}: max relative error {result.max_rel_error:.3e} "
                        f"over {result.n_checked} entries (tolerance {result.tolerance:.0e})")
            results.append(result)
        return results
    finally:
        tc.set_precision("float32" if previous == np.float32 else "float64")
