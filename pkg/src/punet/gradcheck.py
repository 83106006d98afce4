"""Central finite-difference gradient checks.

The numerical side only ever calls forward code with no tape active, so it is
independent of the reverse-mode rules it validates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tape, Tensor, backward

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two max magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check(fn: Callable[..., Tensor], inputs: dict[str, np.ndarray], seed: int = 0, h: float = 1e-5) -> float:
    """Compare analytic and numeric gradients of ``sum(fn(...) * w)``.

    ``w`` is a fixed random weighting so every output element contributes
    distinctly. Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    with T.default_dtype(np.float64):
        params = ParamStore({k: Tensor(v) for k, v in arrays.items()})
        probe = fn(**{k: params[k] for k in params})
        weights = rng.standard_normal(probe.shape)

        def scalar() -> float:
            return float((fn(**{k: params[k] for k in params}).data * weights).sum())

        with Tape() as tape:
            out = fn(**{k: params[k] for k in params})
            loss = T.tsum(T.mul(out, weights))
        grads = backward(loss, tape, params)
        worst = 0.0
        for name in params:
            num = numerical_grad(scalar, params[name].data, h)
            worst = max(worst, relative_error(grads[name], num))
    return worst


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict]]:
    r = rng.standard_normal

    def away_from_zero(shape):
        x = r(shape)
        return np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-9) * 0.2, x)

    return {
        "matmul": (lambda a, b: T.matmul(a, b), {"a": r((3, 4)), "b": r((4, 5))}),
        "matmul_batched": (lambda a, b: T.matmul(a, b), {"a": r((2, 3, 4)), "b": r((4, 2))}),
        "conv2d_s1_p1": (
            lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
            {"x": r((5, 5, 2)), "w": r((3, 3, 2, 3)), "b": r(3)},
        ),
        "conv2d_s2_p1": (
            lambda x, w: T.conv2d(x, w, stride=2, padding=1),
            {"x": r((2, 6, 6, 2)), "w": r((3, 3, 2, 2))},
        ),
        "upsample_nearest": (lambda x: T.upsample_nearest(x, 2), {"x": r((3, 2, 2))}),
        "concat": (lambda a, b: T.concat(a, b), {"a": r((4, 3)), "b": r((2, 3))}),
        "split_head": (lambda x: T.split(x, 2)[0], {"x": r((5, 3))}),
        "split_tail": (lambda x: T.split(x, 2)[1], {"x": r((5, 3))}),
        "softmax": (T.softmax, {"x": r((3, 5))}),
        "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b, 1e-5), {"x": r((4, 6)), "g": r(6), "b": r(6)}),
        "sigmoid": (T.sigmoid, {"x": r((3, 4))}),
        "relu": (T.relu, {"x": away_from_zero((3, 4))}),
        "add_broadcast": (lambda a, b: T.add(a, b), {"a": r((3, 4)), "b": r(4)}),
        "mul_broadcast": (lambda a, b: T.mul(a, b), {"a": r((3, 4)), "b": r((3, 1))}),
        "div": (lambda a, b: T.div(a, b), {"a": r((3, 4)), "b": 1.5 + np.abs(r((3, 4)))}),
        "sum_axis": (lambda x: T.tsum(x, axis=(0, 1)), {"x": r((2, 3, 4))}),
        "transpose_reshape": (lambda x: T.reshape(T.transpose(x, (1, 0, 2)), (3, 8)), {"x": r((2, 3, 4))}),
        "take": (lambda x: T.take(x, [2, 0, 2]), {"x": r((3, 2, 4))}),
    }


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_primitive_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, inputs) in _primitive_cases(rng).items():
        results.append(CheckResult(name, check(fn, inputs, seed=seed), PRIMITIVE_TOL))
    return results


def composite_gradcheck(seed: int = 0, h: float = 1e-5) -> float:
    """Full PU-Net forward + Dice loss, checked on a 4-parameter probe set.

    Probes one scalar each from a prompt embedding, a stage map, an ITB
    projection and the segmentation head, on a tiny f64 model.
    """
    from .model import PUNet, RaterTag, UNetConfig
    from .training import dice_loss

    rng = np.random.default_rng(seed)
    cfg = UNetConfig(stages=2, base_channels=4, channel_mults=(1, 2, 2), input_size=(8, 8), heads=2, n_raters=2)
    with T.default_dtype(np.float64):
        model = PUNet(cfg, seed=seed)
        model.params.astype(np.float64)
        x = Tensor(rng.uniform(0, 1, (8, 8, 3)))
        target = Tensor((rng.uniform(0, 1, (8, 8, 2)) > 0.5).astype(np.float64))
        tag = RaterTag.rater(1)
        probes = [
            ("prompt.embeddings", (1, 0, 2)),
            ("stage_map.0.w", (1, 3)),
            ("itb.0.wv", (2, 1)),
            ("head.0.w", (0, 0, 3, 1)),
        ]

        def loss_value() -> float:
            return float(dice_loss(model.forward(x, tag), target).data)

        with Tape() as tape:
            loss = dice_loss(model.forward(x, tag), target)
        grads = backward(loss, tape, model.params)
        worst = 0.0
        for name, idx in probes:
            arr = model.params[name].data
            flat = int(np.ravel_multi_index(idx, arr.shape))
            num = numerical_grad(loss_value, arr, h, indices=[flat]).reshape(-1)[flat]
            worst = max(worst, relative_error(grads[name].reshape(-1)[flat], num))
    return worst


def run_composite_check(seed: int = 0) -> CheckResult:
    return CheckResult("punet_forward_dice", composite_gradcheck(seed=seed), COMPOSITE_TOL)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return run_primitive_suite(seed) + [run_composite_check(seed)]
