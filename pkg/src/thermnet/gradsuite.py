"""Finite-difference gradient checks for every differentiable operator.

Each case draws random float64 instances and compares backprop against
central differences. Known non-differentiable points are kept away from the
perturbations: ReLU inputs near zero and near-tied max-pool windows are
masked, bilinear sample points are drawn away from cell edges, and any
remaining kink crossing is caught by the kink test inside ``grad_check``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import LOCALIZATION_LAYERS, _trace, spatial_transformer


@dataclass
class CaseResult:
    name: str
    instances: int
    max_error: float
    tolerance: float
    skipped: int

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name:<14} max_rel_err={self.max_error:.2e} "
            f"tol={self.tolerance:.0e} instances={self.instances} kinks_skipped={self.skipped}"
        )


def _away_from_edges(rng, shape, n, margin=0.05):
    """Normalized coordinates whose pixel positions sit at least ``margin``
    pixels from any integer (cell edge)."""
    cells = rng.integers(-1, n, size=shape)
    frac = rng.uniform(margin, 1 - margin, size=shape)
    pix = cells + frac
    return (2 * pix + 1) / n - 1


def _conv(rng):
    B, C, K = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
    H, W = rng.integers(5, 8, size=2)
    kh, kw = rng.integers(1, 4, size=2)
    inputs = [rng.standard_normal((B, C, H, W)), rng.standard_normal((K, C, kh, kw)), rng.standard_normal(K)]
    return ad.conv2d, inputs, None


def _avgpool(rng):
    shape = (rng.integers(1, 3), rng.integers(1, 3), 2 * rng.integers(1, 4), 2 * rng.integers(1, 4))
    return ad.avgpool2d, [rng.standard_normal(shape)], None


def _maxpool(rng):
    shape = (rng.integers(1, 3), rng.integers(1, 3), 2 * rng.integers(1, 4), 2 * rng.integers(1, 4))
    return ad.maxpool2d, [rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape)], None


def _relu(rng):
    x = rng.standard_normal((3, 7))
    return ad.relu, [x], [np.abs(x) < 1e-3]


def _dense(rng):
    B, F, O = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 5)
    return ad.dense, [rng.standard_normal((B, F)), rng.standard_normal((F, O)), rng.standard_normal(O)], None


def _softmax_xent(rng):
    B, C = rng.integers(1, 6), rng.integers(2, 8)
    labels = rng.integers(0, C, size=B)
    return (lambda z: ad.softmax_xent(z, labels)[0]), [2 * rng.standard_normal((B, C))], None


def _affine_grid(rng):
    B, h, w = rng.integers(1, 3), rng.integers(1, 6), rng.integers(1, 6)
    return (lambda t: ad.affine_grid(t, h, w)), [rng.standard_normal((B, 2, 3))], None


def _grid_sample(rng):
    B, C, H, W = rng.integers(1, 3), rng.integers(1, 3), rng.integers(2, 6), rng.integers(2, 6)
    Ho, Wo = rng.integers(1, 5, size=2)
    grid = np.stack(
        [_away_from_edges(rng, (B, Ho, Wo), W), _away_from_edges(rng, (B, Ho, Wo), H)], axis=-1
    )
    return ad.grid_sample, [rng.standard_normal((B, C, H, W)), grid], None


def _st_block(rng, side=12):
    """Localization net -> affine grid -> sampler, checked end to end.

    The last localization layer gets small random weights instead of the
    identity init so that every parameter receives gradient.
    """
    _, shapes = _trace(LOCALIZATION_LAYERS, (1, side, side), "st.")
    names = list(shapes)
    values = []
    for name, (shape, fan_in) in shapes.items():
        scale = np.sqrt(2.0 / fan_in)
        if name.startswith("st.fc2"):
            scale *= 0.05
        arr = rng.standard_normal(shape) * scale
        if name == "st.fc2.bias":
            arr = arr + np.array([1, 0, 0, 0, 1, 0])
        values.append(arr)
    x = rng.uniform(0, 1, size=(2, 1, side, side))

    def op(x_t, *param_ts):
        return spatial_transformer(x_t, LOCALIZATION_LAYERS, dict(zip(names, param_ts)))

    return op, [x, *values], None


CASES = {
    "conv2d": _conv,
    "avgpool2d": _avgpool,
    "maxpool2d": _maxpool,
    "relu": _relu,
    "dense": _dense,
    "softmax_xent": _softmax_xent,
    "affine_grid": _affine_grid,
    "grid_sample": _grid_sample,
    "st_block": _st_block,
}


def run_case(name: str, instances: int = 10, seed: int = 0, tolerance: float = 1e-6,
             epsilon: float = 1e-6) -> CaseResult:
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    worst, skipped = 0.0, 0
    n = instances if name != "st_block" else max(1, instances)
    for i in range(n):
        op, inputs, exclude = CASES[name](rng)
        report = ad.grad_check(op, inputs, epsilon=epsilon, tolerance=tolerance, exclude=exclude, seed=i)
        worst = max(worst, report.max_error)
        skipped += sum(report.skipped)
    return CaseResult(name, n, worst, tolerance, skipped)


def run_suite(instances: int = 10, seed: int = 0, tolerance: float = 1e-6) -> list:
    return [run_case(name, instances, seed, tolerance) for name in CASES]
