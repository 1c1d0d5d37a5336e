"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the networks here need are provided: valid cross-correlation,
2x2 average/max pooling, ReLU, dense layers, inverted dropout, softmax
cross-entropy, and the affine grid generator plus bilinear sampler of a spatial
transformer. Each operator builds a node holding a closure that pushes the
upstream gradient into its parents.

Storage is float32 for training; pass float64 arrays to run in 64-bit mode
(gradient checks do this). Operators preserve the dtype of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidRate, LabelOutOfRange, NonFiniteValue, ShapeMismatch


class Tensor:
    """An array with an optional gradient buffer and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor; a scalar output defaults to grad 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeMismatch(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, "backward")
            if node._backward is None:
                node._accumulate(g)
                continue
            if node.grad is not None or node.name is not None:
                # retain gradients on named intermediates for inspection
                node._accumulate(g)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _check_finite(arr: np.ndarray, where: str):
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite values produced in {where}")


def _node(data, parents, backward, where):
    _check_finite(data, where)
    return Tensor(data, _parents=tuple(parents), _backward=backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- layers -----------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid cross-correlation, stride 1. x: [B,C,H,W], w: [K,C,kh,kw], b: [K]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and weights")
    B, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeMismatch(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    if kh > H or kw > W:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than input {H}x{W}")
    if b.shape != (K,):
        raise ShapeMismatch(f"conv2d bias shape {b.shape} != ({K},)")
    Ho, Wo = H - kh + 1, W - kw + 1

    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(K, C * kh * kw)
    out = cols @ wmat.T + b.data
    out = out.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gx = np.zeros(x.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + Ho, j : j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _node(np.ascontiguousarray(out), (x, w, b), backward, "conv2d")


def _pool_view(x: Tensor, name: str):
    if x.data.ndim != 4:
        raise ShapeMismatch(f"{name} expects a 4-D input")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"{name} needs even spatial dims, got {H}x{W}")
    return x.data.reshape(B, C, H // 2, 2, W // 2, 2)


def avgpool2d(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 windows."""
    v = _pool_view(x, "avgpool2d")
    out = v.mean(axis=(3, 5))

    def backward(g):
        gx = np.broadcast_to((g / 4)[:, :, :, None, :, None], v.shape)
        return (gx.reshape(x.shape),)

    return _node(out, (x,), backward, "avgpool2d")


def maxpool2d(x: Tensor) -> Tensor:
    """Max over non-overlapping 2x2 windows; ties route gradient to the first
    element in row-major window order."""
    v = _pool_view(x, "maxpool2d")
    B, C, Hh, _, Wh, _ = v.shape
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Hh, Wh, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(B, C, Hh, Wh, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(x.shape),)

    return _node(out, (x,), backward, "maxpool2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return _node(out, (x,), backward, "relu")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        return (g.reshape(shape),)

    return _node(out, (x,), backward, "flatten")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x: [B,F] (4-D inputs are flattened), w: [F,O], b: [O]."""
    if x.data.ndim == 4:
        x = flatten(x)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeMismatch("dense expects 2-D input and weights")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(
            f"dense shapes disagree: input {x.shape}, weights {w.shape}, bias {b.shape}"
        )
    out = x.data @ w.data + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, w, b), backward, "dense")


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity in eval mode."""
    if not 0 <= rate < 1:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1 - rate, dtype=x.dtype)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return _node(out, (x,), backward, "dropout")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns the scalar loss tensor and the probability matrix.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch("softmax_xent expects [B, C] logits")
    B, C = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ShapeMismatch(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1
        return (d * (g / B),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_xent"), probs


# --- spatial transformer ----------------------------------------------------


def normalized_lattice(n: int, dtype=np.float64) -> np.ndarray:
    """Normalized coordinates of n pixel centers spanning [-1, 1]."""
    return ((2 * np.arange(n, dtype=np.float64) + 1) / n - 1).astype(dtype)


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Source sampling coordinates for every output pixel.

    theta: [B,2,3] (or [B,6]) maps normalized output (x, y, 1) to normalized
    input (xs, ys). Returns [B, out_h, out_w, 2] with (xs, ys) in the last axis.
    """
    t = theta.data
    if t.ndim == 2 and t.shape[1] == 6:
        t = t.reshape(-1, 2, 3)
    if t.ndim != 3 or t.shape[1:] != (2, 3):
        raise ShapeMismatch(f"theta must be [B,2,3] or [B,6], got {theta.shape}")
    B = t.shape[0]
    # sampling coordinates are always float64 so identity warps stay exact
    t = t.astype(np.float64, copy=False)
    ys, xs = np.meshgrid(normalized_lattice(out_h), normalized_lattice(out_w), indexing="ij")
    base = np.stack([xs, ys, np.ones_like(xs)], axis=-1).reshape(-1, 3)  # P,3
    out = np.einsum("pk,bjk->bpj", base, t).reshape(B, out_h, out_w, 2)

    def backward(g):
        gt = np.einsum("bpj,pk->bjk", g.reshape(B, -1, 2), base)
        return (gt.reshape(theta.shape),)

    return _node(out, (theta,), backward, "affine_grid")


def _snap(p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(p)
    return np.where(np.abs(p - r) < tol, r, p)


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of x [B,C,H,W] at normalized grid [B,Ho,Wo,2].

    Pixel centers sit at normalized -1 + (2i+1)/n; samples outside the image
    read zeros. Gradients flow to both x and grid.
    """
    if x.data.ndim != 4 or grid.data.ndim != 4 or grid.shape[-1] != 2:
        raise ShapeMismatch("grid_sample expects x [B,C,H,W] and grid [B,Ho,Wo,2]")
    B, C, H, W = x.shape
    if grid.shape[0] != B:
        raise ShapeMismatch(f"batch mismatch: input {B}, grid {grid.shape[0]}")
    _, Ho, Wo, _ = grid.shape
    gx = grid.data[..., 0].reshape(B, -1).astype(np.float64)
    gy = grid.data[..., 1].reshape(B, -1).astype(np.float64)
    px = _snap(((gx + 1) * W - 1) / 2)
    py = _snap(((gy + 1) * H - 1) / 2)
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = px - x0
    wy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1

    flat = x.data.reshape(B, C, H * W)
    bidx = np.arange(B)[:, None]
    corners = []
    for cy, cx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        lin = np.where(valid, cy * W + cx, 0)
        vals = flat[bidx, :, lin]  # B,P,C
        vals = np.where(valid[..., None], vals, 0).transpose(0, 2, 1)  # B,C,P
        corners.append((lin, valid, vals))
    (l00, m00, v00), (l01, m01, v01), (l10, m10, v10), (l11, m11, v11) = corners
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = (
        v00 * w00[:, None] + v01 * w01[:, None] + v10 * w10[:, None] + v11 * w11[:, None]
    )
    out = out.astype(x.dtype, copy=False).reshape(B, C, Ho, Wo)

    def backward(g):
        g = g.reshape(B, C, -1)
        ginput = None
        if x.requires_grad:
            ginput = np.zeros((B, C, H * W), dtype=x.dtype)
            for lin, valid, wgt in ((l00, m00, w00), (l01, m01, w01), (l10, m10, w10), (l11, m11, w11)):
                contrib = g * np.where(valid, wgt, 0)[:, None, :]
                for bi in range(B):
                    for ci in range(C):
                        ginput[bi, ci] += np.bincount(lin[bi], weights=contrib[bi, ci], minlength=H * W)
            ginput = ginput.reshape(x.shape)
        ggrid = None
        if grid.requires_grad:
            dpx = ((v01 - v00) * (1 - wy)[:, None] + (v11 - v10) * wy[:, None]) * g
            dpy = ((v10 - v00) * (1 - wx)[:, None] + (v11 - v01) * wx[:, None]) * g
            ggrid = np.stack([dpx.sum(axis=1) * (W / 2), dpy.sum(axis=1) * (H / 2)], axis=-1)
            ggrid = ggrid.reshape(grid.shape)
        return ginput, ggrid

    return _node(out, (x, grid), backward, "grid_sample")


# --- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-input maximum relative error between analytic and numeric gradients."""

    errors: list
    tolerance: float
    names: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # entries left out as kinks, per input

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask=None) -> float:
    """max |a - n| over entries, scaled by the larger of max|a| and max|n|."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if mask is not None:
        a, n = a[mask], n[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    tolerance: float = 1e-6,
    exclude: Sequence[np.ndarray | None] | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
    kink_ratio: float | None = 1e-3,
) -> GradCheckReport:
    """Compare backprop gradients of ``op`` with central finite differences.

    ``op`` takes Tensors (one per entry of ``inputs``) and returns a Tensor.
    The scalar probed is ``sum(op(...) * R)`` for a fixed random ``R``; all
    arithmetic is float64. ``exclude`` holds optional boolean masks marking
    entries not to perturb. With ``kink_ratio`` set, an entry whose forward and
    backward one-sided slopes disagree by more than that fraction has crossed a
    non-differentiable point (ReLU kink, max-pool switch, bilinear cell edge)
    and is skipped too.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    exclude = list(exclude) if exclude is not None else [None] * len(arrays)

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(weights)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def probe(vals):
        res = op(*[Tensor(v) for v in vals])
        return float((res.data * weights).sum())

    f0 = probe(arrays)
    errors, skipped = [], []
    for k, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        skip = exclude[k]
        keep = np.ones(base.shape, dtype=bool) if skip is None else ~np.asarray(skip, dtype=bool)
        kinks = 0
        vals = list(arrays)
        for idx in np.ndindex(base.shape):
            if not keep[idx]:
                continue
            work = base.copy()
            vals[k] = work
            work[idx] = base[idx] + epsilon
            fp = probe(vals)
            work[idx] = base[idx] - epsilon
            fm = probe(vals)
            if kink_ratio is not None:
                up, down = fp - f0, f0 - fm
                if abs(up - down) > kink_ratio * max(abs(up), abs(down), 1e-300):
                    if abs(up - down) > 1e-13 * max(abs(f0), 1.0):
                        keep[idx] = False
                        kinks += 1
                        continue
            numeric[idx] = (fp - fm) / (2 * epsilon)
        vals[k] = base
        errors.append(relative_error(analytic[k], numeric, keep))
        skipped.append(kinks)
    return GradCheckReport(errors, tolerance, list(names) if names else [], skipped)
