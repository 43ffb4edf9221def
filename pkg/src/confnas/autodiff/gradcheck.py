"""Finite-difference verification of the primitives' analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops, stacked
from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    kind: str
    trials: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-abs difference scaled by the larger max-abs magnitude of the two."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
                   h: float = 1e-5) -> float:
    """Compare tape gradients of sum(c * fn(*inputs)) with central differences.

    `c` is a fixed random projection so every output element contributes.
    Returns the worst relative error over all inputs.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in inputs]
    with Tape() as tape:
        out = fn(*tensors)
    proj = rng.standard_normal(out.shape)

    def scalar(arrays):
        ts = [Tensor(a, dtype=np.float64) for a in arrays]
        return float((fn(*ts).data * proj).sum())

    with tape:
        loss = ops.sum(ops.mul(out, Tensor(proj, dtype=np.float64)))
    grads = backward(tape, loss, params=tensors)
    worst = 0.0
    for k, arr in enumerate(inputs):
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar(inputs)
            flat[i] = orig - h
            down = scalar(inputs)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        worst = max(worst, relative_error(grads[tensors[k]], numeric))
    return worst


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, *shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _case(kind: str, rng: np.random.Generator):
    """Return (callable, input arrays) for one random instance of `kind`."""
    n = int(rng.integers(1, 3))
    if kind == "conv2d":
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        x, w, b = _rand(rng, n, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
        return (lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=1, dilation=dil)), [x, w, b]
    if kind in ("depthwise_conv2d", "dilated_conv2d"):
        k = int(rng.choice([3, 5]))
        stride = int(rng.integers(1, 3))
        dil = 2 if kind == "dilated_conv2d" else 1
        pad = dil * (k - 1) // 2
        x, w = _rand(rng, n, 3, 6, 6), _rand(rng, 3, k, k)
        return (lambda x, w: ops.depthwise_conv2d(x, w, stride=stride, padding=pad, dilation=dil)), [x, w]
    if kind == "pointwise_conv2d":
        stride, off = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, w = _rand(rng, n, 3, 4, 4), _rand(rng, 4, 3)
        return (lambda x, w: ops.pointwise_conv2d(x, w, stride=stride, offset=off)), [x, w]
    if kind == "max_pool":
        stride = int(rng.integers(1, 3))
        return (lambda x: ops.max_pool(x, 3, stride, 1)), [_rand(rng, n, 2, 5, 5)]
    if kind == "avg_pool":
        stride = int(rng.integers(1, 3))
        return (lambda x: ops.avg_pool(x, 3, stride, 1)), [_rand(rng, n, 2, 5, 5)]
    if kind == "identity":
        return ops.identity, [_rand(rng, n, 2, 3, 3)]
    if kind == "zero":
        return ops.zero, [_rand(rng, n, 2, 3, 3)]
    if kind == "relu":
        return ops.relu, [_away_from_zero(rng, n, 2, 3, 3)]
    if kind == "batch_norm":
        if rng.random() < 0.5:
            return (lambda x, w, b: ops.batch_norm(x, w, b, training=True)), \
                [_rand(rng, 2, 3, 3, 3), _rand(rng, 3), _rand(rng, 3)]
        rm, rv = _rand(rng, 3), rng.uniform(0.5, 2.0, 3)
        return (lambda x, w, b: ops.batch_norm(x, w, b, rm, rv, training=False)), \
            [_rand(rng, 2, 3, 3, 3), _rand(rng, 3), _rand(rng, 3)]
    if kind == "linear":
        return ops.linear, [_rand(rng, n, 4), _rand(rng, 3, 4), _rand(rng, 3)]
    if kind == "softmax":
        return (lambda x: ops.softmax(x, axis=-1)), [_rand(rng, 3, 5)]
    if kind == "global_avg_pool":
        return ops.global_avg_pool, [_rand(rng, n, 3, 4, 4)]
    if kind == "add":
        return ops.add, [_rand(rng, n, 2, 3, 3), _rand(rng, n, 2, 3, 3)]
    if kind == "scalar_mul":
        s = float(rng.standard_normal())
        return (lambda x: ops.scalar_mul(x, s)), [_rand(rng, n, 2, 3)]
    if kind == "concat_channels":
        return (lambda a, b: ops.concat_channels([a, b])), [_rand(rng, n, 2, 3, 3), _rand(rng, n, 1, 3, 3)]
    if kind == "mul":
        return ops.mul, [_rand(rng, 3, 4), _rand(rng, 1, 4)]
    if kind == "div":
        return ops.div, [_rand(rng, 3, 4), rng.uniform(0.5, 2.0, (3, 1))]
    if kind == "exp":
        return ops.exp, [_rand(rng, 3, 4)]
    if kind == "log":
        return ops.log, [rng.uniform(0.5, 3.0, (3, 4))]
    if kind == "sigmoid":
        return ops.sigmoid, [_rand(rng, 3, 4)]
    if kind == "sum":
        return (lambda x: ops.sum(x, axis=1, keepdims=True)), [_rand(rng, 3, 4)]
    if kind == "cross_entropy":
        labels = rng.integers(0, 4, size=3)
        return (lambda z: ops.cross_entropy(z, labels)), [_rand(rng, 3, 4)]
    if kind == "gather_channels":
        idx = rng.permutation(4)[:3]
        return (lambda x: ops.gather_channels(x, idx)), [_rand(rng, n, 4, 2, 2)]
    if kind == "weighted_sum":
        return (lambda w, a, b: ops.weighted_sum(w, [(0, 1), (1, 2)], [a, b])), \
            [_rand(rng, 2, 3), _rand(rng, n, 2, 3, 3), _rand(rng, n, 2, 3, 3)]
    if kind == "relu_conv_bn":
        x = _away_from_zero(rng, 2, 3, 5, 5)
        pw = _rand(rng, 4, 3)
        if rng.random() < 0.3:
            return (lambda x, pw: ops.relu_conv_bn(x, pw)), [x, pw]
        k = int(rng.choice([3, 5]))
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        pad = dil * (k - 1) // 2
        dw = _rand(rng, 3, k, k)
        if rng.random() < 0.5:
            return (lambda x, pw, dw: ops.relu_conv_bn(x, pw, dw, stride=stride, padding=pad,
                                                       dilation=dil)), [x, pw, dw]
        rm, rv = _rand(rng, 4), rng.uniform(0.5, 2.0, 4)
        return (lambda x, pw, dw, g, b: ops.relu_conv_bn(x, pw, dw, g, b, rm, rv, training=False, stride=stride,
                                                         padding=pad, dilation=dil)), \
            [x, pw, dw, _rand(rng, 4), _rand(rng, 4)]
    if kind == "sub":
        return ops.sub, [_rand(rng, 3, 4), _rand(rng, 3, 1)]
    if kind == "mean":
        return (lambda x: ops.mean(x, axis=(0, 2))), [_rand(rng, 3, 4, 2)]
    if kind == "reshape":
        return (lambda x: ops.reshape(x, (4, -1))), [_rand(rng, 2, 2, 3)]
    # stacked [E, N, C, H, W] primitives
    if kind == "stack":
        return (lambda a, b: stacked.stack([a, b])), [_rand(rng, n, 2, 3, 3), _rand(rng, n, 2, 3, 3)]
    if kind == "concat_edges":
        return (lambda a, b: stacked.concat_edges([a, b])), [_rand(rng, 1, n, 2, 3, 3), _rand(rng, 2, n, 2, 3, 3)]
    if kind == "select_edges":
        idx = rng.permutation(3)[:2]
        return (lambda x: stacked.select_edges(x, idx)), [_rand(rng, 3, n, 2, 3, 3)]
    if kind == "stacked_relu_conv_bn":
        x = _away_from_zero(rng, 2, 2, 3, 5, 5)
        if rng.random() < 0.3:
            return (lambda x, p0, p1: stacked.stacked_relu_conv_bn(x, [p0, p1])), [x, _rand(rng, 4, 3),
                                                                                 _rand(rng, 4, 3)]
        k = int(rng.choice([3, 5]))
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        pad = dil * (k - 1) // 2
        return (lambda x, p0, p1, d0, d1: stacked.stacked_relu_conv_bn(x, [p0, p1], [d0, d1], stride, pad, dil)), \
            [x, _rand(rng, 4, 3), _rand(rng, 4, 3), _rand(rng, 3, k, k), _rand(rng, 3, k, k)]
    if kind == "stacked_pool":
        pool = "max" if rng.random() < 0.5 else "avg"
        stride, norm = int(rng.integers(1, 3)), bool(rng.random() < 0.5)
        return (lambda x: stacked.stacked_pool(x, pool, 3, stride, 1, norm)), [_rand(rng, 2, 2, 2, 5, 5)]
    if kind == "stacked_factorized_reduce":
        return (lambda x, a0, a1, b0, b1: stacked.stacked_factorized_reduce(x, [a0, a1], [b0, b1])), \
            [_away_from_zero(rng, 2, 2, 3, 4, 4), _rand(rng, 2, 3), _rand(rng, 2, 3), _rand(rng, 2, 3),
             _rand(rng, 2, 3)]
    if kind == "gather_channels_per_edge":
        idx = np.stack([rng.permutation(4)[:2] for _ in range(2)])
        return (lambda x: stacked.gather_channels_per_edge(x, idx)), [_rand(rng, 2, n, 4, 2, 2)]
    if kind == "concat_channels_stacked":
        return (lambda a, b: stacked.concat_channels_stacked([a, b])), \
            [_rand(rng, 2, n, 2, 3, 3), _rand(rng, 2, n, 1, 3, 3)]
    if kind == "mix_edges":
        groups = [(0, [0, 2]), (2, [1, 2])]
        return (lambda w, a, b: stacked.mix_edges(w, [0, 1, 1], groups, [a, b], 3)), \
            [_rand(rng, 2, 3), _rand(rng, 2, n, 2, 3, 3), _rand(rng, 2, n, 2, 3, 3)]
    if kind == "reduce_edges":
        if rng.random() < 0.3:
            return stacked.reduce_edges, [_rand(rng, 3, n, 2, 3, 3)]
        return (lambda x, w: stacked.reduce_edges(x, w, [(0, 1), (1, 0), (1, 2)])), \
            [_rand(rng, 3, n, 2, 3, 3), _rand(rng, 2, 3)]
    raise ValueError(f"grad_check: no generator for {kind!r}")


CHECKED_KINDS = ops.PRIMITIVES + (
    "mul", "div", "exp", "log", "sigmoid", "sum", "cross_entropy", "gather_channels", "weighted_sum",
    "relu_conv_bn", "sub", "mean", "reshape",
    "stack", "concat_edges", "select_edges", "stacked_relu_conv_bn", "stacked_pool", "stacked_factorized_reduce",
    "gather_channels_per_edge", "concat_channels_stacked", "mix_edges", "reduce_edges",
)


def grad_check(kind: str, trials: int = 20, tol: float = 1e-4, seed: int = 0, h: float = 1e-5) -> GradCheckReport:
    if trials < 1:
        raise ValueError("grad_check: trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        fn, inputs = _case(kind, rng)
        worst = max(worst, check_function(fn, inputs, rng, h=h))
    return GradCheckReport(kind, trials, worst, tol)
