"""Differentiable primitives over `Tensor`.

Every function computes its output with numpy (or a compiled kernel for the
convolution/pooling loops) and registers a backward closure on the active
tape. Backward closures return one gradient per input, or None when that
input does not need one.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from . import _kernels
from .tensor import ShapeError, Tensor, active_tape, as_tensor, make_output

PRIMITIVES = (
    "conv2d", "depthwise_conv2d", "pointwise_conv2d", "dilated_conv2d", "max_pool", "avg_pool",
    "identity", "zero", "relu", "batch_norm", "linear", "softmax", "global_avg_pool", "add",
    "scalar_mul", "concat_channels",
)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b, kind):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# ---------------------------------------------------------------- elementwise

def identity(x: Tensor) -> Tensor:
    return make_output("identity", x.data, (x,), lambda g: (g,))


def zero(x: Tensor) -> Tensor:
    return make_output("zero", np.zeros_like(x.data), (x,), lambda g: (np.zeros_like(x.data),))


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_output("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_output("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("div", out, (a, b), bw)


def scalar_mul(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_output("scalar_mul", x.data * x.data.dtype.type(s), (x,),
                       lambda g: (g * g.dtype.type(s),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_output("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_output("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_output("relu", out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data).astype(x.dtype, copy=False)
    return make_output("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scalar_mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_output("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along `axis`; entries where `mask` is False get exactly zero weight."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a row has every entry masked out")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype, copy=False)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", out, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(`logits`)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"cross_entropy: labels must lie in [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return make_output("cross_entropy", loss, (logits,), bw)


# -------------------------------------------------------------- linear layers

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return make_output("linear", out, inputs, bw)


def _out_size(size, k, stride, pad, dil, kind):
    out = (size + 2 * pad - dil * (k - 1) - 1) // stride + 1
    if out < 1:
        raise ShapeError(f"{kind}: spatial size {size} too small for kernel {k} "
                         f"(stride {stride}, padding {pad}, dilation {dil})")
    return out


def _check_nchw(x, kind):
    if x.ndim != 4:
        raise ShapeError(f"{kind}: expected NCHW input, got shape {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Dense convolution with weight [C_out, C_in, kh, kw]."""
    _check_nchw(x, "conv2d")
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight in-channels "
                         f"{w.shape[1] if w.ndim == 4 else w.shape}")
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = _out_size(h, kh, stride, padding, dilation, "conv2d")
    wo = _out_size(wd, kw, stride, padding, dilation, "conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))[:, :, ::stride, ::stride, ::dilation, ::dilation]
    win = win[:, :, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    dxp[:, :, i * dilation:i * dilation + stride * (ho - 1) + 1:stride,
                        j * dilation:j * dilation + stride * (wo - 1) + 1:stride] += contrib
            gx = dxp[:, :, padding:padding + h, padding:padding + wd]
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return make_output("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                     dilation: int = 1) -> Tensor:
    """Per-channel convolution with weight [C, k, k]."""
    _check_nchw(x, "depthwise_conv2d")
    if w.ndim != 3 or w.shape[0] != x.shape[1] or w.shape[1] != w.shape[2]:
        raise ShapeError(f"depthwise_conv2d: input channels {x.shape[1]} incompatible with "
                         f"weight shape {w.shape}")
    k = w.shape[1]
    ho = _out_size(x.shape[2], k, stride, padding, dilation, "depthwise_conv2d")
    wo = _out_size(x.shape[3], k, stride, padding, dilation, "depthwise_conv2d")
    wdata = w.data.astype(x.dtype, copy=False)
    out = _kernels.depthwise_forward(x.data, wdata, stride, padding, dilation, ho, wo)

    def bw(g):
        dx, dw = _kernels.depthwise_backward(np.ascontiguousarray(g, dtype=x.dtype), x.data, wdata,
                                             stride, padding, dilation,
                                             x.requires_grad, w.requires_grad)
        return (dx if x.requires_grad else None,
                dw.astype(w.dtype, copy=False) if w.requires_grad else None)

    return make_output("depthwise_conv2d", out, (x, w), bw)


def dilated_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 2,
                   dilation: int = 2) -> Tensor:
    """Depthwise convolution with dilation (the DARTS dil_conv building block)."""
    if dilation < 1:
        raise ShapeError(f"dilated_conv2d: dilation must be >= 1, got {dilation}")
    return depthwise_conv2d(x, w, stride=stride, padding=padding, dilation=dilation)


def pointwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, offset: int = 0) -> Tensor:
    """1x1 convolution with weight [C_out, C_in]; `offset` shifts the sampling grid."""
    _check_nchw(x, "pointwise_conv2d")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_conv2d: input channels {x.shape[1]} != weight in-channels "
                         f"{w.shape[1] if w.ndim == 2 else w.shape}")
    full_shape = x.shape
    xs = x.data
    if stride != 1 or offset:
        xs = xs[:, :, offset::stride, offset::stride]
        if xs.shape[2] == 0 or xs.shape[3] == 0:
            raise ShapeError(f"pointwise_conv2d: spatial size {full_shape[2:]} too small for "
                             f"stride {stride} offset {offset}")
    n, c, h, wd = xs.shape
    flat = np.ascontiguousarray(xs).reshape(n, c, h * wd)
    out = np.matmul(w.data, flat).reshape(n, w.shape[0], h, wd)

    def bw(g):
        g2 = g.reshape(n, w.shape[0], h * wd)
        gw = np.tensordot(g2, flat, axes=([0, 2], [0, 2])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            part = np.matmul(w.data.T, g2).reshape(n, c, h, wd)
            if stride != 1 or offset:
                gx = np.zeros(full_shape, dtype=part.dtype)
                gx[:, :, offset::stride, offset::stride] = part
            else:
                gx = part
        return gx, gw

    return make_output("pointwise_conv2d", out, (x, w), bw)


def max_pool(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    _check_nchw(x, "max_pool")
    h, wd = x.shape[2], x.shape[3]
    ho = _out_size(h, kernel, stride, padding, 1, "max_pool")
    wo = _out_size(wd, kernel, stride, padding, 1, "max_pool")
    out, arg = _kernels.max_pool_forward(x.data, kernel, stride, padding, ho, wo)
    return make_output("max_pool", out, (x,),
                       lambda g: (_kernels.max_pool_backward(np.ascontiguousarray(g, dtype=x.dtype),
                                                             arg, h, wd),))


def avg_pool(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1,
             count_include_pad: bool = False) -> Tensor:
    """Average pooling; by default padded cells are excluded from the divisor."""
    _check_nchw(x, "avg_pool")
    h, wd = x.shape[2], x.shape[3]
    ho = _out_size(h, kernel, stride, padding, 1, "avg_pool")
    wo = _out_size(wd, kernel, stride, padding, 1, "avg_pool")
    counts = _kernels.avg_pool_counts(h, wd, kernel, stride, padding, ho, wo, count_include_pad)
    out = _kernels.avg_pool_forward(x.data, kernel, stride, padding, ho, wo, counts)
    return make_output("avg_pool", out, (x,),
                       lambda g: (_kernels.avg_pool_backward(np.ascontiguousarray(g, dtype=x.dtype),
                                                             kernel, stride, padding, h, wd, counts),))


def _bn_forward(x: np.ndarray, weight, bias, running_mean, running_var, training, momentum, eps):
    dt = x.dtype
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        xhat, mu, var, inv = _kernels.bn_train_forward(np.ascontiguousarray(x), eps)
        inv = inv.astype(dt)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(dt)
        xhat = (x - running_mean.astype(dt)[None, :, None, None]) * inv[None, :, None, None]
    out = xhat
    if weight is not None:
        out = out * weight.data[None, :, None, None]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    return out, xhat, inv


def _bn_backward(g: np.ndarray, xhat, inv, weight, bias, training, need_x):
    """Returns (grad_x, grad_weight, grad_bias); entries are None when not needed."""
    axes = (0, 2, 3)
    gxhat = g * weight.data[None, :, None, None] if weight is not None else g
    gx = None
    if need_x:
        if training:
            gx = _kernels.bn_train_backward(np.ascontiguousarray(gxhat), xhat, inv)
        else:
            gx = gxhat * inv[None, :, None, None]
    gw = (g * xhat).sum(axis=axes) if weight is not None and weight.requires_grad else None
    gb = g.sum(axis=axes) if bias is not None and bias.requires_grad else None
    return gx, gw, gb


def _check_bn(c: int, weight, bias, kind: str) -> None:
    for name, t in (("weight", weight), ("bias", bias)):
        if t is not None and t.shape != (c,):
            raise ShapeError(f"{kind}: {name} shape {t.shape} != ({c},)")


def batch_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               running_mean: Optional[np.ndarray] = None, running_var: Optional[np.ndarray] = None,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In training mode batch statistics are used and the running buffers, when
    given, are updated in place. Otherwise the running buffers normalise.
    """
    _check_nchw(x, "batch_norm")
    _check_bn(x.shape[1], weight, bias, "batch_norm")
    out, xhat, inv = _bn_forward(x.data, weight, bias, running_mean, running_var, training, momentum, eps)
    inputs = tuple(t for t in (x, weight, bias) if t is not None)

    def bw(g):
        gx, gw, gb = _bn_backward(g, xhat, inv, weight, bias, training, x.requires_grad)
        grads = [gx]
        if weight is not None:
            grads.append(gw)
        if bias is not None:
            grads.append(gb)
        return grads

    return make_output("batch_norm", out, inputs, bw)


def relu_conv_bn(x: Tensor, pw: Tensor, dw: Optional[Tensor] = None, bn_weight: Optional[Tensor] = None,
                 bn_bias: Optional[Tensor] = None, running_mean: Optional[np.ndarray] = None,
                 running_var: Optional[np.ndarray] = None, training: bool = True, stride: int = 1,
                 padding: int = 0, dilation: int = 1, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Fused relu -> [depthwise] -> pointwise -> batch_norm as a single tape node.

    Numerically the same as chaining the four primitives; it exists to cut
    per-node overhead in the supernet, where this block dominates.
    """
    _check_nchw(x, "relu_conv_bn")
    n, c = x.shape[0], x.shape[1]
    if pw.ndim != 2 or pw.shape[1] != c:
        raise ShapeError(f"relu_conv_bn: input channels {c} != pointwise in-channels {pw.shape}")
    c_out = pw.shape[0]
    _check_bn(c_out, bn_weight, bn_bias, "relu_conv_bn")
    r = np.maximum(x.data, 0)
    if dw is not None:
        if dw.ndim != 3 or dw.shape[0] != c or dw.shape[1] != dw.shape[2]:
            raise ShapeError(f"relu_conv_bn: input channels {c} incompatible with depthwise {dw.shape}")
        k = dw.shape[1]
        ho = _out_size(x.shape[2], k, stride, padding, dilation, "relu_conv_bn")
        wo = _out_size(x.shape[3], k, stride, padding, dilation, "relu_conv_bn")
        dwd = dw.data.astype(x.dtype, copy=False)
        d = _kernels.depthwise_forward(r, dwd, stride, padding, dilation, ho, wo)
    else:
        ho, wo = x.shape[2], x.shape[3]
        d = r
    flat = d.reshape(n, c, ho * wo)
    p = np.matmul(pw.data, flat).reshape(n, c_out, ho, wo)
    out, xhat, inv = _bn_forward(p, bn_weight, bn_bias, running_mean, running_var, training, momentum, eps)
    inputs = tuple(t for t in (x, pw, dw, bn_weight, bn_bias) if t is not None)
    need_d = x.requires_grad or (dw is not None and dw.requires_grad)

    def bw(g):
        gp, gbw, gbb = _bn_backward(g, xhat, inv, bn_weight, bn_bias, training, True)
        g2 = gp.reshape(n, c_out, ho * wo)
        gpw = np.tensordot(g2, flat, axes=([0, 2], [0, 2])) if pw.requires_grad else None
        gx = gdw = None
        if need_d:
            gd = np.matmul(pw.data.T, g2).reshape(n, c, ho, wo)
            if dw is not None:
                gr, gdw = _kernels.depthwise_backward(np.ascontiguousarray(gd, dtype=x.dtype), r, dwd,
                                                      stride, padding, dilation,
                                                      x.requires_grad, dw.requires_grad)
                if not dw.requires_grad:
                    gdw = None
            else:
                gr = gd
            if x.requires_grad:
                gx = gr * (r > 0)
        grads = [gx, gpw]
        if dw is not None:
            grads.append(gdw)
        if bn_weight is not None:
            grads.append(gbw)
        if bn_bias is not None:
            grads.append(gbb)
        return grads

    return make_output("relu_conv_bn", out, inputs, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nchw(x, "global_avg_pool")
    shape = x.shape
    hw = shape[2] * shape[3]
    return make_output("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                       lambda g: (np.broadcast_to((g / hw)[:, :, None, None], shape).copy(),))


# -------------------------------------------------------- channel bookkeeping

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: no inputs")
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def bw(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return make_output("concat_channels", out, tuple(xs), bw)


def gather_channels(x: Tensor, index) -> Tensor:
    """Select channels `index` (in that order) from an NCHW tensor."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, index] = g
        return (gx,)

    return make_output("gather_channels", x.data[:, index], (x,), bw)


def weighted_sum(weights: Tensor, indices: Sequence, outputs: Sequence[Tensor]) -> Tensor:
    """Sum_k weights[indices[k]] * outputs[k] where each index addresses one scalar."""
    if len(indices) != len(outputs) or not outputs:
        raise ShapeError(f"weighted_sum: {len(indices)} indices for {len(outputs)} outputs")
    ref = outputs[0].shape
    for o in outputs:
        if o.shape != ref:
            raise ShapeError(f"weighted_sum: output shape {o.shape} != {ref}")
    dt = outputs[0].dtype
    coefs = [dt.type(weights.data[idx]) for idx in indices]
    out = coefs[0] * outputs[0].data
    for cf, o in zip(coefs[1:], outputs[1:]):
        out = out + cf * o.data

    def bw(g):
        gw = None
        if weights.requires_grad:
            gw = np.zeros_like(weights.data)
            for idx, o in zip(indices, outputs):
                gw[idx] += np.vdot(g, o.data)
        return [gw] + [g * cf if o.requires_grad else None for cf, o in zip(coefs, outputs)]

    return make_output("weighted_sum", out, (weights,) + tuple(outputs), bw)


def straight_through(soft: Tensor, index) -> Tensor:
    """Exact one-hot rows at `index` in the forward pass; identity gradient to `soft`."""
    index = np.asarray(index, dtype=np.int64)
    hard = np.zeros_like(soft.data)
    if soft.ndim == 1:
        hard[int(index)] = 1
    else:
        hard[np.arange(soft.shape[0]), index] = 1
    return make_output("straight_through", hard, (soft,), lambda g: (g,))


def gamma_sample(concentration: Tensor, rng: np.random.Generator, eps: float = 1e-6) -> Tensor:
    """Draw Gamma(concentration, 1) variates with implicit reparameterisation.

    The gradient of a draw z w.r.t. its shape a is -dF(z; a)/da / f(z; a),
    where F is the regularised lower incomplete gamma function; dF/da is taken
    by central differences of `scipy.special.gammainc`.
    """
    a = concentration.data.astype(np.float64)
    if not np.isfinite(a).all() or (a <= 0).any():
        raise ValueError("gamma_sample: concentrations must be finite and positive")
    z = np.maximum(rng.standard_gamma(a), np.finfo(np.float64).tiny)

    def bw(g):
        h = np.maximum(eps * a, 1e-8)
        dF_da = (special.gammainc(a + h, z) - special.gammainc(a - h, z)) / (2 * h)
        log_pdf = (a - 1) * np.log(z) - z - special.gammaln(a)
        dz_da = -dF_da / np.exp(log_pdf)
        return ((g * dz_da).astype(concentration.dtype),)

    return make_output("gamma_sample", z.astype(concentration.dtype), (concentration,), bw)


# -------------------------------------------------------------------- dispatch

_DISPATCH = {
    "conv2d": conv2d, "depthwise_conv2d": depthwise_conv2d, "pointwise_conv2d": pointwise_conv2d,
    "dilated_conv2d": dilated_conv2d, "max_pool": max_pool, "avg_pool": avg_pool,
    "identity": identity, "zero": zero, "relu": relu, "batch_norm": batch_norm, "linear": linear,
    "softmax": softmax, "global_avg_pool": global_avg_pool, "add": add, "scalar_mul": scalar_mul,
    "concat_channels": concat_channels,
}


def forward_op(kind: str, params: Sequence, input, tape=None, **kwargs) -> Tensor:
    """Apply primitive `kind` to `input` with positional `params`, recording on `tape`.

    `add` takes its second operand as params[0]; `scalar_mul` its factor;
    `concat_channels` expects `input` to be a list of tensors.
    """
    if kind not in _DISPATCH:
        raise ValueError(f"forward_op: unknown primitive {kind!r}")
    fn = _DISPATCH[kind]
    if tape is None or tape is active_tape():
        return fn(input, *params, **kwargs)
    with tape:
        return fn(input, *params, **kwargs)
