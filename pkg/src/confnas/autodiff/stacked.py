"""Primitives over edge-stacked activations.

A stacked tensor has shape [E, N, C, H, W]: the inputs (or outputs) of E
cell edges that share a node. Every edge keeps its own weights and its own
batch-norm statistics; stacking only lets one tape node and one kernel call
serve all edges of a node. Batch norm here is the search-time flavour
(batch statistics, no affine parameters, no running buffers).
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .ops import _out_size
from .tensor import ShapeError, Tensor, make_output


def _check5(x: Tensor, kind: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{kind}: expected [E, N, C, H, W], got shape {x.shape}")


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading edge axis."""
    if not xs:
        raise ShapeError("stack: no inputs")
    ref = xs[0].shape
    for t in xs:
        if t.shape != ref:
            raise ShapeError(f"stack: shape {t.shape} != {ref}")
    out = np.stack([t.data for t in xs])
    return make_output("stack", out, tuple(xs), lambda g: [g[i] for i in range(len(xs))])


def concat_edges(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=0)
    return make_output("concat_edges", out, tuple(xs),
                       lambda g: [g[bounds[i]:bounds[i + 1]] for i in range(len(xs))])


def select_edges(x: Tensor, index) -> Tensor:
    """Rows `index` (distinct) of the edge axis."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) == x.shape[0] and (index == np.arange(len(index))).all():
        return x
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return make_output("select_edges", x.data[index], (x,), bw)


def _bn_grouped(p: np.ndarray, per_group: int, eps: float):
    xhat, inv = _kernels.bn_train_forward_grouped(np.ascontiguousarray(p), per_group, eps)
    return xhat, inv.astype(p.dtype)


def stacked_relu_conv_bn(x: Tensor, pws: Sequence[Tensor], dws: Optional[Sequence[Tensor]] = None,
                         stride: int = 1, padding: int = 0, dilation: int = 1, eps: float = 1e-5) -> Tensor:
    """Per edge e: batch_norm(pointwise(pws[e], [depthwise(dws[e], ] relu(x[e]))))."""
    _check5(x, "stacked_relu_conv_bn")
    e, n, c, h, w = x.shape
    if len(pws) != e or (dws is not None and len(dws) != e):
        raise ShapeError(f"stacked_relu_conv_bn: {len(pws)} weight sets for {e} edges")
    pw = np.stack([t.data for t in pws]).astype(x.dtype, copy=False)
    if pw.shape[2] != c:
        raise ShapeError(f"stacked_relu_conv_bn: input channels {c} != pointwise in-channels {pw.shape[2]}")
    c_out = pw.shape[1]
    r = np.maximum(x.data, 0).reshape(e * n, c, h, w)
    if dws is not None:
        dw = np.stack([t.data for t in dws]).astype(x.dtype, copy=False)
        if dw.shape[1] != c:
            raise ShapeError(f"stacked_relu_conv_bn: depthwise shape {dw.shape[1:]} for {c} channels")
        k = dw.shape[2]
        ho = _out_size(h, k, stride, padding, dilation, "stacked_relu_conv_bn")
        wo = _out_size(w, k, stride, padding, dilation, "stacked_relu_conv_bn")
        d = _kernels.depthwise_forward_grouped(r, dw, n, stride, padding, dilation, ho, wo)
    else:
        ho, wo = h, w
        d = r
    hw = ho * wo
    flat = d.reshape(e, n, c, hw)
    p = np.matmul(pw[:, None], flat).reshape(e * n, c_out, ho, wo)
    xhat, inv = _bn_grouped(p, n, eps)
    inputs = (x,) + tuple(pws) + (tuple(dws) if dws is not None else ())
    need_dw = dws is not None and any(t.requires_grad for t in dws)
    need_pw = any(t.requires_grad for t in pws)
    need_d = x.requires_grad or need_dw

    def bw(g):
        gp = _kernels.bn_train_backward_grouped(np.ascontiguousarray(g.reshape(e * n, c_out, ho, wo)),
                                                xhat, inv, n)
        g2 = gp.reshape(e, n, c_out, hw)
        grads = [None]
        if need_pw:
            gt = g2.transpose(0, 2, 1, 3).reshape(e, c_out, n * hw)
            ft = flat.transpose(0, 2, 1, 3).reshape(e, c, n * hw)
            gpw = np.matmul(gt, ft.transpose(0, 2, 1))
            grads += [gpw[i] for i in range(e)]
        else:
            grads += [None] * e
        gdw = None
        if need_d:
            gd = np.matmul(pw.transpose(0, 2, 1)[:, None], g2).reshape(e * n, c, ho, wo)
            if dws is not None:
                gr, gdw = _kernels.depthwise_backward_grouped(np.ascontiguousarray(gd), r, dw, n, stride,
                                                              padding, dilation, x.requires_grad, need_dw)
            else:
                gr = gd
            if x.requires_grad:
                grads[0] = (gr * (r > 0)).reshape(x.shape)
        if dws is not None:
            grads += [gdw[i] for i in range(e)] if need_dw else [None] * e
        return grads

    return make_output("stacked_relu_conv_bn", xhat.reshape(e, n, c_out, ho, wo), inputs, bw)


def stacked_pool(x: Tensor, kind: str, kernel: int = 3, stride: int = 1, padding: int = 1,
                 normalize: bool = False, eps: float = 1e-5) -> Tensor:
    """Max or average pooling (padding excluded from averages), optionally followed by per-edge batch norm."""
    _check5(x, "stacked_pool")
    e, n, c, h, w = x.shape
    ho = _out_size(h, kernel, stride, padding, 1, "stacked_pool")
    wo = _out_size(w, kernel, stride, padding, 1, "stacked_pool")
    flat = np.ascontiguousarray(x.data).reshape(e * n, c, h, w)
    if kind == "max":
        pooled, arg = _kernels.max_pool_forward(flat, kernel, stride, padding, ho, wo)
    elif kind == "avg":
        counts = _kernels.avg_pool_counts(h, w, kernel, stride, padding, ho, wo, False)
        pooled = _kernels.avg_pool_forward(flat, kernel, stride, padding, ho, wo, counts)
    else:
        raise ValueError(f"stacked_pool: unknown pool kind {kind!r}")
    out, xhat, inv = pooled, None, None
    if normalize:
        xhat, inv = _bn_grouped(pooled, n, eps)
        out = xhat

    def bw(g):
        g = np.ascontiguousarray(g.reshape(e * n, c, ho, wo), dtype=x.dtype)
        if normalize:
            g = _kernels.bn_train_backward_grouped(g, xhat, inv, n)
        if kind == "max":
            gx = _kernels.max_pool_backward(g, arg, h, w)
        else:
            gx = _kernels.avg_pool_backward(g, kernel, stride, padding, h, w, counts)
        return (gx.reshape(x.shape),)

    return make_output("stacked_pool", out.reshape(e, n, c, ho, wo), (x,), bw)


def stacked_factorized_reduce(x: Tensor, w1s: Sequence[Tensor], w2s: Sequence[Tensor], eps: float = 1e-5) -> Tensor:
    """Per edge: batch_norm(concat(pw1 @ relu(x)[::2, ::2], pw2 @ relu(x)[1::2, 1::2]))."""
    _check5(x, "stacked_factorized_reduce")
    e, n, c, h, w = x.shape
    w1 = np.stack([t.data for t in w1s]).astype(x.dtype, copy=False)
    w2 = np.stack([t.data for t in w2s]).astype(x.dtype, copy=False)
    c1, c2 = w1.shape[1], w2.shape[1]
    r = np.maximum(x.data, 0)
    a = r[..., 0::2, 0::2]
    off = 1 if r[..., 1::2, 1::2].shape[-2:] == a.shape[-2:] else 0
    b = r[..., off::2, off::2]
    ho, wo = a.shape[-2:]
    hw = ho * wo
    fa = np.ascontiguousarray(a).reshape(e, n, c, hw)
    fb = np.ascontiguousarray(b).reshape(e, n, c, hw)
    p = np.concatenate([np.matmul(w1[:, None], fa), np.matmul(w2[:, None], fb)], axis=2)
    xhat, inv = _bn_grouped(p.reshape(e * n, c1 + c2, ho, wo), n, eps)
    inputs = (x,) + tuple(w1s) + tuple(w2s)

    def wgrad(gs, f, cw):
        gt = gs.transpose(0, 2, 1, 3).reshape(e, cw, n * hw)
        ft = f.transpose(0, 2, 1, 3).reshape(e, c, n * hw)
        return np.matmul(gt, ft.transpose(0, 2, 1))

    def bw(g):
        gp = _kernels.bn_train_backward_grouped(np.ascontiguousarray(g.reshape(e * n, c1 + c2, ho, wo)),
                                                xhat, inv, n).reshape(e, n, c1 + c2, hw)
        ga, gb = gp[:, :, :c1], gp[:, :, c1:]
        gw1 = wgrad(ga, fa, c1) if any(t.requires_grad for t in w1s) else None
        gw2 = wgrad(gb, fb, c2) if any(t.requires_grad for t in w2s) else None
        gx = None
        if x.requires_grad:
            gr = np.zeros(x.shape, dtype=x.dtype)
            gr[..., 0::2, 0::2] += np.matmul(w1.transpose(0, 2, 1)[:, None], ga).reshape(e, n, c, ho, wo)
            gr[..., off::2, off::2] += np.matmul(w2.transpose(0, 2, 1)[:, None], gb).reshape(e, n, c, ho, wo)
            gx = gr * (r > 0)
        return ([gx] + ([gw1[i] for i in range(e)] if gw1 is not None else [None] * e)
                + ([gw2[i] for i in range(e)] if gw2 is not None else [None] * e))

    return make_output("stacked_factorized_reduce", xhat.reshape(e, n, c1 + c2, ho, wo), inputs, bw)


def gather_channels_per_edge(x: Tensor, index: np.ndarray) -> Tensor:
    """out[e] = x[e][:, index[e]] for a [E, K] integer index of distinct channels per edge."""
    _check5(x, "gather_channels_per_edge")
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_channels_per_edge: index shape {index.shape} for {x.shape[0]} edges")
    idx = index[:, None, :, None, None]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.broadcast_to(idx, g.shape), g, axis=2)
        return (gx,)

    out = np.take_along_axis(x.data, np.broadcast_to(idx, shape[:2] + (index.shape[1],) + shape[3:]), axis=2)
    return make_output("gather_channels_per_edge", out, (x,), bw)


def concat_channels_stacked(xs: Sequence[Tensor]) -> Tensor:
    bounds = np.cumsum([0] + [t.shape[2] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=2)
    return make_output("concat_channels_stacked", out, tuple(xs),
                       lambda g: [g[:, :, bounds[i]:bounds[i + 1]] for i in range(len(xs))])


def mix_edges(weights: Tensor, rows: Sequence[int], groups: Sequence[tuple[int, Sequence[int]]],
              outs: Sequence[Tensor], n_edges: int) -> Tensor:
    """out[e] = sum over groups k containing e of weights[rows[e], op_k] * outs[k][position of e].

    `groups[k]` is (op index, edge positions); edges absent from every group are zero.
    """
    if len(groups) != len(outs) or not outs:
        raise ShapeError(f"mix_edges: {len(groups)} groups for {len(outs)} outputs")
    rows = np.asarray(rows, dtype=np.int64)
    ref = outs[0].shape[1:]
    dt = outs[0].dtype
    out = np.zeros((n_edges,) + ref, dtype=dt)
    coefs = []
    for (o, pos), t in zip(groups, outs):
        pos = np.asarray(pos, dtype=np.int64)
        if t.shape != (len(pos),) + ref:
            raise ShapeError(f"mix_edges: output shape {t.shape} for {len(pos)} edges of {ref}")
        cf = weights.data[rows[pos], o].astype(dt)
        coefs.append(cf)
        out[pos] += cf[:, None, None, None, None] * t.data

    def bw(g):
        gw = None
        if weights.requires_grad:
            gw = np.zeros_like(weights.data)
        grads = []
        for (o, pos), t, cf in zip(groups, outs, coefs):
            gsel = g[pos]
            if gw is not None:
                dots = (gsel.reshape(len(pos), -1) * t.data.reshape(len(pos), -1)).sum(axis=1)
                np.add.at(gw, (rows[pos], o), dots)
            grads.append(gsel * cf[:, None, None, None, None] if t.requires_grad else None)
        return [gw] + grads

    return make_output("mix_edges", out, (weights,) + tuple(outs), bw)


def reduce_edges(x: Tensor, weights: Optional[Tensor] = None, indices: Optional[Sequence] = None) -> Tensor:
    """Sum over the edge axis, each edge scaled by weights[indices[e]] when weights are given."""
    _check5(x, "reduce_edges")
    if weights is None:
        return make_output("reduce_edges", x.data.sum(axis=0), (x,),
                           lambda g: (np.broadcast_to(g, x.shape).copy(),))
    idx = tuple(np.asarray(a, dtype=np.int64) for a in zip(*indices))
    cf = weights.data[idx].astype(x.dtype)
    out = np.tensordot(cf, x.data, axes=(0, 0))

    def bw(g):
        gw = None
        if weights.requires_grad:
            gw = np.zeros_like(weights.data)
            dots = x.data.reshape(x.shape[0], -1) @ g.reshape(-1)
            np.add.at(gw, idx, dots)
        gx = cf[:, None, None, None, None] * g[None] if x.requires_grad else None
        return gw, gx

    return make_output("reduce_edges", out, (weights, x), bw)
