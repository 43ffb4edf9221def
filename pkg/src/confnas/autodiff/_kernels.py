"""Compiled loops for depthwise convolution and 3x3-style pooling.

All kernels take NCHW arrays and are specialised per dtype by numba, so the
same code serves float32 training and float64 gradient checks.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def depthwise_forward(x, w, stride, pad, dil, out_h, out_w):
    n_batch, channels, height, width = x.shape
    k = w.shape[1]
    out = np.zeros((n_batch, channels, out_h, out_w), dtype=x.dtype)
    for n in range(n_batch):
        for c in range(channels):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    for oh in range(out_h):
                        ih = oh * stride - pad + i * dil
                        if ih < 0 or ih >= height:
                            continue
                        for ow in range(out_w):
                            iw = ow * stride - pad + j * dil
                            if iw < 0 or iw >= width:
                                continue
                            out[n, c, oh, ow] += wv * x[n, c, ih, iw]
    return out


@numba.njit(cache=True)
def depthwise_backward(g, x, w, stride, pad, dil, need_dx, need_dw):
    n_batch, channels, height, width = x.shape
    out_h, out_w = g.shape[2], g.shape[3]
    k = w.shape[1]
    dx = np.zeros(x.shape if need_dx else (0, 0, 0, 0), dtype=x.dtype)
    dw = np.zeros(w.shape if need_dw else (0, 0, 0), dtype=x.dtype)
    for n in range(n_batch):
        for c in range(channels):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    acc = 0.0
                    for oh in range(out_h):
                        ih = oh * stride - pad + i * dil
                        if ih < 0 or ih >= height:
                            continue
                        for ow in range(out_w):
                            iw = ow * stride - pad + j * dil
                            if iw < 0 or iw >= width:
                                continue
                            gv = g[n, c, oh, ow]
                            if need_dx:
                                dx[n, c, ih, iw] += wv * gv
                            if need_dw:
                                acc += x[n, c, ih, iw] * gv
                    if need_dw:
                        dw[c, i, j] += acc
    return dx, dw


@numba.njit(cache=True)
def bn_train_forward(x, eps):
    # returns xhat, batch mean, biased variance, 1/sqrt(var+eps)
    n_batch, channels, height, width = x.shape
    m = n_batch * height * width
    mu = np.zeros(channels, dtype=np.float64)
    var = np.zeros(channels, dtype=np.float64)
    for c in range(channels):
        s = 0.0
        for n in range(n_batch):
            for h in range(height):
                for w in range(width):
                    s += x[n, c, h, w]
        mu[c] = s / m
        s2 = 0.0
        for n in range(n_batch):
            for h in range(height):
                for w in range(width):
                    d = x[n, c, h, w] - mu[c]
                    s2 += d * d
        var[c] = s2 / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x)
    for n in range(n_batch):
        for c in range(channels):
            for h in range(height):
                for w in range(width):
                    xhat[n, c, h, w] = (x[n, c, h, w] - mu[c]) * inv[c]
    return xhat, mu, var, inv


@numba.njit(cache=True)
def bn_train_backward(gxhat, xhat, inv):
    n_batch, channels, height, width = xhat.shape
    m = n_batch * height * width
    gx = np.empty_like(xhat)
    for c in range(channels):
        sg = 0.0
        sgx = 0.0
        for n in range(n_batch):
            for h in range(height):
                for w in range(width):
                    sg += gxhat[n, c, h, w]
                    sgx += gxhat[n, c, h, w] * xhat[n, c, h, w]
        mg = sg / m
        mgx = sgx / m
        for n in range(n_batch):
            for h in range(height):
                for w in range(width):
                    gx[n, c, h, w] = (gxhat[n, c, h, w] - mg - xhat[n, c, h, w] * mgx) * inv[c]
    return gx


@numba.njit(cache=True)
def depthwise_forward_grouped(x, w, per_group, stride, pad, dil, out_h, out_w):
    # sample n uses filter bank w[n // per_group]
    n_batch, channels, height, width = x.shape
    k = w.shape[2]
    out = np.zeros((n_batch, channels, out_h, out_w), dtype=x.dtype)
    for n in range(n_batch):
        grp = n // per_group
        for c in range(channels):
            for i in range(k):
                for j in range(k):
                    wv = w[grp, c, i, j]
                    for oh in range(out_h):
                        ih = oh * stride - pad + i * dil
                        if ih < 0 or ih >= height:
                            continue
                        for ow in range(out_w):
                            iw = ow * stride - pad + j * dil
                            if iw < 0 or iw >= width:
                                continue
                            out[n, c, oh, ow] += wv * x[n, c, ih, iw]
    return out


@numba.njit(cache=True)
def depthwise_backward_grouped(g, x, w, per_group, stride, pad, dil, need_dx, need_dw):
    n_batch, channels, height, width = x.shape
    out_h, out_w = g.shape[2], g.shape[3]
    k = w.shape[2]
    dx = np.zeros(x.shape if need_dx else (0, 0, 0, 0), dtype=x.dtype)
    dw = np.zeros(w.shape if need_dw else (0, 0, 0, 0), dtype=x.dtype)
    for n in range(n_batch):
        grp = n // per_group
        for c in range(channels):
            for i in range(k):
                for j in range(k):
                    wv = w[grp, c, i, j]
                    acc = 0.0
                    for oh in range(out_h):
                        ih = oh * stride - pad + i * dil
                        if ih < 0 or ih >= height:
                            continue
                        for ow in range(out_w):
                            iw = ow * stride - pad + j * dil
                            if iw < 0 or iw >= width:
                                continue
                            gv = g[n, c, oh, ow]
                            if need_dx:
                                dx[n, c, ih, iw] += wv * gv
                            if need_dw:
                                acc += x[n, c, ih, iw] * gv
                    if need_dw:
                        dw[grp, c, i, j] += acc
    return dx, dw


@numba.njit(cache=True)
def bn_train_forward_grouped(x, per_group, eps):
    # statistics per (group, channel); returns xhat and inv of shape [groups, channels]
    n_batch, channels, height, width = x.shape
    groups = n_batch // per_group
    m = per_group * height * width
    inv = np.zeros((groups, channels), dtype=np.float64)
    xhat = np.empty_like(x)
    for grp in range(groups):
        n0 = grp * per_group
        for c in range(channels):
            s = 0.0
            for n in range(n0, n0 + per_group):
                for h in range(height):
                    for w in range(width):
                        s += x[n, c, h, w]
            mu = s / m
            s2 = 0.0
            for n in range(n0, n0 + per_group):
                for h in range(height):
                    for w in range(width):
                        d = x[n, c, h, w] - mu
                        s2 += d * d
            iv = 1.0 / np.sqrt(s2 / m + eps)
            inv[grp, c] = iv
            for n in range(n0, n0 + per_group):
                for h in range(height):
                    for w in range(width):
                        xhat[n, c, h, w] = (x[n, c, h, w] - mu) * iv
    return xhat, inv


@numba.njit(cache=True)
def bn_train_backward_grouped(gxhat, xhat, inv, per_group):
    n_batch, channels, height, width = xhat.shape
    groups = n_batch // per_group
    m = per_group * height * width
    gx = np.empty_like(xhat)
    for grp in range(groups):
        n0 = grp * per_group
        for c in range(channels):
            sg = 0.0
            sgx = 0.0
            for n in range(n0, n0 + per_group):
                for h in range(height):
                    for w in range(width):
                        sg += gxhat[n, c, h, w]
                        sgx += gxhat[n, c, h, w] * xhat[n, c, h, w]
            mg = sg / m
            mgx = sgx / m
            iv = inv[grp, c]
            for n in range(n0, n0 + per_group):
                for h in range(height):
                    for w in range(width):
                        gx[n, c, h, w] = (gxhat[n, c, h, w] - mg - xhat[n, c, h, w] * mgx) * iv
    return gx


@numba.njit(cache=True)
def max_pool_forward(x, k, stride, pad, out_h, out_w):
    n_batch, channels, height, width = x.shape
    out = np.empty((n_batch, channels, out_h, out_w), dtype=x.dtype)
    arg = np.empty((n_batch, channels, out_h, out_w), dtype=np.int64)
    for n in range(n_batch):
        for c in range(channels):
            for oh in range(out_h):
                for ow in range(out_w):
                    best = -np.inf
                    best_idx = -1
                    for i in range(k):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= height:
                            continue
                        for j in range(k):
                            iw = ow * stride - pad + j
                            if iw < 0 or iw >= width:
                                continue
                            v = x[n, c, ih, iw]
                            if best_idx < 0 or v > best:
                                best = v
                                best_idx = ih * width + iw
                    out[n, c, oh, ow] = best
                    arg[n, c, oh, ow] = best_idx
    return out, arg


@numba.njit(cache=True)
def max_pool_backward(g, arg, height, width):
    n_batch, channels, out_h, out_w = g.shape
    dx = np.zeros((n_batch, channels, height, width), dtype=g.dtype)
    for n in range(n_batch):
        for c in range(channels):
            for oh in range(out_h):
                for ow in range(out_w):
                    idx = arg[n, c, oh, ow]
                    dx[n, c, idx // width, idx % width] += g[n, c, oh, ow]
    return dx


@numba.njit(cache=True)
def avg_pool_counts(height, width, k, stride, pad, out_h, out_w, include_pad):
    counts = np.empty((out_h, out_w), dtype=np.float64)
    for oh in range(out_h):
        for ow in range(out_w):
            if include_pad:
                counts[oh, ow] = k * k
                continue
            cnt = 0
            for i in range(k):
                ih = oh * stride - pad + i
                if ih < 0 or ih >= height:
                    continue
                for j in range(k):
                    iw = ow * stride - pad + j
                    if 0 <= iw < width:
                        cnt += 1
            counts[oh, ow] = cnt
    return counts


@numba.njit(cache=True)
def avg_pool_forward(x, k, stride, pad, out_h, out_w, counts):
    n_batch, channels, height, width = x.shape
    out = np.zeros((n_batch, channels, out_h, out_w), dtype=x.dtype)
    for n in range(n_batch):
        for c in range(channels):
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = 0.0
                    for i in range(k):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= height:
                            continue
                        for j in range(k):
                            iw = ow * stride - pad + j
                            if 0 <= iw < width:
                                acc += x[n, c, ih, iw]
                    out[n, c, oh, ow] = acc / counts[oh, ow]
    return out


@numba.njit(cache=True)
def avg_pool_backward(g, k, stride, pad, height, width, counts):
    n_batch, channels, out_h, out_w = g.shape
    dx = np.zeros((n_batch, channels, height, width), dtype=g.dtype)
    for n in range(n_batch):
        for c in range(channels):
            for oh in range(out_h):
                for ow in range(out_w):
                    share = g[n, c, oh, ow] / counts[oh, ow]
                    for i in range(k):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= height:
                            continue
                        for j in range(k):
                            iw = ow * stride - pad + j
                            if 0 <= iw < width:
                                dx[n, c, ih, iw] += share
    return dx
