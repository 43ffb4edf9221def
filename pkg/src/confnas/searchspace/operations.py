"""Candidate operations and the three operation sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import ops, stacked
from ..autodiff.nn import BatchNorm, DepthwiseConv, Module, PointwiseConv, relu_conv_bn
from ..autodiff.tensor import Tensor

REGULAR_OPS = (
    "zero", "skip_connect", "max_pool_3x3", "avg_pool_3x3",
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
)
PARAMETRIC_OPS = frozenset({"sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5"})
OPSET_KINDS = ("regular", "no_skip", "all_skip")


@dataclass(frozen=True)
class OpSpec:
    name: str
    residual: bool = False  # output(x) = op(x) + skip(x)


@dataclass(frozen=True)
class OperationSet:
    kind: str
    ops: tuple[OpSpec, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.ops)

    def __len__(self) -> int:
        return len(self.ops)

    def index(self, name: str) -> int:
        return self.names.index(name)


def make_operation_set(kind: str) -> OperationSet:
    if kind == "regular":
        return OperationSet(kind, tuple(OpSpec(n) for n in REGULAR_OPS))
    if kind == "no_skip":
        return OperationSet(kind, tuple(OpSpec(n) for n in REGULAR_OPS if n != "skip_connect"))
    if kind == "all_skip":
        return OperationSet(kind, tuple(OpSpec(n, residual=n in PARAMETRIC_OPS) for n in REGULAR_OPS))
    raise ValueError(f"unknown operation set {kind!r}; expected one of {OPSET_KINDS}")


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ops.identity(x)


class Zero(Module):
    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        if self.stride == 1:
            return ops.zero(x)
        n, c, h, w = x.shape
        s = self.stride
        return Tensor(np.zeros((n, c, -(-h // s), -(-w // s)), dtype=x.dtype))


class ReLUConvBN(Module):
    def __init__(self, c_in: int, c_out: int, rng, affine: bool, track: bool):
        self.conv = PointwiseConv(c_in, c_out, rng)
        self.bn = BatchNorm(c_out, affine=affine, track_running_stats=track)

    def forward(self, x: Tensor) -> Tensor:
        return relu_conv_bn(x, self.conv, self.bn)


class FactorizedReduce(Module):
    """Halve the resolution with two offset stride-2 1x1 convolutions."""

    def __init__(self, c_in: int, c_out: int, rng, affine: bool, track: bool):
        self.conv_1 = PointwiseConv(c_in, c_out // 2, rng, stride=2, offset=0)
        self.conv_2 = PointwiseConv(c_in, c_out - c_out // 2, rng, stride=2, offset=1)
        self.bn = BatchNorm(c_out, affine=affine, track_running_stats=track)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.relu(x)
        a, b = self.conv_1(x), self.conv_2(x)
        if a.shape[2:] != b.shape[2:]:
            # odd spatial size: the offset branch is one short; sample at offset 0 instead
            b = ops.pointwise_conv2d(x, self.conv_2.weight, stride=2, offset=0)
        return self.bn(ops.concat_channels([a, b]))


class SepConv(Module):
    def __init__(self, c: int, k: int, stride: int, rng, affine: bool, track: bool):
        pad = k // 2
        self.dw_1 = DepthwiseConv(c, k, rng, stride=stride, padding=pad)
        self.pw_1 = PointwiseConv(c, c, rng)
        self.bn_1 = BatchNorm(c, affine=affine, track_running_stats=track)
        self.dw_2 = DepthwiseConv(c, k, rng, stride=1, padding=pad)
        self.pw_2 = PointwiseConv(c, c, rng)
        self.bn_2 = BatchNorm(c, affine=affine, track_running_stats=track)

    def forward(self, x: Tensor) -> Tensor:
        x = relu_conv_bn(x, self.pw_1, self.bn_1, self.dw_1)
        return relu_conv_bn(x, self.pw_2, self.bn_2, self.dw_2)


class DilConv(Module):
    def __init__(self, c: int, k: int, stride: int, rng, affine: bool, track: bool, dilation: int = 2):
        self.dw = DepthwiseConv(c, k, rng, stride=stride, padding=dilation * (k - 1) // 2, dilation=dilation)
        self.pw = PointwiseConv(c, c, rng)
        self.bn = BatchNorm(c, affine=affine, track_running_stats=track)

    def forward(self, x: Tensor) -> Tensor:
        return relu_conv_bn(x, self.pw, self.bn, self.dw)


class Pool(Module):
    def __init__(self, kind: str, c: int, stride: int, with_bn: bool):
        self.kind, self.stride = kind, stride
        if with_bn:
            self.bn = BatchNorm(c, affine=False, track_running_stats=False)

    def forward(self, x: Tensor) -> Tensor:
        pool = ops.max_pool if self.kind == "max" else ops.avg_pool
        out = pool(x, 3, self.stride, 1)
        bn = getattr(self, "bn", None)
        return bn(out) if bn is not None else out


class Residual(Module):
    def __init__(self, op: Module, skip: Module):
        self.op, self.skip = op, skip

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(self.op(x), self.skip(x))


def _skip(c: int, stride: int, rng, affine: bool, track: bool) -> Module:
    return Identity() if stride == 1 else FactorizedReduce(c, c, rng, affine, track)


def make_op(spec: OpSpec | str, c: int, stride: int, rng, search: bool) -> Module:
    """Instantiate a candidate op on `c` channels.

    Search-time ops use batch statistics without affine parameters and add a
    normalisation after pooling; discrete-model ops use affine batch norm
    with running statistics.
    """
    if isinstance(spec, str):
        spec = OpSpec(spec)
    affine = track = not search
    name = spec.name
    if name == "zero":
        op: Module = Zero(stride)
    elif name == "skip_connect":
        op = _skip(c, stride, rng, affine, track)
    elif name == "max_pool_3x3":
        op = Pool("max", c, stride, with_bn=search)
    elif name == "avg_pool_3x3":
        op = Pool("avg", c, stride, with_bn=search)
    elif name == "sep_conv_3x3":
        op = SepConv(c, 3, stride, rng, affine, track)
    elif name == "sep_conv_5x5":
        op = SepConv(c, 5, stride, rng, affine, track)
    elif name == "dil_conv_3x3":
        op = DilConv(c, 3, stride, rng, affine, track)
    elif name == "dil_conv_5x5":
        op = DilConv(c, 5, stride, rng, affine, track)
    else:
        raise ValueError(f"unknown operation {name!r}")
    if spec.residual:
        op = Residual(op, _skip(c, stride, rng, affine, track))
    return op


def _search_bn(bn: BatchNorm) -> float:
    if hasattr(bn, "weight") or hasattr(bn, "buf_mean"):
        raise ValueError("stacked evaluation needs search-time batch norm (no affine, no running stats)")
    return bn.eps


def stacked_forward(modules: list, x: Tensor) -> Tensor:
    """Apply the same kind of op, one instance per edge, to edge-stacked input [E, N, C, H, W]."""
    m0 = modules[0]
    if isinstance(m0, Identity):
        return x
    if isinstance(m0, Residual):
        return ops.add(stacked_forward([m.op for m in modules], x), stacked_forward([m.skip for m in modules], x))
    if isinstance(m0, SepConv):
        y = stacked.stacked_relu_conv_bn(x, [m.pw_1.weight for m in modules], [m.dw_1.weight for m in modules],
                                         m0.dw_1.stride, m0.dw_1.padding, m0.dw_1.dilation, _search_bn(m0.bn_1))
        return stacked.stacked_relu_conv_bn(y, [m.pw_2.weight for m in modules], [m.dw_2.weight for m in modules],
                                            1, m0.dw_2.padding, m0.dw_2.dilation, _search_bn(m0.bn_2))
    if isinstance(m0, DilConv):
        return stacked.stacked_relu_conv_bn(x, [m.pw.weight for m in modules], [m.dw.weight for m in modules],
                                            m0.dw.stride, m0.dw.padding, m0.dw.dilation, _search_bn(m0.bn))
    if isinstance(m0, Pool):
        bn = getattr(m0, "bn", None)
        return stacked.stacked_pool(x, m0.kind, 3, m0.stride, 1, normalize=bn is not None,
                                    eps=_search_bn(bn) if bn is not None else 1e-5)
    if isinstance(m0, FactorizedReduce):
        return stacked.stacked_factorized_reduce(x, [m.conv_1.weight for m in modules],
                                                 [m.conv_2.weight for m in modules], _search_bn(m0.bn))
    raise TypeError(f"no stacked evaluation for {type(m0).__name__}")
