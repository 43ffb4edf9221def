"""Parameter containers: a small module tree with deterministic ordering."""
from __future__ import annotations

import math
from typing import Iterable, Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, no_grad


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("buf_") and isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        extra = set(state) - set(params) - set(buffers)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in buffers.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        self._items: list[Module] = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> np.ndarray:
    # gain sqrt(2) for relu, bound = gain * sqrt(3 / fan_in)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng, stride=1, padding=0, bias=False):
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        if bias:
            self.bias = Parameter(np.zeros(c_out, dtype=np.float32))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, getattr(self, "bias", None), self.stride, self.padding)


class PointwiseConv(Module):
    def __init__(self, c_in: int, c_out: int, rng, stride=1, offset=0):
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in), c_in))
        self.stride, self.offset = stride, offset

    def forward(self, x: Tensor) -> Tensor:
        return ops.pointwise_conv2d(x, self.weight, self.stride, self.offset)


class DepthwiseConv(Module):
    def __init__(self, channels: int, k: int, rng, stride=1, padding=0, dilation=1):
        self.weight = Parameter(kaiming_uniform(rng, (channels, k, k), k * k))
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.stride, self.padding, self.dilation)


class BatchNorm(Module):
    """affine=False, track=False is the search-time configuration."""

    def __init__(self, channels: int, affine: bool = True, track_running_stats: bool = True,
                 momentum: float = 0.1, eps: float = 1e-5):
        if affine:
            self.weight = Parameter(np.ones(channels, dtype=np.float32))
            self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        if track_running_stats:
            self.buf_mean = np.zeros(channels, dtype=np.float64)
            self.buf_var = np.ones(channels, dtype=np.float64)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        rm = getattr(self, "buf_mean", None)
        rv = getattr(self, "buf_var", None)
        training = self.training or rm is None
        return ops.batch_norm(x, getattr(self, "weight", None), getattr(self, "bias", None),
                              rm, rv, training=training, momentum=self.momentum, eps=self.eps)


def recalibrate_batchnorm(model: Module, batches: Iterable[np.ndarray]) -> int:
    """Replace running statistics with the plain average over `batches`.

    Momentum is set to 1/k for the k-th batch so the buffers end as the mean
    of the per-batch statistics. Returns the number of batches seen.
    """
    bns = [m for m in model.modules() if isinstance(m, BatchNorm) and hasattr(m, "buf_mean")]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.buf_mean[...] = 0.0
        bn.buf_var[...] = 1.0
    was_training = model.training
    model.train()
    k = 0
    try:
        with no_grad():
            for x in batches:
                k += 1
                for bn in bns:
                    bn.momentum = 1.0 / k
                model(Tensor(x))
    finally:
        for bn, mom in zip(bns, saved):
            bn.momentum = mom
        model.train(was_training)
    return k


def relu_conv_bn(x: Tensor, pw: PointwiseConv, bn: BatchNorm, dw: "DepthwiseConv | None" = None) -> Tensor:
    """Run relu -> [dw] -> pw -> bn through the fused primitive."""
    rm = getattr(bn, "buf_mean", None)
    kw = {}
    if dw is not None:
        kw = {"stride": dw.stride, "padding": dw.padding, "dilation": dw.dilation}
    return ops.relu_conv_bn(x, pw.weight, None if dw is None else dw.weight,
                            getattr(bn, "weight", None), getattr(bn, "bias", None),
                            rm, getattr(bn, "buf_var", None), training=bn.training or rm is None,
                            momentum=bn.momentum, eps=bn.eps, **kw)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng):
        bound = 1.0 / math.sqrt(c_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, c_in)).astype(np.float32))
        self.bias = Parameter(rng.uniform(-bound, bound, c_out).astype(np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))
