"""SGD/Adam updates and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)  # param index -> tuple of arrays

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd(lr: float, momentum: float = 0.9, weight_decay: float = 3e-4) -> OptimizerState:
    return OptimizerState("sgd", lr=lr, momentum=momentum, weight_decay=weight_decay)


def adam(lr: float, beta1: float = 0.5, beta2: float = 0.999, weight_decay: float = 1e-3) -> OptimizerState:
    return OptimizerState("adam", lr=lr, beta1=beta1, beta2=beta2, weight_decay=weight_decay)


def optimizer_step(state: OptimizerState, params: Sequence[Tensor], grads: dict,
                   lr: float | None = None, skip: frozenset = frozenset()) -> OptimizerState:
    """Update `params` in place from `grads` (classic L2: g <- g + wd * w).

    Buffers are keyed by the parameter's position in `params`, so the same
    ordering must be passed on every call. Positions in `skip` are left
    untouched, buffers included.
    """
    for i, p in enumerate(params):
        if i not in skip and p not in grads:
            raise KeyError(f"optimizer_step: no gradient for {p!r}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    for i, p in enumerate(params):
        if i in skip:
            continue
        g = grads[p].astype(p.dtype, copy=False)
        if state.weight_decay:
            g = g + p.dtype.type(state.weight_decay) * p.data
        if state.kind == "sgd":
            if state.momentum:
                buf = state.buffers.get(i)
                if buf is None:
                    v = g.copy()
                else:
                    v = buf[0] * p.dtype.type(state.momentum) + g
                state.buffers[i] = (v,)
                g = v
            p.data = p.data - p.dtype.type(lr) * g
        else:
            buf = state.buffers.get(i)
            m, v = (np.zeros_like(p.data), np.zeros_like(p.data)) if buf is None else buf
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.buffers[i] = (m.astype(p.dtype), v.astype(p.dtype))
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return state


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float
    lr_min: float = 0.0
    total_epochs: int = 1
    kind: str = "cosine_annealing"  # or "constant"


def cosine_lr(epoch: int, schedule: LrSchedule) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"cosine_lr: epoch {epoch} outside [0, {schedule.total_epochs}]")
    if schedule.kind == "constant":
        return schedule.lr_max
    frac = epoch / schedule.total_epochs if schedule.total_epochs else 0.0
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1 + math.cos(math.pi * frac))
