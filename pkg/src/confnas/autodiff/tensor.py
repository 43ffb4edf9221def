"""Dense tensors and the recording tape used for reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """An operation received inputs whose shapes it cannot combine."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a loss or gradient."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; the primitives live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


class Node:
    __slots__ = ("kind", "out", "inputs", "backward")

    def __init__(self, kind: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of the primitive operations applied while it is active.

    Nodes are appended as operations run, so the record is already in
    topological order and the backward sweep simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]


class _NoTape:
    def __enter__(self):
        _TAPES.append(None)

    def __exit__(self, *exc):
        _TAPES.pop()


def no_grad() -> _NoTape:
    """Context in which nothing is recorded, even for tensors requiring grad."""
    return _NoTape()


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def make_output(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap `data` as the output of `kind`, recording it when a gradient can flow."""
    tape = active_tape()
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.is_leaf = False
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(kind, out, tuple(inputs), backward))
    else:
        out.requires_grad = False
        out.is_leaf = True
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Tensor]] = None,
             check_finite: bool = True) -> dict:
    """Propagate d(loss)/d(.) through `tape`.

    Returns a map from each reached leaf tensor that requires grad to its
    gradient. Tensors in `params` that the loss does not depend on are
    included with zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if check_finite and not np.isfinite(loss.data).all():
        raise NonFiniteError(f"backward: loss is not finite ({loss.data.reshape(-1)[0]})")
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(tape.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                store = leaf_grads if t.is_leaf else pending
                prev = store.get(key)
                if prev is None:
                    if gi.shape != t.data.shape:
                        raise ShapeError(f"backward({node.kind}): gradient shape {gi.shape} "
                                         f"!= input shape {t.data.shape}")
                    store[key] = gi
                else:
                    store[key] = prev + gi
                if t.is_leaf:
                    leaves[key] = t
        if loss.is_leaf and id(loss) not in leaves:
            leaves[id(loss)] = loss
            leaf_grads[id(loss)] = np.ones_like(loss.data)
    grads = {leaves[k]: v for k, v in leaf_grads.items()}
    if params is not None:
        for p in params:
            if p not in grads:
                grads[p] = np.zeros_like(p.data)
    if check_finite:
        for t, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"backward: non-finite gradient for {t!r}")
    return grads
