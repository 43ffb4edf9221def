"""Supernet modifications independent of the sampler: partial channels,
architecture perturbation and operation pruning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tape, Tensor, backward
from .samplers import ArchParameters, SampledWeights
from .searchspace.genotype import activate
from .searchspace.supernet import ForwardContext, MixedEdge, mixed_edge_forward

PERTURBATIONS = ("none", "random", "adversarial")


@dataclass
class MutationConfig:
    partial_connection: bool = False
    K: int = 1
    perturbation: str = "none"
    epsilon: float = 0.1
    prune_epochs: list[int] = field(default_factory=list)
    prune_fractions: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation {self.perturbation!r}; expected one of {PERTURBATIONS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if len(self.prune_epochs) != len(self.prune_fractions):
            raise ValueError("prune_epochs and prune_fractions must have the same length")
        if any(b <= a for a, b in zip(self.prune_epochs, self.prune_epochs[1:])):
            raise ValueError("prune_epochs must be strictly increasing")
        if any(not 0 < f < 1 for f in self.prune_fractions):
            raise ValueError("prune fractions must lie in (0, 1)")

    @property
    def partial_k(self) -> int:
        return self.K if self.partial_connection else 1


# ------------------------------------------------------------ partial channels

def partial_channel_forward(edge: MixedEdge, x: Tensor, weights, K: int,
                            rng: np.random.Generator) -> Tensor:
    """Mixed-edge forward with a random 1/K channel subset (the edge must be built with K)."""
    if K == 1 and edge.partial_k == 1:
        return mixed_edge_forward(edge, x, weights)
    if edge.partial_k != K:
        raise ShapeError(f"partial connection: edge was built for K={edge.partial_k}, called with K={K}")
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=x.dtype))
    if w.ndim == 1:
        w = ops.reshape(w, (1, -1))
    if w.shape[1] != len(edge.names):
        raise ShapeError(f"partial connection: {w.shape[1]} weights for {len(edge.names)} operations")
    ctx = ForwardContext(SampledWeights({"edge": w}, {"edge": None}), partial_rng=rng)
    return edge(x, ctx, "edge", 0)


# ---------------------------------------------------------------- perturbation

def perturb(arch: ArchParameters, mode: str, epsilon: float, rng: np.random.Generator,
            val_batch=None, loss_fn: Optional[Callable[[dict, object], Tensor]] = None) -> dict[str, Tensor]:
    """Perturbed copies of alpha for the weight step; `arch` itself is not modified.

    random: alpha + U(-eps, eps). adversarial: alpha + eps * sign(dL_val/dalpha),
    where `loss_fn(alpha_by_cell_type, val_batch)` returns the validation loss.
    """
    if epsilon < 0:
        raise ValueError("perturb: epsilon must be >= 0")
    if mode == "random":
        return {ct: Tensor(a.data + rng.uniform(-epsilon, epsilon, a.shape).astype(a.dtype))
                for ct, a in arch.alpha.items()}
    if mode == "adversarial":
        if val_batch is None or loss_fn is None:
            raise ValueError("perturb: adversarial mode needs a validation batch and loss function")
        probes = {ct: Tensor(a.data.copy(), requires_grad=True) for ct, a in arch.alpha.items()}
        with Tape() as tape:
            loss = loss_fn(probes, val_batch)
        grads = backward(tape, loss, params=list(probes.values()))
        return {ct: Tensor(arch.alpha[ct].data + (epsilon * np.sign(grads[p])).astype(p.dtype))
                for ct, p in probes.items()}
    raise ValueError(f"perturb: unknown mode {mode!r}")


# --------------------------------------------------------------------- pruning

@dataclass
class PruneState:
    masks: dict[str, np.ndarray]  # cell type -> bool [edges, ops], True = active

    @classmethod
    def full(cls, arch: ArchParameters) -> "PruneState":
        return cls({ct: np.ones(arch.alpha[ct].shape, dtype=bool) for ct in arch.cell_types})

    def copy(self) -> "PruneState":
        return PruneState({ct: m.copy() for ct, m in self.masks.items()})

    def active_counts(self) -> dict[str, np.ndarray]:
        return {ct: m.sum(axis=1) for ct, m in self.masks.items()}


def prune(state: PruneState, arch: ArchParameters, fraction: float, activation: str = "softmax") -> PruneState:
    """Deactivate floor(fraction * active) lowest-weight ops per edge, keeping one non-zero op."""
    if not 0 < fraction < 1:
        raise ValueError(f"prune fraction must lie in (0, 1), got {fraction}")
    nonzero = np.array([n != "zero" for n in arch.op_names])
    out = state.copy()
    for ct in arch.cell_types:
        mask = out.masks[ct]
        weights = activate(arch.alpha[ct].data, activation, mask)
        for e in range(mask.shape[0]):
            active = np.flatnonzero(mask[e])
            n_drop = math.floor(fraction * len(active))
            # lowest weight first; ties drop the higher op index first so order is stable
            order = sorted(active, key=lambda o: (weights[e, o], -o))
            for o in order:
                if n_drop == 0:
                    break
                if nonzero[o] and (mask[e] & nonzero).sum() == 1:
                    continue
                mask[e, o] = False
                n_drop -= 1
    return out


def prune_schedule(config: MutationConfig) -> Mapping[int, float]:
    return dict(zip(config.prune_epochs, config.prune_fractions))


def merge_masks(a: Optional[Mapping[str, np.ndarray]], b: Optional[Mapping[str, np.ndarray]]) -> Optional[dict]:
    if a is None:
        return None if b is None else dict(b)
    if b is None:
        return dict(a)
    return {ct: a[ct] & b[ct] for ct in a}


def op_evaluation_count(masks: Optional[Mapping[str, np.ndarray]], op_names: Sequence[str],
                        cells_per_type: Mapping[str, int], edges: int) -> int:
    """Non-zero op forwards one supernet pass performs under `masks` (DARTS-style sampler)."""
    nonzero = np.array([n != "zero" for n in op_names])
    total = 0
    for ct, n_cells in cells_per_type.items():
        active = nonzero[None, :].repeat(edges, 0) if masks is None else masks[ct] & nonzero
        total += n_cells * int(active.sum())
    return total
