"""Architecture-parameter samplers: softmax (DARTS), Gumbel straight-through
(GDAS), Dirichlet (DrNAS), sigmoid (FairDARTS) and edge normalisation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Parameter, ShapeError, Tensor

SAMPLER_KINDS = ("darts", "gdas", "drnas", "fairdarts")


@dataclass
class ArchParameters:
    """Per-cell-type alpha[edge][op], optional beta[node][incoming edge]."""

    alpha: dict[str, Parameter]
    nodes: int
    op_names: tuple[str, ...]
    beta: Optional[dict[str, Parameter]] = None

    @property
    def cell_types(self) -> tuple[str, ...]:
        return tuple(self.alpha)

    @property
    def edges(self) -> int:
        return next(iter(self.alpha.values())).shape[0]

    def tensors(self) -> list[Parameter]:
        out = [self.alpha[ct] for ct in self.cell_types]
        if self.beta:
            out += [self.beta[ct] for ct in self.cell_types]
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {ct: self.alpha[ct].data.astype(np.float64) for ct in self.cell_types}

    def beta_mask(self) -> np.ndarray:
        return node_edge_mask(self.nodes)

    def check_finite(self) -> None:
        for t in self.tensors():
            if not np.isfinite(t.data).all():
                raise FloatingPointError(f"architecture parameters {t.name} are not finite")


def node_edge_mask(nodes: int) -> np.ndarray:
    mask = np.zeros((nodes, nodes + 1), dtype=bool)
    for j in range(nodes):
        mask[j, : j + 2] = True
    return mask


def node_slices(nodes: int) -> list[tuple[int, int]]:
    out, start = [], 0
    for j in range(nodes):
        out.append((start, start + j + 2))
        start += j + 2
    return out


def init_arch_parameters(cell_types: Sequence[str], edges: int, op_names: Sequence[str], nodes: int,
                         rng: np.random.Generator, sampler_kind: str = "darts",
                         edge_normalization: bool = False) -> ArchParameters:
    """alpha ~ N(0, 1e-3); Dirichlet log-concentrations start at 0 (concentration 1)."""
    alpha = {}
    for ct in cell_types:
        if sampler_kind == "drnas":
            data = np.zeros((edges, len(op_names)), dtype=np.float32)
        else:
            data = (1e-3 * rng.standard_normal((edges, len(op_names)))).astype(np.float32)
        alpha[ct] = Parameter(data, name=f"alpha_{ct}")
    beta = None
    if edge_normalization:
        beta = {ct: Parameter((1e-3 * rng.standard_normal((nodes, nodes + 1))).astype(np.float32),
                              name=f"beta_{ct}") for ct in cell_types}
    return ArchParameters(alpha, nodes, tuple(op_names), beta)


# ------------------------------------------------------------ row-level API

def darts_weights(alpha_row) -> np.ndarray:
    a = np.asarray(alpha_row, dtype=np.float64)
    e = np.exp(a - a.max())
    return e / e.sum()


def fairdarts_weights(alpha_row) -> np.ndarray:
    from scipy.special import expit
    return expit(np.asarray(alpha_row, dtype=np.float64))


def gdas_sample(alpha_row, tau: float, rng: np.random.Generator,
                noise: Optional[np.ndarray] = None) -> tuple[int, Tensor]:
    """Hard Gumbel-softmax draw for one edge: (chosen index, straight-through weights)."""
    alpha = alpha_row if isinstance(alpha_row, Tensor) else Tensor(np.asarray(alpha_row, dtype=np.float64))
    chosen, st = gdas_sample_matrix(ops.reshape(alpha, (1, -1)), tau, rng,
                                    noise=None if noise is None else np.reshape(noise, (1, -1)))
    return int(chosen[0]), ops.reshape(st, (alpha.shape[0],))


def drnas_sample(concentration_row, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet draw as normalised Gamma variates."""
    c = np.asarray(concentration_row, dtype=np.float64)
    if not np.isfinite(c).all() or (c <= 0).any():
        raise ValueError("drnas_sample: concentrations must be finite and positive")
    z = ops.gamma_sample(Tensor(c, dtype=np.float64), rng).data
    return z / z.sum()


def edge_normalization(beta_row, edge_outputs: Sequence[Tensor]) -> Tensor:
    beta = beta_row if isinstance(beta_row, Tensor) else Tensor(np.asarray(beta_row, dtype=np.float64))
    if beta.shape != (len(edge_outputs),):
        raise ShapeError(f"edge_normalization: {beta.shape[0]} betas for {len(edge_outputs)} edges")
    w = ops.softmax(beta)
    return ops.weighted_sum(w, [(i,) for i in range(len(edge_outputs))], list(edge_outputs))


# ---------------------------------------------------------- matrix-level API

def gdas_sample_matrix(alpha: Tensor, tau: float, rng: np.random.Generator,
                       mask: Optional[np.ndarray] = None,
                       noise: Optional[np.ndarray] = None) -> tuple[np.ndarray, Tensor]:
    if tau <= 0:
        raise ValueError(f"gdas: temperature must be positive, got {tau}")
    if noise is None:
        noise = rng.gumbel(size=alpha.shape)
    logits = ops.scalar_mul(ops.add(alpha, Tensor(np.asarray(noise, dtype=alpha.dtype))), 1.0 / tau)
    soft = ops.softmax(logits, axis=1, mask=mask)
    chosen = np.argmax(np.where(mask, soft.data, -1.0) if mask is not None else soft.data, axis=1)
    return chosen, ops.straight_through(soft, chosen)


def dirichlet_matrix(log_concentration: Tensor, rng: np.random.Generator,
                     mask: Optional[np.ndarray] = None) -> Tensor:
    z = ops.gamma_sample(ops.exp(log_concentration), rng)
    if mask is not None:
        z = ops.mul(z, Tensor(mask.astype(z.dtype)))
    return ops.div(z, ops.sum(z, axis=1, keepdims=True))


@dataclass
class SamplerConfig:
    kind: str = "darts"
    tau_start: float = 10.0
    tau_end: float = 0.1

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler {self.kind!r}; expected one of {SAMPLER_KINDS}")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("gumbel temperatures must be positive")


@dataclass
class SampledWeights:
    weights: dict[str, Tensor]
    chosen: dict[str, Optional[np.ndarray]] = field(default_factory=dict)
    edge_weights: Optional[dict[str, Tensor]] = None


class Sampler:
    def __init__(self, config: SamplerConfig):
        self.config = config

    @property
    def activation(self) -> str:
        """How discretisation should read alpha."""
        return "sigmoid" if self.config.kind == "fairdarts" else "softmax"

    def tau(self, epoch: int, epochs: int) -> float:
        c = self.config
        if epochs <= 1:
            return c.tau_start
        return c.tau_start - (c.tau_start - c.tau_end) * epoch / (epochs - 1)

    def sample(self, arch: ArchParameters, rng: np.random.Generator, masks: Optional[dict] = None,
               tau: float = 1.0, alpha_override: Optional[dict[str, Tensor]] = None) -> SampledWeights:
        kind = self.config.kind
        out = SampledWeights({}, {})
        for ct in arch.cell_types:
            alpha = alpha_override[ct] if alpha_override is not None else arch.alpha[ct]
            mask = None if masks is None else masks.get(ct)
            if kind == "darts":
                w, chosen = ops.softmax(alpha, axis=1, mask=mask), None
            elif kind == "fairdarts":
                w, chosen = ops.sigmoid(alpha), None
                if mask is not None:
                    w = ops.mul(w, Tensor(mask.astype(w.dtype)))
            elif kind == "gdas":
                chosen, w = gdas_sample_matrix(alpha, tau, rng, mask=mask)
            else:
                w, chosen = dirichlet_matrix(alpha, rng, mask=mask), None
            out.weights[ct] = w
            out.chosen[ct] = chosen
        if arch.beta:
            bmask = arch.beta_mask()
            out.edge_weights = {ct: ops.softmax(arch.beta[ct], axis=1, mask=bmask) for ct in arch.cell_types}
        return out
