"""Stacked-cell supernets whose edges mix every candidate operation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..autodiff import ops, stacked
from ..autodiff.nn import BatchNorm, Conv2d, Linear, Module, ModuleList
from ..autodiff.tensor import ShapeError, Tensor
from ..rng import Rng
from ..samplers import ArchParameters, SampledWeights, init_arch_parameters
from .operations import FactorizedReduce, OperationSet, ReLUConvBN, make_op, stacked_forward

STEM_MULTIPLIER = 3


@dataclass(frozen=True)
class SupernetVariant:
    name: str
    cells: int
    initial_channels: int
    intermediate_nodes: int

    @property
    def edges_per_cell(self) -> int:
        return cell_edge_count(self.intermediate_nodes)


VARIANTS = {
    "darts": SupernetVariant("darts", 8, 16, 4),
    "wide": SupernetVariant("wide", 4, 18, 4),
    "deep": SupernetVariant("deep", 16, 7, 4),
    "single_cell": SupernetVariant("single_cell", 1, 26, 8),
}


def get_variant(name: str) -> SupernetVariant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown supernet variant {name!r}; expected one of {sorted(VARIANTS)}") from None


def cell_edge_count(intermediate_nodes: int) -> int:
    if intermediate_nodes < 1:
        raise ValueError(f"intermediate_nodes must be >= 1, got {intermediate_nodes}")
    return sum(k + 2 for k in range(intermediate_nodes))


def reduction_indices(cells: int) -> frozenset[int]:
    """Reduction cells at 1/3 and 2/3 depth; a 1-cell network's only cell reduces."""
    return frozenset({cells // 3, 2 * cells // 3})


def stem_stride(variant: SupernetVariant) -> int:
    """Short networks with a single reduction cell get the missing stride-2 step in the stem."""
    return 1 if len(reduction_indices(variant.cells)) >= 2 else 2


def cell_layout(variant: SupernetVariant) -> list[str]:
    red = reduction_indices(variant.cells)
    return ["reduce" if i in red else "normal" for i in range(variant.cells)]


def channel_shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Output position o reads input channel perm[o] (group interleave)."""
    if groups <= 1:
        return np.arange(channels)
    if channels % groups == 0:
        per = channels // groups
        o = np.arange(channels)
        return (o % groups) * per + o // groups
    return np.argsort(np.arange(channels) % groups, kind="stable")


@dataclass
class ForwardContext:
    """Everything a supernet forward pass needs besides the input batch."""

    sampled: SampledWeights
    masks: Optional[dict[str, np.ndarray]] = None
    partial_rng: Optional[np.random.Generator] = None
    op_evaluations: int = 0
    edge_outputs: Optional[dict] = field(default=None)


class MixedEdge(Module):
    def __init__(self, c: int, stride: int, opset: OperationSet, rng, partial_k: int = 1):
        if partial_k < 1:
            raise ValueError(f"partial channel divisor must be >= 1, got {partial_k}")
        self.channels, self.stride, self.partial_k = c, stride, partial_k
        self.op_width = c if partial_k == 1 else c // partial_k
        if self.op_width < 1:
            raise ShapeError(f"partial connection: {c} channels cannot be split by K={partial_k}")
        self.names = opset.names
        self.ops = ModuleList(make_op(spec, self.op_width, stride, rng, search=True) for spec in opset.ops)

    def _mix(self, x: Tensor, weights: Tensor, row: int, ctx: ForwardContext, cell_type: str,
             chosen: Optional[int]) -> Optional[Tensor]:
        mask = None if ctx.masks is None else ctx.masks[cell_type][row]
        outs, idx = [], []
        for o, (name, op) in enumerate(zip(self.names, self.ops)):
            if name == "zero" or (mask is not None and not mask[o]):
                continue
            if chosen is not None and o != chosen:
                continue
            outs.append(op(x))
            idx.append((row, o))
        ctx.op_evaluations += len(outs)
        if not outs:
            return None
        return ops.weighted_sum(weights, idx, outs)

    def _zeros_like_output(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        s = self.stride
        return Tensor(np.zeros((n, self.channels, -(-h // s), -(-w // s)), dtype=x.dtype))

    def forward(self, x: Tensor, ctx: ForwardContext, cell_type: str, row: int) -> Optional[Tensor]:
        weights = ctx.sampled.weights[cell_type]
        chosen_arr = ctx.sampled.chosen.get(cell_type)
        chosen = None if chosen_arr is None else int(chosen_arr[row])
        if self.partial_k == 1:
            return self._mix(x, weights, row, ctx, cell_type, chosen)
        return partial_channel_mix(self, x, weights, row, ctx, cell_type, chosen)


def partial_channel_mix(edge: MixedEdge, x: Tensor, weights: Tensor, row: int, ctx: ForwardContext,
                        cell_type: str, chosen: Optional[int]) -> Tensor:
    """Route a random 1/K channel subset through the mixture; bypass the rest.

    The result is reassembled in the original channel order and then
    group-interleaved with K groups.
    """
    c = edge.channels
    if x.shape[1] != c:
        raise ShapeError(f"partial connection: input has {x.shape[1]} channels, edge expects {c}")
    rng = ctx.partial_rng if ctx.partial_rng is not None else np.random.default_rng(0)
    perm = rng.permutation(c)
    sel = np.sort(perm[: edge.op_width])
    rest = np.sort(perm[edge.op_width:])
    mixed = edge._mix(ops.gather_channels(x, sel), weights, row, ctx, cell_type, chosen)
    bypass = ops.gather_channels(x, rest)
    if edge.stride != 1:
        bypass = ops.max_pool(bypass, 2, 2, 0)
    if mixed is None:
        mixed = Tensor(np.zeros((x.shape[0], len(sel)) + bypass.shape[2:], dtype=x.dtype))
    combined = ops.concat_channels([mixed, bypass])
    position = np.empty(c, dtype=np.int64)
    position[np.concatenate([sel, rest])] = np.arange(c)
    shuffle = channel_shuffle_permutation(c, edge.partial_k)
    return ops.gather_channels(combined, position[shuffle])


class SearchCell(Module):
    def __init__(self, nodes: int, c_pp: int, c_p: int, c: int, reduction: bool, reduction_prev: bool,
                 opset: OperationSet, rng, partial_k: int = 1):
        self.nodes, self.reduction = nodes, reduction
        self.cell_type = "reduce" if reduction else "normal"
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, c, rng, affine=False, track=False)
        else:
            self.preprocess0 = ReLUConvBN(c_pp, c, rng, affine=False, track=False)
        self.preprocess1 = ReLUConvBN(c_p, c, rng, affine=False, track=False)
        self.edges = ModuleList()
        for j in range(nodes):
            for i in range(j + 2):
                stride = 2 if reduction and i < 2 else 1
                self.edges.append(MixedEdge(c, stride, opset, rng, partial_k))
        self.out_channels = nodes * c
        self.stacked = True

    def _stacked_node(self, j: int, e0: int, states: list, ctx: ForwardContext, ew) -> Tensor:
        """Node j computed with one tape node per op kind across all its incoming edges.

        Numerically equivalent to summing the per-edge mixtures; random channel
        subsets are drawn in the same (edge) order.
        """
        ct = self.cell_type
        n_in = j + 2
        edges = [self.edges[e0 + i] for i in range(n_in)]
        weights = ctx.sampled.weights[ct]
        chosen = ctx.sampled.chosen.get(ct)
        masks = None if ctx.masks is None else ctx.masks[ct]
        rows = [e0 + i for i in range(n_in)]
        pk = edges[0].partial_k
        c = edges[0].channels
        if pk > 1:
            rng = ctx.partial_rng if ctx.partial_rng is not None else np.random.default_rng(0)
            width = edges[0].op_width
            sels, rests = [], []
            for i in range(n_in):
                if states[i].shape[1] != c:
                    raise ShapeError(f"partial connection: input has {states[i].shape[1]} channels, edge expects {c}")
                perm = rng.permutation(c)
                sels.append(np.sort(perm[:width]))
                rests.append(np.sort(perm[width:]))
        by_stride: dict[int, list[int]] = {}
        for i, edge in enumerate(edges):
            by_stride.setdefault(edge.stride, []).append(i)
        groups, outs, bypass = [], [], []
        for stride in sorted(by_stride, reverse=True):
            members = by_stride[stride]
            x = stacked.stack([states[i] for i in members])
            xo = stacked.gather_channels_per_edge(x, np.stack([sels[i] for i in members])) if pk > 1 else x
            for o, name in enumerate(edges[0].names):
                if name == "zero":
                    continue
                active = [k for k, i in enumerate(members)
                          if (masks is None or masks[rows[i], o]) and (chosen is None or chosen[rows[i]] == o)]
                if not active:
                    continue
                sub = stacked.select_edges(xo, active)
                outs.append(stacked_forward([edges[members[k]].ops[o] for k in active], sub))
                groups.append((o, [members[k] for k in active]))
            if pk > 1:
                b = stacked.gather_channels_per_edge(x, np.stack([rests[i] for i in members]))
                if stride != 1:
                    b = stacked.stacked_pool(b, "max", 2, 2, 0)
                bypass.append(b)
        ctx.op_evaluations += sum(len(pos) for _, pos in groups)
        if pk > 1:
            byp = stacked.concat_edges(bypass)
            if outs:
                mixed = stacked.mix_edges(weights, rows, groups, outs, n_in)
            else:
                mixed = Tensor(np.zeros((n_in, byp.shape[1], edges[0].op_width) + byp.shape[3:], dtype=byp.dtype))
            combined = stacked.concat_channels_stacked([mixed, byp])
            order = []
            shuffle = channel_shuffle_permutation(c, pk)
            for i in range(n_in):
                position = np.empty(c, dtype=np.int64)
                position[np.concatenate([sels[i], rests[i]])] = np.arange(c)
                order.append(position[shuffle])
            y = stacked.gather_channels_per_edge(combined, np.stack(order))
        elif outs:
            y = stacked.mix_edges(weights, rows, groups, outs, n_in)
        else:
            return edges[0]._zeros_like_output(states[0])
        if ew is not None:
            return stacked.reduce_edges(y, ew, [(j, i) for i in range(n_in)])
        return stacked.reduce_edges(y)

    def forward(self, s0: Tensor, s1: Tensor, ctx: ForwardContext) -> Tensor:
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        ew = None if ctx.sampled.edge_weights is None else ctx.sampled.edge_weights[self.cell_type]
        if self.stacked:
            e = 0
            for j in range(self.nodes):
                states.append(self._stacked_node(j, e, states, ctx, ew))
                e += j + 2
            return ops.concat_channels(states[2:])
        e = 0
        for j in range(self.nodes):
            outs, idx = [], []
            for i in range(j + 2):
                y = self.edges[e + i](states[i], ctx, self.cell_type, e + i)
                if y is not None:
                    outs.append(y)
                    idx.append((j, i))
            if not outs:
                node = self.edges[e]._zeros_like_output(states[0])
            elif ew is not None:
                node = ops.weighted_sum(ew, idx, outs)
            else:
                node = outs[0]
                for y in outs[1:]:
                    node = ops.add(node, y)
            states.append(node)
            e += j + 2
        return ops.concat_channels(states[2:])


class Supernet(Module):
    """Stem, stacked search cells sharing one alpha per cell type, classifier head."""

    def __init__(self, variant: SupernetVariant, opset: OperationSet, num_classes: int,
                 channel_override: Optional[int] = None, partial_k: int = 1, seed: int = 0,
                 sampler_kind: str = "darts", edge_normalization: bool = False, in_channels: int = 3):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        init = Rng(seed).split("init").generator
        self.variant, self.opset, self.num_classes = variant, opset, num_classes
        c = channel_override or variant.initial_channels
        self.channels = c
        self.partial_k = partial_k
        c_curr = STEM_MULTIPLIER * c
        self.stem_conv = Conv2d(in_channels, c_curr, 3, init, stride=stem_stride(variant), padding=1)
        self.stem_bn = BatchNorm(c_curr, affine=True, track_running_stats=False)
        c_pp, c_p, c_curr = c_curr, c_curr, c
        self.cells = ModuleList()
        reduction_prev = False
        for cell_type in cell_layout(variant):
            reduction = cell_type == "reduce"
            if reduction:
                c_curr *= 2
            cell = SearchCell(variant.intermediate_nodes, c_pp, c_p, c_curr, reduction, reduction_prev,
                              opset, init, partial_k)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, cell.out_channels
        self.classifier = Linear(c_p, num_classes, init)
        cell_types = tuple(ct for ct in ("normal", "reduce") if ct in cell_layout(variant))
        self.arch = init_arch_parameters(cell_types, variant.edges_per_cell, opset.names,
                                         variant.intermediate_nodes, Rng(seed).split("arch_init").generator,
                                         sampler_kind, edge_normalization)

    def op_parameter_groups(self):
        """Yield ((cell, edge, op), params) for every candidate op that has weights."""
        for ci, cell in enumerate(self.cells):
            for e, edge in enumerate(cell.edges):
                for o, op in enumerate(edge.ops):
                    params = op.parameters()
                    if params:
                        yield (ci, e, o), params

    def set_stacked(self, flag: bool) -> None:
        """Choose node-level stacked evaluation (default) or the per-edge reference path."""
        for cell in self.cells:
            cell.stacked = flag

    def cells_per_type(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for cell in self.cells:
            counts[cell.cell_type] = counts.get(cell.cell_type, 0) + 1
        return counts

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        s0 = s1 = self.stem_bn(self.stem_conv(x))
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, ctx)
        return self.classifier(ops.global_avg_pool(s1))


def build_supernet(variant: SupernetVariant | str, opset: OperationSet, num_classes: int,
                   channel_override: Optional[int] = None, **kwargs) -> Supernet:
    if isinstance(variant, str):
        variant = get_variant(variant)
    return Supernet(variant, opset, num_classes, channel_override, **kwargs)


def mixed_edge_forward(edge: MixedEdge, x: Tensor, weights, row: int = 0) -> Optional[Tensor]:
    """Sum_o weights[o] * o(x) for a standalone edge (weights: list or [|ops|] tensor)."""
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=x.dtype))
    if w.ndim == 1:
        w = ops.reshape(w, (1, -1))
        row = 0
    if w.shape[1] != len(edge.names):
        raise ShapeError(f"mixed edge: {w.shape[1]} weights for {len(edge.names)} operations")
    if (w.data < 0).any():
        raise ValueError("mixed edge: weights must be non-negative")
    ctx = ForwardContext(SampledWeights({"edge": w}, {"edge": None}))
    out = edge(x, ctx, "edge", row)
    return out if out is not None else edge._zeros_like_output(x)
