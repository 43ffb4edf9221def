"""Discrete target networks built from a genotype at the supernet's own size."""
from __future__ import annotations

from typing import Optional

from ..autodiff import ops
from ..autodiff.nn import BatchNorm, Conv2d, Linear, Module, ModuleList, count_parameters
from ..autodiff.tensor import Tensor
from ..rng import Rng
from .genotype import Genotype, GenotypeError
from .operations import FactorizedReduce, OperationSet, ReLUConvBN, make_op
from .supernet import STEM_MULTIPLIER, SupernetVariant, cell_layout, get_variant, stem_stride

__all__ = ["DiscreteCell", "DiscreteNetwork", "build_discrete_model", "count_parameters"]


class DiscreteCell(Module):
    def __init__(self, edges, nodes: int, c_pp: int, c_p: int, c: int, reduction: bool, reduction_prev: bool,
                 opset: OperationSet, rng):
        self.nodes, self.reduction = nodes, reduction
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, c, rng, affine=True, track=True)
        else:
            self.preprocess0 = ReLUConvBN(c_pp, c, rng, affine=True, track=True)
        self.preprocess1 = ReLUConvBN(c_p, c, rng, affine=True, track=True)
        self.edges = list(edges)
        self.ops = ModuleList()
        for e in self.edges:
            if e.op not in opset.names:
                raise GenotypeError(f"operation {e.op!r} is not in the {opset.kind} operation set")
            stride = 2 if reduction and e.src < 2 else 1
            self.ops.append(make_op(opset.ops[opset.index(e.op)], c, stride, rng, search=False))
        self.out_channels = nodes * c

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        for j in range(self.nodes):
            node = None
            for e, op in zip(self.edges, self.ops):
                if e.dst != j + 2:
                    continue
                y = op(states[e.src])
                node = y if node is None else ops.add(node, y)
            states.append(node)
        return ops.concat_channels(states[2:])


class DiscreteNetwork(Module):
    def __init__(self, genotype: Genotype, variant: SupernetVariant, opset: OperationSet, num_classes: int,
                 channel_override: Optional[int] = None, seed: int = 0, in_channels: int = 3):
        layout = cell_layout(variant)
        nodes = variant.intermediate_nodes
        for ct in set(layout):
            if ct not in genotype.cells:
                raise GenotypeError(f"genotype has no {ct!r} cell but the {variant.name} variant needs one")
            edges = genotype.cells[ct]
            for e in edges:
                if e.dst > nodes + 1:
                    raise GenotypeError(f"{ct}: edge into node {e.dst} but the cell has {nodes} nodes")
            missing = sorted(set(range(2, nodes + 2)) - {e.dst for e in edges})
            if missing:
                raise GenotypeError(f"{ct}: nodes {missing} have no incoming edge")
        init = Rng(seed).split("init").generator
        self.variant, self.genotype, self.num_classes = variant, genotype, num_classes
        c = channel_override or variant.initial_channels
        c_curr = STEM_MULTIPLIER * c
        self.stem_conv = Conv2d(in_channels, c_curr, 3, init, stride=stem_stride(variant), padding=1)
        self.stem_bn = BatchNorm(c_curr, affine=True, track_running_stats=True)
        c_pp, c_p, c_curr = c_curr, c_curr, c
        self.cells = ModuleList()
        reduction_prev = False
        for ct in layout:
            reduction = ct == "reduce"
            if reduction:
                c_curr *= 2
            cell = DiscreteCell(genotype.cells[ct], nodes, c_pp, c_p, c_curr, reduction, reduction_prev, opset, init)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, cell.out_channels
        self.classifier = Linear(c_p, num_classes, init)

    def forward(self, x: Tensor) -> Tensor:
        s0 = s1 = self.stem_bn(self.stem_conv(x))
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return self.classifier(ops.global_avg_pool(s1))


def build_discrete_model(genotype: Genotype, variant: SupernetVariant | str, opset: OperationSet,
                         num_classes: int, channel_override: Optional[int] = None, seed: int = 0,
                         in_channels: int = 3) -> DiscreteNetwork:
    if isinstance(variant, str):
        variant = get_variant(variant)
    return DiscreteNetwork(genotype, variant, opset, num_classes, channel_override, seed, in_channels)
