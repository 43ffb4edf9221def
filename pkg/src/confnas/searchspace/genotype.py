"""Discrete architectures: the genotype record, its text format, and argmax discretisation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

GENOTYPE_VERSION = "v1"
CELL_TYPES = ("normal", "reduce")
POLICIES = ("darts_top2", "all_edges")
ACTIVATIONS = ("softmax", "sigmoid")


class GenotypeError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class GenotypeEdge:
    dst: int
    src: int
    op: str


@dataclass(frozen=True)
class Genotype:
    """Retained edges per cell type. Nodes 0 and 1 are the cell inputs; node j+2 is intermediate node j."""

    cells: Mapping[str, tuple[GenotypeEdge, ...]]

    def __post_init__(self):
        for ct, edges in self.cells.items():
            if ct not in CELL_TYPES:
                raise GenotypeError(f"unknown cell type {ct!r}")
            for e in edges:
                if e.src < 0 or e.dst < 2 or e.src >= e.dst:
                    raise GenotypeError(f"{ct}: invalid edge {e.src}->{e.dst}")
                if e.op == "zero":
                    raise GenotypeError(f"{ct}: edge {e.src}->{e.dst} uses the zero op")
        object.__setattr__(self, "cells", {ct: tuple(sorted(self.cells[ct])) for ct in sorted(self.cells)})

    @property
    def cell_types(self) -> tuple[str, ...]:
        return tuple(self.cells)

    def nodes(self, cell_type: str) -> int:
        edges = self.cells[cell_type]
        return max(e.dst for e in edges) - 1 if edges else 0

    def op_counts(self, cell_type: str) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.cells[cell_type]:
            counts[e.op] = counts.get(e.op, 0) + 1
        return counts

    def serialize(self) -> str:
        lines = [f"{GENOTYPE_VERSION} {ct} edge src={e.src} dst={e.dst} op={e.op}"
                 for ct in self.cells for e in self.cells[ct]]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Genotype":
        cells: dict[str, list[GenotypeEdge]] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                version, ct, kw, src, dst, op = parts
                if version != GENOTYPE_VERSION:
                    raise GenotypeError(f"line {lineno}: unsupported genotype version {version!r}")
                if kw != "edge" or not (src.startswith("src=") and dst.startswith("dst=") and op.startswith("op=")):
                    raise ValueError
                edge = GenotypeEdge(int(dst[4:]), int(src[4:]), op[3:])
            except GenotypeError:
                raise
            except ValueError:
                raise GenotypeError(f"line {lineno}: malformed genotype record {line!r}") from None
            cells.setdefault(ct, []).append(edge)
        if not cells:
            raise GenotypeError("empty genotype")
        return cls({ct: tuple(es) for ct, es in cells.items()})

    def save(self, path) -> None:
        from ..expdir import atomic_write_text
        atomic_write_text(path, self.serialize())

    @classmethod
    def load(cls, path) -> "Genotype":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())


def edge_endpoints(nodes: int) -> list[tuple[int, int]]:
    """(src, dst) for every alpha row, ordered by destination node then source."""
    return [(i, j + 2) for j in range(nodes) for i in range(j + 2)]


def activate(alpha: np.ndarray, activation: str, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise sampler activation; masked (pruned) ops get weight 0 and softmax renormalises."""
    a = np.asarray(alpha, dtype=np.float64)
    if not np.isfinite(a).all():
        raise GenotypeError("architecture parameters are not finite")
    if activation == "softmax":
        z = a if mask is None else np.where(mask, a, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    if activation == "sigmoid":
        w = 1.0 / (1.0 + np.exp(-a))
        return w if mask is None else np.where(mask, w, 0.0)
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def discretize_cell(alpha: np.ndarray, op_names: Sequence[str], nodes: int, policy: str = "darts_top2",
                    activation: str = "softmax", mask: Optional[np.ndarray] = None) -> tuple[GenotypeEdge, ...]:
    if policy not in POLICIES:
        raise ValueError(f"unknown discretization policy {policy!r}; expected one of {POLICIES}")
    alpha = np.asarray(alpha, dtype=np.float64)
    ends = edge_endpoints(nodes)
    if alpha.shape != (len(ends), len(op_names)):
        raise GenotypeError(f"alpha shape {alpha.shape} != ({len(ends)}, {len(op_names)})")
    eligible = np.array([n != "zero" for n in op_names])[None, :].repeat(len(ends), axis=0)
    if mask is not None:
        eligible &= np.asarray(mask, dtype=bool)
    weights = activate(alpha, activation, mask)
    best_op, best_w = [], []
    for row in range(len(ends)):
        if not eligible[row].any():
            raise GenotypeError(f"edge {ends[row][0]}->{ends[row][1]}: every candidate op is pruned")
        w = np.where(eligible[row], weights[row], -np.inf)
        k = int(np.argmax(w))
        best_op.append(k)
        best_w.append(w[k])
    out = []
    start = 0
    for j in range(nodes):
        rows = list(range(start, start + j + 2))
        if policy == "darts_top2":
            # stable sort: ties go to the lower source node
            rows = sorted(rows, key=lambda r: -best_w[r])[:2]
        for r in rows:
            src, dst = ends[r]
            out.append(GenotypeEdge(dst, src, op_names[best_op[r]]))
        start += j + 2
    return tuple(sorted(out))


def discretize(arch, policy: str = "darts_top2", activation: str = "softmax",
               masks: Optional[Mapping[str, np.ndarray]] = None, op_names: Optional[Sequence[str]] = None,
               nodes: Optional[int] = None) -> Genotype:
    """Argmax over non-zero, active ops per edge, then keep the top-2 edges per node.

    `arch` is an ArchParameters or a mapping cell_type -> alpha array (in which
    case `op_names` and `nodes` are required).
    """
    if hasattr(arch, "alpha"):
        alphas = {ct: arch.alpha[ct].data for ct in arch.cell_types}
        op_names, nodes = arch.op_names, arch.nodes
    else:
        alphas = dict(arch)
        if op_names is None or nodes is None:
            raise ValueError("discretize: op_names and nodes are required for raw alpha arrays")
    cells = {ct: discretize_cell(a, op_names, nodes, policy, activation,
                                 None if masks is None else masks.get(ct))
             for ct, a in alphas.items()}
    return Genotype(cells)
