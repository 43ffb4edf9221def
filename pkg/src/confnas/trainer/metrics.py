"""Per-epoch metric records, the metrics log and alpha sidecar files."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from ..searchspace.genotype import Genotype


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def format_record(record: dict) -> str:
    """`key=value` tokens in insertion order; floats use the shortest round-trip repr."""
    return " ".join(f"{k}={_fmt(v)}" for k, v in record.items())


def parse_record(line: str) -> dict[str, str]:
    return dict(tok.split("=", 1) for tok in line.split())


def epoch_record(state, epoch: int, means, grad_norms: dict, genotype: Genotype, op_evaluations: int,
                 newly_frozen: int, events: list) -> dict:
    """Everything logged for one epoch. No wall-clock values, so reruns log identical bytes."""
    train_loss, train_acc, val_loss, val_acc = (float(v) for v in means)
    rec = {"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc,
           "val_loss": val_loss, "val_acc": val_acc, "lr": state.lr(),
           "arch_lr": state.profile.arch_lr if epoch >= state.profile.warm_epochs else 0.0}
    if state.profile.sampler == "gdas":
        rec["tau"] = state.tau()
    for ct in state.arch.cell_types:
        rec[f"grad_norm_{ct}"] = float(grad_norms.get(ct, 0.0))
    for ct in genotype.cell_types:
        counts = genotype.op_counts(ct)
        for op in sorted(counts):
            rec[f"ops_{ct}_{op}"] = counts[op]
    rec["op_evaluations"] = op_evaluations
    if state.gm is not None:
        rec["gm_frozen"] = len(state.gm.frozen)
        rec["gm_frozen_new"] = newly_frozen
        if state.gm.last_mean:
            rec["gm_mean"] = float(np.mean(list(state.gm.last_mean.values())))
    if events:
        rec["events"] = ",".join(events)
    return rec


class MetricsSink:
    """Append-only metrics log. A failed write is counted and the run continues."""

    def __init__(self, path):
        self.path = Path(path)
        self.failures = 0

    def rewrite(self, lines: list[str]) -> None:
        try:
            self.path.write_text("".join(line + "\n" for line in lines))
        except OSError:
            self.failures += 1

    def write(self, line: str) -> None:
        try:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        except OSError:
            self.failures += 1


def alpha_sidecar(arch, masks: Optional[dict] = None) -> str:
    """Raw alpha plus its activated weights (and prune masks) per cell type."""
    lines = []
    for ct in arch.cell_types:
        raw = arch.alpha[ct].data.astype(np.float64)
        lines.append(f"# {ct} alpha ops={','.join(arch.op_names)}")
        lines += [" ".join(repr(float(v)) for v in row) for row in raw]
        mask = None if masks is None else masks.get(ct)
        if mask is not None:
            lines.append(f"# {ct} mask")
            lines += [" ".join("1" if v else "0" for v in row) for row in mask]
    return "\n".join(lines) + "\n"


def read_alpha_sidecar(path) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    current = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            parts = line[1:].split()
            current = parts[0] if parts[1] == "alpha" else None
            if current:
                out[current] = []
        elif current:
            out[current].append([float(v) for v in line.split()])
    return {ct: np.asarray(rows) for ct, rows in out.items()}


__all__ = ["MetricsSink", "alpha_sidecar", "epoch_record", "format_record", "parse_record",
           "read_alpha_sidecar"]
