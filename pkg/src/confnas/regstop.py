"""Validation-loss penalties and early-stopping rules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor
from .searchspace.genotype import Genotype


@dataclass
class PenaltyConfig:
    fairdarts_penalty: bool = False
    fairdarts_lambda: float = 10.0
    drnas_penalty: bool = False
    drnas_lambda: float = 1.0

    def __post_init__(self):
        if self.fairdarts_lambda < 0 or self.drnas_lambda < 0:
            raise ValueError("penalty weights must be >= 0")


def _as_list(x) -> list[Tensor]:
    if isinstance(x, Tensor):
        return [x]
    if isinstance(x, dict):
        return list(x.values())
    items = list(x)
    if items and not isinstance(items[0], Tensor):
        return [Tensor(np.asarray(items, dtype=np.float64))]
    return items


def fairdarts_penalty(weights, lam: float = 10.0) -> Tensor:
    """lam * mean over every (edge, op) of w * (1 - w) for sigmoid weights w."""
    ws = _as_list(weights)
    total, count = None, 0
    for w in ws:
        term = ops.sum(ops.mul(w, ops.sub(1.0, w)))
        total = term if total is None else ops.add(total, term)
        count += w.size
    return ops.scalar_mul(total, lam / count)


def drnas_penalty(log_concentration, lam: float = 1.0) -> Tensor:
    """lam * sum of squared log-concentrations (anchors concentrations at 1)."""
    total = None
    for t in _as_list(log_concentration):
        term = ops.sum(ops.mul(t, t))
        total = term if total is None else ops.add(total, term)
    return ops.scalar_mul(total, lam)


def gm_score(train_grad, val_grad) -> float:
    """Cosine similarity of two flattened gradients; 0 when either is all zeros."""
    a = np.asarray(train_grad, dtype=np.float64).reshape(-1)
    b = np.asarray(val_grad, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"gm_score: gradient lengths differ ({a.size} vs {b.size})")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class GmWindow:
    """Per-key (cell, edge, op) GM scores over a sliding window of batches.

    After `window` scores a key is judged: frozen if the window mean falls
    below `threshold`; the key's window is then cleared. Freezing is final.
    """

    window: int = 20
    threshold: float = 0.4
    scores: dict = field(default_factory=dict)
    frozen: set = field(default_factory=set)
    last_mean: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("GM window must be >= 1 batch")

    def record(self, key: Hashable, score: float) -> None:
        if not -1.0 <= score <= 1.0:
            raise ValueError(f"GM score {score} outside [-1, 1]")
        self.scores.setdefault(key, []).append(float(score))

    def update(self, train_grads: dict, val_grads: dict) -> list[Hashable]:
        """Score every key present in both maps; returns keys frozen by this update."""
        newly = []
        for key, tg in train_grads.items():
            if key in self.frozen or key not in val_grads:
                continue
            self.record(key, gm_score(tg, val_grads[key]))
            if oles_gate(self, key) == "frozen":
                newly.append(key)
        return newly

    def is_frozen(self, key: Hashable) -> bool:
        return key in self.frozen

    def state(self) -> dict:
        return {"window": self.window, "threshold": self.threshold,
                "scores": {repr(k): v for k, v in self.scores.items()},
                "frozen": sorted(repr(k) for k in self.frozen)}


def oles_gate(window: GmWindow, key: Hashable) -> str:
    """'frozen' or 'active'; judges a key only once its window is full."""
    if key in window.frozen:
        return "frozen"
    scores = window.scores.get(key, [])
    if len(scores) < window.window:
        return "active"
    mean = float(np.mean(scores[-window.window:]))
    window.last_mean[key] = mean
    window.scores[key] = []
    if mean < window.threshold:
        window.frozen.add(key)
        return "frozen"
    return "active"


def skip_count(genotype: Genotype, cell_type: str = "normal") -> int:
    if cell_type not in genotype.cells:
        # single-cell supernets have no normal cell; their only cell is judged instead
        cell_type = genotype.cell_types[0]
    return genotype.op_counts(cell_type).get("skip_connect", 0)


def skip_count_stop(genotype: Genotype, threshold: int = 2, cell_type: str = "normal") -> bool:
    """True iff the dominant cell holds more than `threshold` skip connections."""
    return skip_count(genotype, cell_type) > threshold


def flatten_grads(arrays: Iterable[np.ndarray]) -> np.ndarray:
    parts: Sequence[np.ndarray] = [np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]
    return np.concatenate(parts) if parts else np.zeros(0)
