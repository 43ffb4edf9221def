"""Profiles: declarative descriptions of one search method run, with method presets.

A profile file is sectioned key=value text::

    [method]
    method=gdas
    [trainer]
    epochs=50

Keys may also appear before any section header. Unknown keys, keys placed
under the wrong section and values of the wrong type are rejected with the
offending line number. The `[extra]` section carries free-form string
values that are kept for provenance only.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from ..mutations import MutationConfig
from ..regstop import PenaltyConfig
from ..samplers import SAMPLER_KINDS, SamplerConfig

METHODS = ("darts", "pcdarts", "fairdarts", "smoothdarts", "oles", "drnas", "gdas")
SECTIONS = ("method", "sampler", "mutation", "penalty", "trainer", "extra")
VARIANT_KEYS = {"deep": "batch_size_deep", "wide": "batch_size_wide", "single_cell": "batch_size_single_cell",
                "darts": "batch_size_darts"}


class ProfileError(ValueError):
    pass


def _f(section: str, default=None, **kw):
    meta = {"section": section}
    if "default_factory" in kw:
        return field(default_factory=kw["default_factory"], metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class Profile:
    method: str = _f("method", "")
    # sampler
    sampler: str = _f("sampler", "darts")
    tau_start: float = _f("sampler", 10.0)
    tau_end: float = _f("sampler", 0.1)
    edge_normalization: bool = _f("sampler", False)
    beta_optimizer: str = _f("sampler", "arch")
    # mutation
    partial_connection: bool = _f("mutation", False)
    K: int = _f("mutation", 4)
    perturbation: str = _f("mutation", "none")
    epsilon: float = _f("mutation", 0.1)
    prune_epochs: list = _f("mutation", default_factory=list)
    prune_fractions: list = _f("mutation", default_factory=list)
    # penalty
    fairdarts_penalty: bool = _f("penalty", False)
    fairdarts_lambda: float = _f("penalty", 10.0)
    drnas_penalty: bool = _f("penalty", False)
    drnas_lambda: float = _f("penalty", 1.0)
    # trainer
    epochs: int = _f("trainer", 100)
    warm_epochs: int = _f("trainer", 0)
    batch_size_deep: int = _f("trainer", 64)
    batch_size_wide: int = _f("trainer", 96)
    batch_size_single_cell: int = _f("trainer", 96)
    batch_size_darts: int = _f("trainer", 64)
    lr: float = _f("trainer", 0.025)
    lr_min: float = _f("trainer", 0.001)
    momentum: float = _f("trainer", 0.9)
    weight_decay: float = _f("trainer", 3e-4)
    arch_lr: float = _f("trainer", 3e-3)
    arch_beta1: float = _f("trainer", 0.5)
    arch_beta2: float = _f("trainer", 0.999)
    arch_weight_decay: float = _f("trainer", 1e-3)
    oles: bool = _f("trainer", False)
    oles_window: int = _f("trainer", 20)
    oles_threshold: float = _f("trainer", 0.4)
    oles_scope: str = _f("trainer", "edge")
    early_stop: str = _f("trainer", "none")
    skip_threshold: int = _f("trainer", 2)
    discretization: str = _f("trainer", "darts_top2")
    checkpointing_freq: int = _f("trainer", 1)
    steps_per_epoch: int = _f("trainer", 0)
    channels: int = _f("trainer", 0)
    seeds: list = _f("trainer", default_factory=lambda: [0, 1, 2])
    extra: dict = field(default_factory=dict, metadata={"section": "extra"})

    def __post_init__(self):
        self.validate()

    # --------------------------------------------------------------- checks
    def validate(self) -> None:
        if not self.method:
            raise ProfileError("method must be set")
        if self.method not in METHODS:
            raise ProfileError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.sampler not in SAMPLER_KINDS:
            raise ProfileError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLER_KINDS}")
        if self.beta_optimizer not in ("arch", "weight"):
            raise ProfileError("beta_optimizer must be 'arch' or 'weight'")
        if self.epochs < 1:
            raise ProfileError("epochs must be >= 1")
        if not 0 <= self.warm_epochs < self.epochs:
            raise ProfileError(f"warm_epochs must satisfy 0 <= warm_epochs < epochs ({self.warm_epochs}, {self.epochs})")
        for name in VARIANT_KEYS.values():
            if getattr(self, name) < 1:
                raise ProfileError(f"{name} must be >= 1")
        if self.early_stop not in ("none", "skip_count"):
            raise ProfileError("early_stop must be 'none' or 'skip_count'")
        if self.oles_scope not in ("edge", "op_type"):
            raise ProfileError("oles_scope must be 'edge' or 'op_type'")
        if self.discretization not in ("darts_top2", "all_edges"):
            raise ProfileError("discretization must be 'darts_top2' or 'all_edges'")
        if self.checkpointing_freq < 1:
            raise ProfileError("checkpointing_freq must be >= 1")
        if self.steps_per_epoch < 0 or self.channels < 0:
            raise ProfileError("steps_per_epoch and channels must be >= 0 (0 = default)")
        if not self.seeds:
            raise ProfileError("at least one seed is required")
        try:
            self.sampler_config()
            self.mutation_config()
            self.penalty_config()
        except ValueError as exc:
            raise ProfileError(str(exc)) from None

    # ---------------------------------------------------------- sub-configs
    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler, self.tau_start, self.tau_end)

    def mutation_config(self) -> MutationConfig:
        return MutationConfig(self.partial_connection, self.K, self.perturbation, self.epsilon,
                              list(self.prune_epochs), list(self.prune_fractions))

    def penalty_config(self) -> PenaltyConfig:
        return PenaltyConfig(self.fairdarts_penalty, self.fairdarts_lambda, self.drnas_penalty, self.drnas_lambda)

    def batch_size(self, variant: str) -> int:
        try:
            return getattr(self, VARIANT_KEYS[variant])
        except KeyError:
            raise ProfileError(f"no batch size for variant {variant!r}") from None

    @property
    def activation(self) -> str:
        return "sigmoid" if self.sampler == "fairdarts" else "softmax"

    def replace(self, **changes) -> "Profile":
        if "batch_size" in changes:
            bs = changes.pop("batch_size")
            changes.update({k: bs for k in VARIANT_KEYS.values()})
        return dataclasses.replace(self, **changes)

    def desk(self, epochs: int, steps_per_epoch: int, channels: int, batch_size: int) -> "Profile":
        """Shrink to a desk-scale run; a non-zero warm-up keeps at least one epoch."""
        warm = 0
        if self.warm_epochs:
            warm = min(epochs - 1, max(1, math.floor(self.warm_epochs * epochs / self.epochs)))
        return self.replace(epochs=epochs, warm_epochs=warm, steps_per_epoch=steps_per_epoch,
                            channels=channels, batch_size=batch_size)

    def config_hash(self) -> str:
        return hashlib.sha256(serialize_profile(self).encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ presets

_SEARCH_TABLE = {
    # (deep, wide, single_cell) batch sizes, arch lr
    "darts": ((64, 96, 96), 3e-3),
    "drnas": ((64, 96, 96), 6e-3),
    "gdas": ((320, 480, 480), 3e-3),
}


def preset(method: str) -> Profile:
    """The search recipe for `method` on the bench-suite variants."""
    if method not in METHODS:
        raise ProfileError(f"unknown method {method!r}; expected one of {METHODS}")
    family = method if method in ("drnas", "gdas") else "darts"
    (bd, bw, bs), arch_lr = _SEARCH_TABLE[family]
    kw: dict[str, Any] = dict(method=method, epochs=100, batch_size_deep=bd, batch_size_wide=bw,
                              batch_size_single_cell=bs, batch_size_darts=bd, arch_lr=arch_lr)
    if method == "pcdarts":
        kw.update(partial_connection=True, K=4, warm_epochs=15, edge_normalization=True)
    elif method == "fairdarts":
        kw.update(sampler="fairdarts", fairdarts_penalty=True, fairdarts_lambda=10.0)
    elif method == "smoothdarts":
        kw.update(perturbation="random", epsilon=0.1)
    elif method == "oles":
        kw.update(oles=True)
    elif method == "drnas":
        kw.update(sampler="drnas", partial_connection=True, K=4, warm_epochs=15, drnas_penalty=True,
                  drnas_lambda=1.0)
    elif method == "gdas":
        kw.update(sampler="gdas", epochs=300)
    return Profile(**kw)


# ---------------------------------------------------------- text round trip

def _fields():
    return [f for f in fields(Profile) if f.name != "extra"]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    return str(value)


def serialize_profile(profile: Profile) -> str:
    """Canonical text: every field, sections in fixed order, keys in declaration order."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        if section == "extra":
            lines += [f"{k}={v}" for k, v in sorted(profile.extra.items())]
            continue
        for f in _fields():
            if f.metadata["section"] == section:
                lines.append(f"{f.name}={_format(getattr(profile, f.name))}")
    return "\n".join(lines) + "\n"


_LIST_TYPES = {"prune_epochs": int, "prune_fractions": float, "seeds": int}


def _parse_value(name: str, ftype, raw: str, lineno: int):
    def bad(kind):
        return ProfileError(f"line {lineno}: {name} expects {kind}, got {raw!r}")
    if name in _LIST_TYPES:
        elem = _LIST_TYPES[name]
        if not raw.strip():
            return []
        try:
            return [elem(v.strip()) for v in raw.split(",")]
        except ValueError:
            raise bad(f"a comma-separated list of {elem.__name__}") from None
    if ftype in (bool, "bool"):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise bad("a boolean")
    if ftype in (int, "int"):
        try:
            return int(raw)
        except ValueError:
            raise bad("an integer") from None
    if ftype in (float, "float"):
        try:
            return float(raw)
        except ValueError:
            raise bad("a number") from None
    return raw


def parse_profile_text(text: str) -> Profile:
    """Preset for `method` overlaid with every key given in the text."""
    by_name = {f.name: f for f in _fields()}
    section: Optional[str] = None
    values: dict[str, tuple[str, int]] = {}
    extra: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            if section not in SECTIONS:
                raise ProfileError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in s:
            raise ProfileError(f"line {lineno}: expected key=value, got {s!r}")
        key, raw = (p.strip() for p in s.split("=", 1))
        if section == "extra":
            extra[key] = raw
            continue
        if key == "batch_size":
            if section not in (None, "trainer"):
                raise ProfileError(f"line {lineno}: key batch_size belongs in [trainer], not [{section}]")
            for k in VARIANT_KEYS.values():
                values[k] = (raw, lineno)
            continue
        if key not in by_name:
            raise ProfileError(f"line {lineno}: unknown key {key!r}")
        want = by_name[key].metadata["section"]
        if section is not None and section != want:
            raise ProfileError(f"line {lineno}: key {key} belongs in [{want}], not [{section}]")
        if key in values and key not in VARIANT_KEYS.values():
            raise ProfileError(f"line {lineno}: duplicate key {key!r}")
        values[key] = (raw, lineno)
    if "method" not in values or not values["method"][0]:
        raise ProfileError("profile does not set a method")
    method = values.pop("method")[0]
    base = preset(method)
    changes = {}
    for key, (raw, lineno) in values.items():
        f = by_name[key]
        changes[key] = _parse_value(key, f.type, raw, lineno)
    try:
        prof = dataclasses.replace(base, **changes)
    except ProfileError:
        raise
    prof.extra = dict(extra)
    return prof


def parse_profile(path) -> Profile:
    path = Path(path)
    if not path.is_file():
        raise ProfileError(f"profile file not found: {path}")
    return parse_profile_text(path.read_text(encoding="utf-8"))
