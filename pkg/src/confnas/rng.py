"""Named, splittable random streams.

Every stream is a numpy ``Generator`` over the Philox-4x64 counter-based bit
generator, keyed by ``SeedSequence(seed, spawn_key=path)`` where ``path`` is
the CRC32 of each name in the split chain. The algorithm and derivation are
fixed, so a (seed, name) pair yields the same draws on every machine.
"""
from __future__ import annotations

import json
import zlib

import numpy as np

ALGORITHM = "philox4x64-10"


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in self.path))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, name: str) -> "Rng":
        """An independent child stream; the parent's position is not consumed."""
        return Rng(self.seed, self.path + (name,))

    @property
    def name(self) -> str:
        return "/".join(self.path) or "<root>"

    def get_state(self) -> dict:
        state = self.generator.bit_generator.state
        return {"seed": self.seed, "path": list(self.path), "state": _jsonable(state)}

    def set_state(self, blob: dict) -> None:
        if blob["seed"] != self.seed or tuple(blob["path"]) != self.path:
            raise ValueError(f"rng state for {blob['path']} cannot be loaded into {self.name}")
        self.generator.bit_generator.state = _from_jsonable(blob["state"])

    def dumps(self) -> bytes:
        return json.dumps(self.get_state(), sort_keys=True).encode("utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
