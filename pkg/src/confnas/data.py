"""Datasets: CIFAR-10 binary batches, a synthetic desk-scale task, audited loaders."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rng import Rng

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_PER_FILE = 10000


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Train and test images in [0, 1] (NCHW float32) with integer labels.

    `mean`/`std` are per-channel statistics of the train images and are used
    by `normalize`.
    """

    images: np.ndarray
    labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    classes: int
    name: str
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.test_images) != len(self.test_labels):
            raise DataError("image and label counts differ")
        for lab in (self.labels, self.test_labels):
            if len(lab) and (lab.min() < 0 or lab.max() >= self.classes):
                raise DataError(f"labels must lie in [0, {self.classes})")
        if self.mean is None:
            self.mean = self.images.mean(axis=(0, 2, 3)).astype(np.float32)
            self.std = self.images.std(axis=(0, 2, 3)).astype(np.float32)

    @property
    def n_train(self) -> int:
        return len(self.labels)

    @property
    def n_test(self) -> int:
        return len(self.test_labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean[None, :, None, None]) / self.std[None, :, None, None]).astype(np.float32)


# ------------------------------------------------------------------- CIFAR-10

def _read_cifar_file(path: Path, expected_records: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise DataError(f"{path.name}: truncated record at byte offset {whole * CIFAR_RECORD} "
                        f"(file has {raw.size} bytes, records are {CIFAR_RECORD} bytes)")
    n = raw.size // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise DataError(f"{path.name}: expected {expected_records} records, found {n} "
                        f"(byte offset {n * CIFAR_RECORD})")
    rec = raw.reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path.name}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    # label byte, then 1024 red, 1024 green, 1024 blue bytes in row-major order
    images = rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory, strict_sizes: bool = True) -> Dataset:
    """Read the five train batches and the test batch of the binary archive.

    With `strict_sizes=False` files may hold fewer records (test fixtures).
    """
    directory = Path(directory)
    expected = CIFAR_PER_FILE if strict_sizes else None
    parts = [_read_cifar_file(directory / f, expected) for f in CIFAR_TRAIN_FILES]
    test_x, test_y = _read_cifar_file(directory / CIFAR_TEST_FILE, expected)
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                   test_x, test_y, 10, "cifar10")


def write_cifar_subset(src_dir, dst_dir, records: int = 500) -> None:
    """Copy the first `records` records of each batch file (the offline test fixture)."""
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    dst_dir.mkdir(parents=True, exist_ok=True)
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        with open(src_dir / name, "rb") as fh:
            data = fh.read(records * CIFAR_RECORD)
        (dst_dir / name).write_bytes(data)


def default_data_dir() -> Optional[str]:
    return os.environ.get("CONFOPT_DATA_DIR")


# -------------------------------------------------------------- synthetic task

def synth_dataset(n: int, classes: int, size: int, seed: int, n_test: Optional[int] = None,
                  noise: float = 0.15) -> Dataset:
    """Images whose class fixes the sign/identity of a tiled 3x3 template.

    Class c uses template T_c (for two classes T_1 = -T_0), tiled over the
    image, so the response of a fixed 3x3 convolution separates the classes;
    Gaussian pixel noise is added on top.
    """
    if n < classes:
        raise DataError(f"synth_dataset: need n >= classes ({n} < {classes})")
    if size < 8:
        raise DataError(f"synth_dataset: size must be >= 8, got {size}")
    if classes < 2:
        raise DataError("synth_dataset: need at least 2 classes")
    n_test = max(n // 4, classes) if n_test is None else n_test
    root = Rng(seed).split("synth")
    g = root.split("templates").generator
    base = g.standard_normal((3, 3, 3))
    base += 0.5 * np.sign(base.mean())  # nonzero mean so the global pool sees the class too
    if classes == 2:
        templates = np.stack([base, -base])
    else:
        templates = np.concatenate([base[None], g.standard_normal((classes - 1, 3, 3, 3))])
    templates /= templates.std(axis=(1, 2, 3), keepdims=True)
    reps = -(-size // 3)
    tiles = np.tile(templates, (1, 1, reps, reps))[:, :, :size, :size]

    def make(count: int, stream: str):
        gs = root.split(stream).generator
        labels = np.arange(count) % classes
        labels = labels[gs.permutation(count)]
        x = 0.5 + 0.2 * tiles[labels] + noise * gs.standard_normal((count, 3, size, size))
        return np.clip(x, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)

    x, y = make(n, "train")
    tx, ty = make(n_test, "test")
    return Dataset(x, y, tx, ty, classes, f"synth{classes}x{size}")


# ------------------------------------------------------------ audited access

class AccessViolation(RuntimeError):
    pass


class AuditedLoader:
    """Serve normalised batches from an allowed index set and record every read."""

    def __init__(self, dataset: Dataset, allowed: Sequence[int], name: str = "loader", test: bool = False):
        self.dataset = dataset
        self.allowed = np.asarray(allowed, dtype=np.int64)
        self._allowed_set = frozenset(self.allowed.tolist())
        self.name = name
        self.test = test
        self.reads: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.allowed)

    def fetch(self, index) -> tuple[np.ndarray, np.ndarray]:
        index = np.asarray(index, dtype=np.int64)
        bad = [int(i) for i in index if int(i) not in self._allowed_set]
        if bad:
            raise AccessViolation(f"{self.name}: read of indices outside its split, e.g. {bad[:5]}")
        self.reads.append(index.copy())
        ds = self.dataset
        images = ds.test_images if self.test else ds.images
        labels = ds.test_labels if self.test else ds.labels
        return ds.normalize(images[index]), labels[index]

    def accessed(self) -> np.ndarray:
        return np.unique(np.concatenate(self.reads)) if self.reads else np.zeros(0, dtype=np.int64)

    def audit(self, forbidden: Sequence[int]) -> int:
        """Number of distinct forbidden indices ever read."""
        return int(np.intersect1d(self.accessed(), np.asarray(forbidden, dtype=np.int64)).size)


class BatchStream:
    """Endless shuffled batches over `loader.allowed`; reshuffles on exhaustion (drops the tail)."""

    def __init__(self, loader: AuditedLoader, batch_size: int, rng: Rng):
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.loader = loader
        self.batch_size = min(batch_size, len(loader))
        self.rng = rng
        self.perm = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def next_indices(self) -> np.ndarray:
        if self.pos + self.batch_size > len(self.perm):
            self.perm = self.loader.allowed[self.rng.generator.permutation(len(self.loader))]
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        return self.loader.fetch(self.next_indices())

    def get_state(self) -> dict:
        return {"perm": self.perm.tolist(), "pos": self.pos, "rng": self.rng.get_state()}

    def set_state(self, state: dict) -> None:
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.pos = int(state["pos"])
        self.rng.set_state(state["rng"])


def augment_crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop after zero padding plus random horizontal flip (per image)."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def resolve_dataset(spec: Optional[str]) -> Dataset:
    """`synth:n=400,classes=2,size=8,seed=0` or a CIFAR-10 binary directory.

    Without a spec the CONFOPT_DATA_DIR directory is used.
    """
    spec = spec or default_data_dir()
    if not spec:
        raise DataError("no dataset given: pass --data or set CONFOPT_DATA_DIR")
    if spec.startswith("synth"):
        opts = {"n": 400, "classes": 2, "size": 8, "seed": 0}
        body = spec[len("synth"):].lstrip(":")
        for item in filter(None, body.split(",")):
            key, sep, val = item.partition("=")
            if not sep or key not in opts:
                raise DataError(f"bad synthetic dataset option {item!r}; expected n, classes, size, seed")
            try:
                opts[key] = int(val)
            except ValueError:
                raise DataError(f"synthetic dataset option {key} must be an integer, got {val!r}") from None
        return synth_dataset(opts["n"], opts["classes"], opts["size"], opts["seed"])
    return load_cifar10(spec)
