"""The nine-benchmark suite and its evaluation protocol.

Search on the first half of the training data (split 1:1 into supernet
train/val), keep the trial with the lowest validation loss over three seeds,
retrain the discrete model on the other half under a 3x3 lr/wd grid and test.
"""
from __future__ import annotations

import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import recalibrate_batchnorm
from .autodiff.optim import LrSchedule, cosine_lr, optimizer_step, sgd
from .autodiff.tensor import Tape, Tensor, backward, no_grad
from .data import AccessViolation, AuditedLoader, BatchStream, Dataset, augment_crop_flip
from .expdir import ExperimentDir, append_line_locked, atomic_write_text
from .rng import Rng
from .searchspace.discrete import build_discrete_model
from .searchspace.genotype import Genotype
from .searchspace.operations import OPSET_KINDS, make_operation_set
from .searchspace.supernet import SupernetVariant, get_variant
from .trainer.loop import TrialResult, load_trial_result, train_supernet
from .trainer.profile import Profile

BENCH_VARIANTS = ("deep", "single_cell", "wide")
LEDGER_COLUMNS = ("benchmark", "method", "hp_id", "seed", "test_accuracy", "epochs", "wall_seconds",
                  "genotype_path")
SELECTION_CRITERIA = ("final_val_loss", "best_val_loss")


@dataclass(frozen=True)
class Benchmark:
    id: str
    variant: SupernetVariant
    opset: str

    @property
    def edges(self) -> int:
        return self.variant.edges_per_cell

    @property
    def num_ops(self) -> int:
        return len(make_operation_set(self.opset).names)


def enumerate_benchmarks() -> list[Benchmark]:
    """All variant x op-set combinations, sorted by id."""
    out = [Benchmark(f"{v}_{o}", get_variant(v), o) for v in BENCH_VARIANTS for o in OPSET_KINDS]
    return sorted(out, key=lambda b: b.id)


def get_benchmark(bench_id: str) -> Benchmark:
    for b in enumerate_benchmarks():
        if b.id == bench_id:
            return b
    ids = ", ".join(b.id for b in enumerate_benchmarks())
    raise ValueError(f"unknown benchmark {bench_id!r}; expected one of: {ids}")


# --------------------------------------------------------------------- splits

@dataclass
class DatasetSplit:
    search_train: np.ndarray
    search_val: np.ndarray
    retrain_train: np.ndarray
    test: np.ndarray
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.search_train), len(self.search_val), len(self.retrain_train)

    @property
    def search(self) -> np.ndarray:
        return np.concatenate([self.search_train, self.search_val])


def split_dataset(n_train: int, seed: int, n_test: int = 0) -> DatasetSplit:
    """Shuffled partition: a quarter each for supernet train and val, the rest for retraining.

    When n is not a multiple of 4 the retraining part takes the leftovers.
    """
    if n_train < 4:
        raise ValueError(f"split_dataset: need at least 4 training items, got {n_train}")
    perm = Rng(seed).split("split").generator.permutation(n_train)
    q = n_train // 4
    return DatasetSplit(np.sort(perm[:q]), np.sort(perm[q:2 * q]), np.sort(perm[2 * q:]),
                        np.arange(n_test, dtype=np.int64), seed)


def select_architecture(trials: Sequence[TrialResult], criterion: str = "final_val_loss") -> Genotype:
    return select_trial(trials, criterion).genotype


def select_trial(trials: Sequence[TrialResult], criterion: str = "final_val_loss") -> TrialResult:
    """The trial with the lowest validation loss; ties go to the lowest seed."""
    if not trials:
        raise ValueError("select_architecture: no trials given")
    if criterion not in SELECTION_CRITERIA:
        raise ValueError(f"unknown selection criterion {criterion!r}; expected one of {SELECTION_CRITERIA}")
    return min(trials, key=lambda t: (getattr(t, criterion), t.seed))


# ------------------------------------------------------------------ retraining

@dataclass(frozen=True)
class HPConfig:
    id: str
    learning_rate: float
    weight_decay: float


def hp_grid() -> list[HPConfig]:
    grid = []
    for lr in (0.025, 0.1, 0.01):
        for wd in (1e-4, 3e-4, 1e-3):
            grid.append(HPConfig(f"HP{len(grid) + 1}", lr, wd))
    return grid


def get_hp(hp_id: str) -> HPConfig:
    for hp in hp_grid():
        if hp.id == hp_id:
            return hp
    raise ValueError(f"unknown hyperparameter set {hp_id!r}; expected HP1..HP9")


@dataclass
class RetrainOverrides:
    epochs: int = 300
    batch_size: int = 512
    channels: Optional[int] = None
    augment: bool = True
    momentum: float = 0.9
    eval_batch_size: int = 256
    recalibrate_bn: bool = False  # re-estimate BN statistics on the retraining data before testing


@dataclass
class EvalResult:
    benchmark: str
    method: str
    genotype: Genotype
    hp_id: str
    seed: int
    test_accuracy: float
    epochs: int
    train_curve: list = field(default_factory=list)
    wall_seconds: float = 0.0
    genotype_path: str = ""
    forbidden_reads: int = 0

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 100.0:
            raise ValueError(f"test accuracy {self.test_accuracy} outside [0, 100]")

    def ledger_line(self) -> str:
        vals = (self.benchmark, self.method, self.hp_id, self.seed, f"{self.test_accuracy:.4f}", self.epochs,
                f"{self.wall_seconds:.3f}", self.genotype_path)
        return "\t".join(str(v) for v in vals)


def evaluate_model(model, dataset: Dataset, batch_size: int = 256) -> float:
    """Test accuracy in percent."""
    loader = AuditedLoader(dataset, np.arange(dataset.n_test), "test", test=True)
    model.eval()
    correct = 0
    with no_grad():
        for start in range(0, dataset.n_test, batch_size):
            x, y = loader.fetch(np.arange(start, min(start + batch_size, dataset.n_test)))
            logits = model(Tensor(x))
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
    model.train()
    return 100.0 * correct / max(dataset.n_test, 1)


def retrain(genotype: Genotype, benchmark: Benchmark, hp: HPConfig, split: DatasetSplit, dataset: Dataset,
            seed: int = 0, overrides: Optional[RetrainOverrides] = None, method: str = "",
            out_dir=None) -> EvalResult:
    """Train the discrete model from scratch on the retraining half and test it."""
    ov = overrides or RetrainOverrides()
    t0 = time.perf_counter()
    model = build_discrete_model(genotype, benchmark.variant, make_operation_set(benchmark.opset),
                                 dataset.classes, ov.channels, seed, dataset.image_shape[0])
    root = Rng(seed).split("retrain")
    loader = AuditedLoader(dataset, split.retrain_train, "retrain")
    stream = BatchStream(loader, ov.batch_size, root.split("batches"))
    aug_rng = root.split("augment").generator
    steps = max(1, len(loader) // stream.batch_size)
    params = model.parameters()
    opt = sgd(hp.learning_rate, ov.momentum, hp.weight_decay)
    schedule = LrSchedule(hp.learning_rate, 0.0, ov.epochs)
    curve = []
    for epoch in range(ov.epochs):
        lr = cosine_lr(epoch, schedule)
        losses = []
        for _ in range(steps):
            x, y = stream.next()
            if ov.augment:
                x = augment_crop_flip(x, aug_rng)
            with Tape() as tape:
                loss = ops.cross_entropy(model(Tensor(x)), y)
            grads = backward(tape, loss, params=params)
            optimizer_step(opt, params, grads, lr=lr)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    if ov.recalibrate_bn:
        idx = loader.allowed
        recalibrate_batchnorm(model, (loader.fetch(idx[i:i + ov.eval_batch_size])[0]
                                      for i in range(0, len(idx), ov.eval_batch_size)))
    forbidden = loader.audit(split.search)
    if forbidden:
        raise AccessViolation(f"retraining read {forbidden} search indices")
    acc = evaluate_model(model, dataset, ov.eval_batch_size)
    result = EvalResult(benchmark.id, method, genotype, hp.id, seed, acc, ov.epochs, curve,
                        time.perf_counter() - t0, forbidden_reads=forbidden)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_text(out / "genotype.txt", genotype.serialize())
        atomic_write_text(out / "result.txt", f"benchmark={benchmark.id}\nmethod={method}\nhp={hp.id}\n"
                                              f"seed={seed}\ntest_accuracy={acc!r}\nepochs={ov.epochs}\n"
                                              f"train_curve={','.join(repr(v) for v in curve)}\n")
        result.genotype_path = str(out / "genotype.txt")
    return result


# ------------------------------------------------------------------ summaries

@dataclass
class Summary:
    method: str
    benchmark: str
    mean: float
    std: float
    max: float
    count: int
    best_hp: str
    missing: tuple = ()

    @property
    def partial(self) -> bool:
        return bool(self.missing)


def summarize(results: Sequence[EvalResult], hp_ids: Optional[Sequence[str]] = None):
    """Per (method, benchmark) mean/std/max over the HP grid, plus the best-HP tally.

    Groups missing any of `hp_ids` (default HP1..HP9) are flagged partial and
    list the gaps. The std is the population standard deviation.
    """
    expected = list(hp_ids) if hp_ids is not None else [hp.id for hp in hp_grid()]
    groups: dict[tuple[str, str], dict[str, float]] = {}
    for r in results:
        groups.setdefault((r.method, r.benchmark), {})[r.hp_id] = r.test_accuracy
    table, tally = {}, Counter()
    for (method, bench), accs in sorted(groups.items()):
        vals = np.array([accs[h] for h in sorted(accs, key=_hp_order)])
        order = sorted(accs, key=_hp_order)
        best = order[int(np.argmax(vals))]
        tally[best] += 1
        missing = tuple(h for h in expected if h not in accs)
        table[(method, bench)] = Summary(method, bench, float(vals.mean()), float(vals.std()), float(vals.max()),
                                         len(vals), best, missing)
    return table, tally


def _hp_order(hp_id: str):
    return (0, int(hp_id[2:])) if hp_id.startswith("HP") and hp_id[2:].isdigit() else (1, hp_id)


def read_ledger(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("benchmark\t"):
            continue
        vals = line.split("\t")
        if len(vals) != len(LEDGER_COLUMNS):
            raise ValueError(f"{path}: malformed ledger line {line!r}")
        rows.append(dict(zip(LEDGER_COLUMNS, vals)))
    return rows


def ledger_results(path) -> list[EvalResult]:
    out = []
    for row in read_ledger(path):
        gpath = row["genotype_path"]
        geno = Genotype.load(gpath) if gpath and Path(gpath).exists() else None
        out.append(EvalResult(row["benchmark"], row["method"], geno, row["hp_id"], int(row["seed"]),
                              float(row["test_accuracy"]), int(row["epochs"]), [], float(row["wall_seconds"]),
                              gpath))
    return out


# ------------------------------------------------------------ full protocol

@dataclass
class DeskOverrides:
    """Desk-scale shrink of search and retraining (the paper-scale values stay in the presets)."""

    channels: int = 8
    search_epochs: int = 3
    steps_per_epoch: int = 20
    search_batch_size: int = 4
    retrain_epochs: int = 3
    retrain_batch_size: int = 32
    num_hps: int = 2
    augment: bool = False
    recalibrate_bn: bool = True

    def profile(self, base: Profile) -> Profile:
        return base.desk(self.search_epochs, self.steps_per_epoch, self.channels, self.search_batch_size)

    def retrain_overrides(self) -> RetrainOverrides:
        return RetrainOverrides(self.retrain_epochs, self.retrain_batch_size, self.channels, self.augment,
                                recalibrate_bn=self.recalibrate_bn)

    def hps(self) -> list[HPConfig]:
        return hp_grid()[:self.num_hps]


def planned_trials(benchmarks: Sequence[Benchmark], seeds: Sequence[int]) -> list[tuple[str, int]]:
    return [(b.id, s) for b in benchmarks for s in seeds]


def run_search_trials(profile: Profile, method: str, benchmark: Benchmark, dataset: Dataset, split: DatasetSplit,
                      exp: ExperimentDir, seeds: Sequence[int] = (0, 1, 2), workers: int = 1) -> list[TrialResult]:
    """Run (or reuse finished) trials for every seed; `workers` > 1 runs seeds in separate processes."""
    todo = {}
    done = {}
    for seed in seeds:
        tdir = exp.trial(benchmark.id, method, seed)
        if (tdir / "result.txt").exists():
            done[seed] = load_trial_result(tdir)
        else:
            todo[seed] = tdir
    args = lambda seed: (profile, dataset, split, seed, todo[seed], benchmark.variant.name, benchmark.opset)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(todo))) as pool:
            futures = {seed: pool.submit(train_supernet, *args(seed)) for seed in todo}
            for seed, fut in futures.items():
                done[seed] = fut.result()
    else:
        for seed in todo:
            done[seed] = train_supernet(*args(seed))
    return [done[seed] for seed in seeds]


def run_benchsuite(profiles: dict[str, Profile], dataset: Dataset, out_dir, split_seed: int = 0,
                   benchmarks: Optional[Sequence[Benchmark]] = None, seeds: Sequence[int] = (0, 1, 2),
                   desk: Optional[DeskOverrides] = None, criterion: str = "final_val_loss",
                   log: Callable[[str], None] = lambda s: None, workers: int = 1) -> list[EvalResult]:
    """Search, select and retrain for every method in `profiles` and every benchmark."""
    benchmarks = list(benchmarks) if benchmarks is not None else enumerate_benchmarks()
    exp = ExperimentDir(out_dir)
    split = split_dataset(dataset.n_train, split_seed, dataset.n_test)
    hps = desk.hps() if desk else hp_grid()
    ov = desk.retrain_overrides() if desk else RetrainOverrides()
    results = []
    for method, base in profiles.items():
        profile = desk.profile(base) if desk else base
        for bench in benchmarks:
            trials = run_search_trials(profile, method, bench, dataset, split, exp, seeds, workers)
            best = select_trial(trials, criterion)
            gpath = exp.selected_genotype(bench.id, method)
            best.genotype.save(gpath)
            log(f"{method} {bench.id}: selected seed {best.seed} ({criterion}={getattr(best, criterion):.4f})")
            for hp in hps:
                rdir = exp.retrain(bench.id, method, hp.id)
                res = retrain(best.genotype, bench, hp, split, dataset, 0, ov, method, rdir)
                append_line_locked(exp.ledger, res.ledger_line())
                results.append(res)
                log(f"{method} {bench.id} {hp.id}: test accuracy {res.test_accuracy:.2f}%")
    return results


__all__ = ["Benchmark", "DatasetSplit", "DeskOverrides", "EvalResult", "HPConfig", "LEDGER_COLUMNS",
           "RetrainOverrides", "Summary", "enumerate_benchmarks", "evaluate_model", "get_benchmark", "get_hp",
           "hp_grid", "ledger_results", "planned_trials", "read_ledger", "retrain", "run_benchsuite",
           "run_search_trials", "select_architecture", "select_trial", "split_dataset", "summarize"]
