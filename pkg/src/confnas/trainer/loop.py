"""The alternating first-order bi-level search loop."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.optim import LrSchedule, adam, cosine_lr, optimizer_step, sgd
from ..autodiff.tensor import NonFiniteError, Tape, Tensor, backward, no_grad
from ..data import AuditedLoader, BatchStream, Dataset
from ..expdir import atomic_write_text
from ..mutations import PruneState, perturb, prune, prune_schedule
from ..regstop import GmWindow, drnas_penalty, fairdarts_penalty, flatten_grads, skip_count_stop
from ..rng import Rng
from ..samplers import Sampler
from ..searchspace.genotype import Genotype, discretize
from ..searchspace.operations import make_operation_set
from ..searchspace.supernet import ForwardContext, build_supernet
from . import checkpoint as ckpt
from .metrics import MetricsSink, alpha_sidecar, epoch_record, format_record
from .profile import Profile, serialize_profile

RNG_STREAMS = ("sampler", "perturb", "partial", "data_train", "data_val")


class TrialAborted(RuntimeError):
    def __init__(self, epoch: int, cause: str):
        super().__init__(f"trial aborted at epoch {epoch}: {cause}")
        self.epoch, self.cause = epoch, cause


def warmup_gate(epoch: int, warm_epochs: int) -> bool:
    """True while the architecture parameters are frozen."""
    return epoch < warm_epochs


@dataclass
class StepStats:
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    arch_updated: bool
    arch_grad_norms: dict = field(default_factory=dict)
    op_evaluations: int = 0
    frozen_now: list = field(default_factory=list)


@dataclass
class TrialResult:
    genotype: Genotype
    genotypes: list
    train_loss: list
    train_acc: list
    val_loss: list
    val_acc: list
    seed: int
    out_dir: Optional[Path] = None
    checkpoint_paths: list = field(default_factory=list)
    metrics_path: Optional[Path] = None
    stopped_early: bool = False
    metric_failures: int = 0

    @property
    def epochs_completed(self) -> int:
        return len(self.val_loss)

    @property
    def final_val_loss(self) -> float:
        return self.val_loss[-1]

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss)


def _set_requires_grad(tensors, flag: bool) -> None:
    for t in tensors:
        t.requires_grad = flag


def _accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float((np.argmax(logits.data, axis=1) == labels).mean())


class TrainerState:
    """Supernet, optimizers, schedule, pruning/OLES state and the trial's rng streams."""

    def __init__(self, profile: Profile, variant: str, opset: str, num_classes: int, seed: int,
                 in_channels: int = 3):
        self.profile, self.variant, self.opset_kind = profile, variant, opset
        self.num_classes, self.seed, self.in_channels = num_classes, seed, in_channels
        mut = profile.mutation_config()
        self.mutation = mut
        self.net = build_supernet(variant, make_operation_set(opset), num_classes,
                                  channel_override=profile.channels or None, partial_k=mut.partial_k, seed=seed,
                                  sampler_kind=profile.sampler, edge_normalization=profile.edge_normalization,
                                  in_channels=in_channels)
        self.arch = self.net.arch
        self.sampler = Sampler(profile.sampler_config())
        root = Rng(seed).split("trial")
        self.rngs = {name: root.split(name) for name in RNG_STREAMS}
        self.weights = self.net.parameters()
        betas = [self.arch.beta[ct] for ct in self.arch.cell_types] if self.arch.beta else []
        alphas = [self.arch.alpha[ct] for ct in self.arch.cell_types]
        if profile.beta_optimizer == "arch":
            self.arch_params, self.weight_params = alphas + betas, list(self.weights)
        else:
            self.arch_params, self.weight_params = alphas, list(self.weights) + betas
        self.weight_opt = sgd(profile.lr, profile.momentum, profile.weight_decay)
        self.arch_opt = adam(profile.arch_lr, profile.arch_beta1, profile.arch_beta2, profile.arch_weight_decay)
        self.schedule = LrSchedule(profile.lr, profile.lr_min, profile.epochs)
        self.epoch = 0
        self.prune_state: Optional[PruneState] = PruneState.full(self.arch) if mut.prune_epochs else None
        self.gm: Optional[GmWindow] = GmWindow(profile.oles_window, profile.oles_threshold) if profile.oles else None
        self.op_groups = self._oles_groups() if profile.oles else {}
        index = {id(p): i for i, p in enumerate(self.weight_params)}
        self.group_index = {k: [index[id(p)] for p in ps] for k, ps in self.op_groups.items()}
        self.frozen_params: set[int] = set()
        self.history = {"train_loss": [], "train_acc": [], "val_loss": [], "val_acc": []}
        self.metric_lines: list[str] = []
        self.genotype_texts: list[str] = []

    def _oles_groups(self) -> dict:
        groups: dict = {}
        for (ci, e, o), params in self.net.op_parameter_groups():
            key = (ci, e, o) if self.profile.oles_scope == "edge" else (o,)
            groups.setdefault(key, []).extend(params)
        return groups

    @property
    def masks(self) -> Optional[dict]:
        return None if self.prune_state is None else self.prune_state.masks

    def tau(self) -> float:
        return self.sampler.tau(self.epoch, self.profile.epochs)

    def lr(self) -> float:
        return cosine_lr(self.epoch, self.schedule)

    def config_hash(self, dataset_name: str = "") -> str:
        key = "\n".join([serialize_profile(self.profile), self.variant, self.opset_kind, str(self.num_classes),
                         str(self.seed), str(self.in_channels), dataset_name])
        return hashlib.sha256(key.encode("utf-8")).hexdigest()

    def discretize(self) -> Genotype:
        return discretize(self.arch, self.profile.discretization, self.profile.activation, self.masks)

    # ---------------------------------------------------------- persistence
    def to_checkpoint(self, streams: dict[str, BatchStream]) -> tuple[dict, dict]:
        arrays = {
            "weights": {f"p{i}": p.data for i, p in enumerate(self.weights)},
            "buffers": dict(self.net.named_buffers()),
            "arch": {f"a{i}": t.data for i, t in enumerate(self.arch.tensors())},
            "optim_weight": _opt_arrays(self.weight_opt),
            "optim_arch": _opt_arrays(self.arch_opt),
        }
        if self.prune_state is not None:
            arrays["prune"] = dict(self.prune_state.masks)
        meta = {
            "state": {
                "epoch": self.epoch,
                "weight_opt_step": self.weight_opt.step,
                "arch_opt_step": self.arch_opt.step,
                "history": self.history,
                "metric_lines": self.metric_lines,
                "genotypes": self.genotype_texts,
                "frozen_params": sorted(self.frozen_params),
            },
            "rng": {name: r.get_state() for name, r in self.rngs.items()},
            "streams": {name: s.get_state() for name, s in streams.items()},
        }
        if self.gm is not None:
            meta["gm"] = {"scores": [[list(k), v] for k, v in self.gm.scores.items()],
                          "frozen": [list(k) for k in sorted(self.gm.frozen)]}
        return arrays, meta

    def from_checkpoint(self, arrays: dict, meta: dict, streams: dict[str, BatchStream]) -> None:
        for i, p in enumerate(self.weights):
            p.data = arrays["weights"][f"p{i}"].astype(p.dtype)
        for name, buf in self.net.named_buffers():
            buf[...] = arrays["buffers"][name]
        for i, t in enumerate(self.arch.tensors()):
            t.data = arrays["arch"][f"a{i}"].astype(t.dtype)
        _load_opt(self.weight_opt, arrays["optim_weight"])
        _load_opt(self.arch_opt, arrays["optim_arch"])
        if "prune" in arrays:
            self.prune_state = PruneState({ct: m.astype(bool) for ct, m in arrays["prune"].items()})
        st = meta["state"]
        self.epoch = st["epoch"]
        self.weight_opt.step, self.arch_opt.step = st["weight_opt_step"], st["arch_opt_step"]
        self.history = {k: list(v) for k, v in st["history"].items()}
        self.metric_lines = list(st["metric_lines"])
        self.genotype_texts = list(st["genotypes"])
        self.frozen_params = set(st["frozen_params"])
        for name, r in self.rngs.items():
            r.set_state(meta["rng"][name])
        for name, s in streams.items():
            s.set_state(meta["streams"][name])
        if self.gm is not None and "gm" in meta:
            self.gm.scores = {tuple(k): list(v) for k, v in meta["gm"]["scores"]}
            self.gm.frozen = {tuple(k) for k in meta["gm"]["frozen"]}


def _opt_arrays(state) -> dict:
    out = {}
    for i, bufs in state.buffers.items():
        for j, b in enumerate(bufs):
            out[f"{i}_{j}"] = b
    return out


def _load_opt(state, arrays: dict) -> None:
    grouped: dict[int, dict[int, np.ndarray]] = {}
    for key, arr in arrays.items():
        i, j = (int(v) for v in key.split("_"))
        grouped.setdefault(i, {})[j] = arr
    state.buffers = {i: tuple(g[j] for j in sorted(g)) for i, g in grouped.items()}


# ------------------------------------------------------------------ stepping

def _penalties(state: TrainerState, sampled) -> Optional[Tensor]:
    pen = state.profile.penalty_config()
    total = None
    if pen.fairdarts_penalty:
        total = fairdarts_penalty([sampled.weights[ct] for ct in state.arch.cell_types], pen.fairdarts_lambda)
    if pen.drnas_penalty:
        term = drnas_penalty([state.arch.alpha[ct] for ct in state.arch.cell_types], pen.drnas_lambda)
        total = term if total is None else ops.add(total, term)
    return total


def _forward(state: TrainerState, x: np.ndarray, alpha_override=None):
    sampled = state.sampler.sample(state.arch, state.rngs["sampler"].generator, state.masks, state.tau(),
                                   alpha_override)
    ctx = ForwardContext(sampled, state.masks, state.rngs["partial"].generator)
    logits = state.net(Tensor(x), ctx)
    return logits, sampled, ctx


def bilevel_step(state: TrainerState, train_batch, val_batch) -> StepStats:
    """One arch step on `val_batch` (skipped during warm-up), then one weight step on `train_batch`."""
    prof = state.profile
    xv, yv = val_batch
    xt, yt = train_batch
    arch_frozen = warmup_gate(state.epoch, prof.warm_epochs)
    val_op_grads = None
    grad_norms: dict = {}
    if not arch_frozen:
        need_w = state.gm is not None
        _set_requires_grad(state.weights, need_w)
        _set_requires_grad(state.arch.tensors(), False)
        _set_requires_grad(state.arch_params, True)
        with Tape() as tape:
            logits, sampled, _ = _forward(state, xv)
            ce = ops.cross_entropy(logits, yv)
            pen = _penalties(state, sampled)
            loss = ce if pen is None else ops.add(ce, pen)
        wrt = list(state.arch_params) + (list(state.weights) if need_w else [])
        grads = backward(tape, loss, params=wrt)
        for ct in state.arch.cell_types:
            grad_norms[ct] = float(np.linalg.norm(grads[state.arch.alpha[ct]]))
        optimizer_step(state.arch_opt, state.arch_params, grads)
        state.arch.check_finite()
        if need_w:
            val_op_grads = {k: flatten_grads(grads[p] for p in ps) for k, ps in state.op_groups.items()}
    else:
        with no_grad():
            logits, _, _ = _forward(state, xv)
            ce = ops.cross_entropy(logits, yv)
        if not np.isfinite(ce.data).all():
            raise NonFiniteError(f"validation loss is not finite ({ce.item()})")
    val_loss, val_acc = ce.item(), _accuracy(logits, yv)

    # weight step: only network weights (and beta if it is trained with them) take gradients
    _set_requires_grad(state.arch.tensors(), False)
    _set_requires_grad(state.weight_params, True)
    override = None
    mut = state.mutation
    if mut.perturbation == "random":
        override = perturb(state.arch, "random", mut.epsilon, state.rngs["perturb"].generator)
    elif mut.perturbation == "adversarial":
        def val_loss_fn(alpha, batch):
            lg, _, _ = _forward(state, batch[0], alpha)
            return ops.cross_entropy(lg, batch[1])
        _set_requires_grad(state.weight_params, False)
        override = perturb(state.arch, "adversarial", mut.epsilon, state.rngs["perturb"].generator,
                           val_batch, val_loss_fn)
        _set_requires_grad(state.weight_params, True)
    with Tape() as tape:
        logits, _, ctx = _forward(state, xt, override)
        loss = ops.cross_entropy(logits, yt)
    grads = backward(tape, loss, params=state.weight_params)
    frozen_now = []
    if state.gm is not None and val_op_grads is not None:
        train_op_grads = {k: flatten_grads(grads[p] for p in ps) for k, ps in state.op_groups.items()}
        frozen_now = state.gm.update(train_op_grads, val_op_grads)
        for key in frozen_now:
            state.frozen_params.update(state.group_index[key])
    optimizer_step(state.weight_opt, state.weight_params, grads, lr=state.lr(),
                   skip=frozenset(state.frozen_params))
    _set_requires_grad(state.arch.tensors(), True)
    return StepStats(loss.item(), _accuracy(logits, yt), val_loss, val_acc, not arch_frozen, grad_norms,
                     ctx.op_evaluations, frozen_now)


# ------------------------------------------------------------------- a trial

def train_supernet(profile: Profile, dataset: Dataset, split, seed: int, out_dir, variant: str, opset: str,
                   resume_from=None, stop_after_epoch: Optional[int] = None) -> TrialResult:
    """Run (or resume) one search trial, writing every artifact under `out_dir`.

    `split` supplies `search_train` and `search_val` index arrays.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = TrainerState(profile, variant, opset, dataset.classes, seed, in_channels=dataset.image_shape[0])
    chash = state.config_hash(dataset.name)
    batch = profile.batch_size(variant)
    train_loader = AuditedLoader(dataset, split.search_train, "search_train")
    val_loader = AuditedLoader(dataset, split.search_val, "search_val")
    streams = {"train": BatchStream(train_loader, batch, state.rngs["data_train"]),
               "val": BatchStream(val_loader, batch, state.rngs["data_val"])}
    steps = profile.steps_per_epoch or max(1, len(train_loader) // streams["train"].batch_size)
    atomic_write_text(out / "profile.txt", serialize_profile(profile))
    atomic_write_text(out / "trial.txt", f"variant={variant}\nopset={opset}\nseed={seed}\n"
                                         f"dataset={dataset.name}\nconfig_hash={chash}\n")
    ckpt_path = out / "checkpoint.bin"
    if resume_from is not None:
        _, arrays, meta = ckpt.load(resume_from, expected_hash=chash)
        state.from_checkpoint(arrays, meta, streams)
    sink = MetricsSink(out / "metrics.log")
    sink.rewrite(state.metric_lines)
    schedule = prune_schedule(state.mutation)
    stopped = False
    checkpoints = []
    try:
        while state.epoch < profile.epochs:
            e = state.epoch
            events = []
            if e in schedule:
                state.prune_state = prune(state.prune_state, state.arch, schedule[e], profile.activation)
                events.append(f"pruned@{e}")
            sums = np.zeros(4)
            norms: dict = {}
            frozen_total = 0
            evals = 0
            for _ in range(steps):
                st = bilevel_step(state, streams["train"].next(), streams["val"].next())
                sums += (st.train_loss, st.train_acc, st.val_loss, st.val_acc)
                for ct, v in st.arch_grad_norms.items():
                    norms[ct] = norms.get(ct, 0.0) + v / steps
                frozen_total += len(st.frozen_now)
                evals = st.op_evaluations
            means = sums / steps
            for k, v in zip(("train_loss", "train_acc", "val_loss", "val_acc"), means):
                state.history[k].append(float(v))
            geno = state.discretize()
            text = geno.serialize()
            state.genotype_texts.append(text)
            atomic_write_text(out / f"genotype_epoch{e}.txt", text)
            atomic_write_text(out / f"alpha_epoch{e}.txt", alpha_sidecar(state.arch, state.masks))
            rec = epoch_record(state, e, means, norms, geno, evals, frozen_total, events)
            line = format_record(rec)
            state.metric_lines.append(line)
            sink.write(line)
            state.epoch += 1
            if profile.early_stop == "skip_count" and skip_count_stop(geno, profile.skip_threshold):
                stopped = True
            if state.epoch % profile.checkpointing_freq == 0 or state.epoch == profile.epochs or stopped:
                arrays, meta = state.to_checkpoint(streams)
                ckpt.save(ckpt_path, chash, arrays, meta)
                if ckpt_path not in checkpoints:
                    checkpoints.append(ckpt_path)
            if stopped or (stop_after_epoch is not None and state.epoch >= stop_after_epoch):
                break
    except (NonFiniteError, FloatingPointError) as exc:
        atomic_write_text(out / "FAILED", f"epoch={state.epoch}\ncause={exc}\n")
        raise TrialAborted(state.epoch, str(exc)) from exc
    final = Genotype.parse(state.genotype_texts[-1])
    finished = stopped or state.epoch >= profile.epochs
    if finished:
        atomic_write_text(out / "genotype.txt", final.serialize())
        h = state.history
        atomic_write_text(out / "result.txt",
                          f"seed={seed}\nepochs_completed={len(h['val_loss'])}\n"
                          f"final_val_loss={h['val_loss'][-1]!r}\nbest_val_loss={min(h['val_loss'])!r}\n"
                          f"stopped_early={'true' if stopped else 'false'}\n")
    return TrialResult(final, [Genotype.parse(t) for t in state.genotype_texts], state.history["train_loss"],
                       state.history["train_acc"], state.history["val_loss"], state.history["val_acc"], seed,
                       out, checkpoints, out / "metrics.log", stopped, sink.failures)


def load_trial_result(trial_dir) -> TrialResult:
    """Rebuild a finished trial's result from its directory."""
    d = Path(trial_dir)
    kv = dict(line.split("=", 1) for line in (d / "result.txt").read_text().splitlines() if "=" in line)
    epochs = int(kv["epochs_completed"])
    genos = [Genotype.load(d / f"genotype_epoch{e}.txt") for e in range(epochs)]
    series = {"train_loss": [], "train_acc": [], "val_loss": [], "val_acc": []}
    for line in (d / "metrics.log").read_text().splitlines():
        rec = dict(tok.split("=", 1) for tok in line.split())
        for k in series:
            series[k].append(float(rec[k]))
    return TrialResult(Genotype.load(d / "genotype.txt"), genos, series["train_loss"], series["train_acc"],
                       series["val_loss"], series["val_acc"], int(kv["seed"]), d, [d / "checkpoint.bin"],
                       d / "metrics.log", kv.get("stopped_early") == "true")
