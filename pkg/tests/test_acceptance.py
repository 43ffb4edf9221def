"""The eight acceptance criteria, each at its stated tolerance and time budget.

A pass/fail line per criterion is printed in the terminal summary
(see conftest.pytest_terminal_summary).
"""
import math
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from confnas import benchsuite
from confnas.analytics import mean_rank_cd, read_rankings_tsv, spearman, win_rate_matrix
from confnas.autodiff import ops
from confnas.autodiff.gradcheck import CHECKED_KINDS, check_function, grad_check
from confnas.autodiff.nn import count_parameters
from confnas.autodiff.tensor import Tape, Tensor, backward
from confnas.benchsuite import (enumerate_benchmarks, hp_grid, ledger_results, retrain, select_architecture,
                                split_dataset)
from confnas.cli import run_cli
from confnas.data import synth_dataset
from confnas.regstop import drnas_penalty, fairdarts_penalty
from confnas.samplers import (Sampler, SamplerConfig, drnas_sample, gdas_sample_matrix, init_arch_parameters,
                              node_edge_mask)
from confnas.searchspace.genotype import Genotype, GenotypeEdge
from confnas.searchspace.operations import make_operation_set
from confnas.searchspace.supernet import build_supernet, get_variant
from confnas.trainer import TrialResult, preset, serialize_profile, train_supernet
from confnas.trainer.profile import METHODS

from .conftest import FIXTURES, criterion

FD_TRIALS, FD_TOL, FD_H = 20, 1e-4, 1e-5


# ------------------------------------------------------------------ 1

def test_criterion_1_structure():
    with criterion(1, "structural fidelity", 60):
        benches = enumerate_benchmarks()
        assert len(benches) == 9
        assert len({b.id for b in benches}) == 9
        expected = {"deep": (14, 16, 7), "wide": (14, 4, 18), "single_cell": (44, 1, 26)}
        for name, (edges, cells, channels) in expected.items():
            v = get_variant(name)
            assert (v.edges_per_cell, v.cells, v.initial_channels) == (edges, cells, channels)
        for b in benches:
            assert b.edges == expected[b.variant.name][0]
        counts = [count_parameters(build_supernet(v, make_operation_set("regular"), 10)) for v in expected]
        assert all(3e5 <= c <= 3e6 for c in counts), counts
        assert max(a / b for a, b in combinations(counts, 2) for a, b in ((a, b), (b, a))) <= 3


# ------------------------------------------------------------------ 2

def _gdas_case(rng):
    """ST gradient of a hard Gumbel draw vs finite differences of its soft relaxation (fixed noise)."""
    rows, n_ops = int(rng.integers(1, 4)), int(rng.integers(2, 8))
    alpha = rng.standard_normal((rows, n_ops))
    noise = rng.gumbel(size=(rows, n_ops))
    tau = float(rng.uniform(0.5, 5.0))
    proj = rng.standard_normal((rows, n_ops))
    a = Tensor(alpha, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        chosen, st = gdas_sample_matrix(a, tau, rng, noise=noise)
        loss = ops.sum(ops.mul(st, Tensor(proj, dtype=np.float64)))
    assert (st.data == np.eye(n_ops)[chosen]).all()
    analytic = backward(tape, loss, params=[a])[a]

    def soft(al):
        z = (al + noise) / tau
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return ((e / e.sum(axis=1, keepdims=True)) * proj).sum()

    numeric = np.zeros_like(alpha)
    for idx in np.ndindex(alpha.shape):
        up, dn = alpha.copy(), alpha.copy()
        up[idx] += FD_H
        dn[idx] -= FD_H
        numeric[idx] = (soft(up) - soft(dn)) / (2 * FD_H)
    return np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), np.abs(analytic).max())


def test_criterion_2_gradients():
    with criterion(2, "gradient correctness", 300):
        worst = {}
        for kind in CHECKED_KINDS:
            report = grad_check(kind, trials=FD_TRIALS, tol=FD_TOL, h=FD_H)
            worst[kind] = report.max_rel_error
        rng = np.random.default_rng(2)
        fair, dr, gd = 0.0, 0.0, 0.0
        for _ in range(FD_TRIALS):
            shapes = [(int(rng.integers(2, 6)), int(rng.integers(2, 8))) for _ in range(2)]
            lam = float(rng.uniform(0.1, 20))
            inputs = [rng.uniform(0.05, 0.95, s) for s in shapes]
            fair = max(fair, check_function(lambda a, b: fairdarts_penalty([a, b], lam), inputs, rng, FD_H))
            inputs = [rng.standard_normal(s) for s in shapes]
            dr = max(dr, check_function(lambda a, b: drnas_penalty([a, b], lam), inputs, rng, FD_H))
            gd = max(gd, _gdas_case(rng))
        worst.update(fairdarts_penalty=fair, drnas_penalty=dr, gdas_straight_through=gd)
        bad = {k: v for k, v in worst.items() if not v <= FD_TOL}
        assert not bad, bad


# ------------------------------------------------------------------ 3

def test_criterion_3_sampler_laws():
    with criterion(3, "sampler laws", 120):
        rng = np.random.default_rng(3)
        names = make_operation_set("regular").names
        arch = init_arch_parameters(("normal", "reduce"), 14, names, 4, rng, "darts", True)
        for ct in arch.cell_types:
            arch.alpha[ct].data = rng.standard_normal(arch.alpha[ct].shape).astype(np.float32) * 3
            arch.beta[ct].data = rng.standard_normal(arch.beta[ct].shape).astype(np.float32) * 3
        sw = Sampler(SamplerConfig("darts")).sample(arch, rng)
        mask = node_edge_mask(4)
        for ct in arch.cell_types:
            assert np.abs(sw.weights[ct].data.astype(np.float64).sum(axis=1) - 1).max() <= 1e-6
            ew = sw.edge_weights[ct].data.astype(np.float64)
            assert np.abs((ew * mask).sum(axis=1) - 1).max() <= 1e-6
            assert (ew[~mask] == 0).all()

        n = 10000
        conc = np.array([0.5, 1.0, 2.0, 4.0, 0.8])
        draws = np.stack([drnas_sample(conc, rng) for _ in range(n)])
        assert (draws >= 0).all() and np.abs(draws.sum(axis=1) - 1).max() <= 1e-9
        assert np.abs(draws.mean(axis=0) - conc / conc.sum()).max() <= 0.02

        k = 8
        chosen, st = gdas_sample_matrix(Tensor(np.zeros((n, k)), dtype=np.float64), 1.0, rng)
        freq = np.bincount(chosen, minlength=k) / n
        assert np.abs(freq - 1 / k).max() <= 0.02
        assert set(np.unique(st.data)) == {0.0, 1.0}
        assert (st.data.sum(axis=1) == 1).all() and (st.data.argmax(axis=1) == chosen).all()


# ------------------------------------------------------------------ 4

def test_criterion_4_protocol(monkeypatch):
    with criterion(4, "protocol fidelity", 60):
        grid = [(h.id, h.learning_rate, h.weight_decay) for h in hp_grid()]
        assert grid == [("HP1", 0.025, 1e-4), ("HP2", 0.025, 3e-4), ("HP3", 0.025, 1e-3),
                        ("HP4", 0.1, 1e-4), ("HP5", 0.1, 3e-4), ("HP6", 0.1, 1e-3),
                        ("HP7", 0.01, 1e-4), ("HP8", 0.01, 3e-4), ("HP9", 0.01, 1e-3)]

        for n in (400, 1000, 50000):
            s = split_dataset(n, seed=0)
            assert s.sizes() == (n // 4, n // 4, n - 2 * (n // 4))
            parts = [s.search_train, s.search_val, s.retrain_train]
            assert sum(len(p) for p in parts) == n
            assert len(np.unique(np.concatenate(parts))) == n

        def trial(seed, loss):
            g = Genotype({"normal": (GenotypeEdge(2, 0, f"op{seed}"),)})
            return TrialResult(g, [g], [1.0], [50.0], [loss], [50.0], seed)
        trials = [trial(0, 0.9), trial(1, 0.4), trial(2, 0.7)]
        assert select_architecture(trials).cells["normal"][0].op == "op1"

        loaders = []
        real = benchsuite.AuditedLoader

        def spy(*args, **kw):
            loader = real(*args, **kw)
            loaders.append(loader)
            return loader
        monkeypatch.setattr(benchsuite, "AuditedLoader", spy)
        ds = synth_dataset(64, 2, 8, seed=0)
        split = split_dataset(ds.n_train, 0, ds.n_test)
        g = Genotype({ct: tuple(GenotypeEdge(j + 2, s, op) for j in range(4) for s in (0, 1))
                      for ct, op in (("normal", "sep_conv_3x3"), ("reduce", "max_pool_3x3"))})
        ov = benchsuite.RetrainOverrides(epochs=2, batch_size=8, channels=4, augment=False)
        res = retrain(g, benchsuite.get_benchmark("wide_regular"), hp_grid()[0], split, ds, 0, ov)
        train_loader = next(lo for lo in loaders if lo.name == "retrain")
        read = train_loader.accessed()
        assert len(read) > 0
        assert np.intersect1d(read, split.search).size == 0
        assert np.isin(read, split.retrain_train).all()
        assert res.forbidden_reads == 0


# ------------------------------------------------------------------ 5

def test_criterion_5_analytics(tmp_path):
    with criterion(5, "analytics golden files", 10):
        ranking = read_rankings_tsv(FIXTURES / "paper_rankings.tsv")
        wr = win_rate_matrix(ranking)
        i, j = ranking.methods.index("drnas"), ranking.methods.index("darts")
        assert wr[i, j] == 8 / 9
        rho = spearman(ranking.row("wide_all_skip"), ranking.row("deep_no_skip"))
        assert rho.value < 0
        _, cd = mean_rank_cd(ranking, 0.05)
        assert abs(cd - 2.949 * math.sqrt(56 / 54)) <= 1e-6

        assert run_cli(["report", "--results", str(tmp_path), "--rankings",
                        str(FIXTURES / "paper_rankings.tsv")]) == 0
        got = _read_matrix(tmp_path / "reports" / "correlation_mean.tsv")
        want = _read_matrix(FIXTURES / "golden" / "correlation_mean.tsv")
        assert got[0] == want[0]
        assert np.abs(got[1] - want[1]).max() <= 1e-9


def _read_matrix(path: Path):
    lines = path.read_text().splitlines()
    rows = [ln.split("\t") for ln in lines[1:]]
    return [r[0] for r in rows], np.array([[float(v) for v in r[1:]] for r in rows])


# ------------------------------------------------------------------ 6

@pytest.mark.slow
def test_criterion_6_desk_benchsuite(tmp_path):
    methods = ("darts", "gdas", "drnas")
    with criterion(6, "miniature end-to-end", 15 * 60):
        argv = ["benchsuite", "--desk", "--data", "synth:n=400,classes=2,size=8,seed=0", "--out", str(tmp_path)]
        for m in methods:
            argv += ["--method", m]
        assert run_cli(argv) == 0
        benches = enumerate_benchmarks()
        for b in benches:
            for m in methods:
                g = Genotype.load(tmp_path / b.id / m / "selected_genotype.txt")
                assert set(g.cell_types) == set(build_supernet(b.variant, make_operation_set(b.opset), 2,
                                                               channel_override=2).arch.cell_types)
                assert all(len(g.cells[ct]) == 2 * b.variant.intermediate_nodes for ct in g.cell_types)
                ops_allowed = set(make_operation_set(b.opset).names) - {"zero"}
                assert all(e.op in ops_allowed for ct in g.cell_types for e in g.cells[ct])
        results = ledger_results(tmp_path / "results.tsv")
        assert len(results) == len(benches) * len(methods) * 2
        low = [(r.method, r.benchmark, r.hp_id, r.test_accuracy) for r in results if not r.test_accuracy > 60.0]
        assert not low, low


# ------------------------------------------------------------------ 7

def _small(method):
    return preset(method).desk(epochs=3, steps_per_epoch=3, channels=4, batch_size=4)


@pytest.mark.parametrize("method", ["darts", "gdas", "drnas", "smoothdarts", "oles"])
def test_criterion_7_determinism(method, tmp_path):
    with criterion(7, "determinism", 600):
        ds = synth_dataset(64, 2, 8, seed=0)
        split = split_dataset(ds.n_train, 0, ds.n_test)
        profile = _small(method)
        runs = []
        for name in ("a", "b"):
            train_supernet(profile, ds, split, 1, tmp_path / name, "wide", "regular")
            runs.append(tmp_path / name)
        train_supernet(profile, ds, split, 1, tmp_path / "c", "wide", "regular", stop_after_epoch=1)
        assert (tmp_path / "c" / "checkpoint.bin").exists()
        train_supernet(profile, ds, split, 1, tmp_path / "c", "wide", "regular",
                       resume_from=tmp_path / "c" / "checkpoint.bin")
        runs.append(tmp_path / "c")
        files = ["genotype.txt", "metrics.log"] + [f"genotype_epoch{e}.txt" for e in range(3)]
        for f in files:
            ref = (runs[0] / f).read_bytes()
            for other in runs[1:]:
                assert (other / f).read_bytes() == ref, f"{method}: {other.name}/{f} differs"


# ------------------------------------------------------------------ 8

def test_criterion_8_presets():
    with criterion(8, "method presets", 60):
        for m in METHODS:
            assert serialize_profile(preset(m)) == (FIXTURES / "golden" / "presets" / f"{m}.txt").read_text()
        epochs = {m: preset(m).epochs for m in METHODS}
        assert epochs == {"darts": 100, "pcdarts": 100, "fairdarts": 100, "smoothdarts": 100, "oles": 100,
                          "drnas": 100, "gdas": 300}
        for m in ("pcdarts", "drnas"):
            p = preset(m)
            assert p.partial_connection and p.K == 4 and p.warm_epochs == 15
        assert preset("fairdarts").fairdarts_penalty and preset("fairdarts").fairdarts_lambda == 10.0
        assert preset("drnas").drnas_penalty and preset("drnas").drnas_lambda == 1.0
        batches = {"darts": (64, 96, 96), "drnas": (64, 96, 96), "gdas": (320, 480, 480)}
        for m in METHODS:
            want = batches.get(m, batches["darts"])
            p = preset(m)
            assert (p.batch_size("deep"), p.batch_size("wide"), p.batch_size("single_cell")) == want


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v", "-rA"]))
