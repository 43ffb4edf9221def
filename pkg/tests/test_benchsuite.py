import numpy as np
import pytest

from confnas.benchsuite import (DeskOverrides, EvalResult, RetrainOverrides, enumerate_benchmarks, get_benchmark,
                                get_hp, hp_grid, ledger_results, planned_trials, read_ledger, retrain,
                                run_benchsuite, select_architecture, select_trial, split_dataset, summarize)
from confnas.data import AccessViolation
from confnas.searchspace.genotype import Genotype, GenotypeEdge
from confnas.trainer import TrialResult, preset

G = Genotype({"normal": (GenotypeEdge(2, 0, "skip_connect"),)})


def test_benchmarks_are_sorted_and_complete():
    ids = [b.id for b in enumerate_benchmarks()]
    assert ids == sorted(ids) and len(ids) == 9
    b = get_benchmark("single_cell_no_skip")
    assert (b.edges, b.num_ops) == (44, 7)
    with pytest.raises(ValueError):
        get_benchmark("darts_regular")


@pytest.mark.parametrize("n", [4, 7, 401, 1000])
def test_split_partitions(n):
    s = split_dataset(n, 3)
    parts = [s.search_train, s.search_val, s.retrain_train]
    assert s.sizes() == (n // 4, n // 4, n - 2 * (n // 4))
    assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(n))
    again = split_dataset(n, 3)
    assert all(np.array_equal(a, b) for a, b in zip(parts, [again.search_train, again.search_val,
                                                             again.retrain_train]))


def test_split_depends_on_seed_and_rejects_tiny():
    assert not np.array_equal(split_dataset(100, 0).search_train, split_dataset(100, 1).search_train)
    with pytest.raises(ValueError):
        split_dataset(3, 0)


def _trial(seed, final, best):
    g = Genotype({"normal": (GenotypeEdge(2, seed % 2, "skip_connect"),)})
    return TrialResult(g, [g], [1.0, 1.0], [50.0, 50.0], [best, final], [50.0, 50.0], seed)


def test_selection_rules():
    trials = [_trial(2, 0.5, 0.1), _trial(0, 0.5, 0.4), _trial(1, 0.7, 0.2)]
    assert select_trial(trials).seed == 0  # tie on final loss goes to the lowest seed
    assert select_trial(trials, "best_val_loss").seed == 2
    assert select_architecture(trials) == trials[1].genotype
    with pytest.raises(ValueError):
        select_trial([])
    with pytest.raises(ValueError):
        select_trial(trials, "val_acc")


def test_hp_grid():
    grid = hp_grid()
    assert [h.id for h in grid] == [f"HP{i}" for i in range(1, 10)]
    assert (grid[4].learning_rate, grid[4].weight_decay) == (0.1, 3e-4)
    assert get_hp("HP9").learning_rate == 0.01
    with pytest.raises(ValueError):
        get_hp("HP10")


def test_eval_result_range_and_ledger_round_trip(tmp_path):
    with pytest.raises(ValueError):
        EvalResult("b", "m", G, "HP1", 0, 101.0, 3)
    G.save(tmp_path / "g.txt")
    r = EvalResult("wide_regular", "darts", G, "HP2", 0, 87.5, 3, wall_seconds=1.25,
                   genotype_path=str(tmp_path / "g.txt"))
    (tmp_path / "ledger.tsv").write_text(r.ledger_line() + "\n")
    row = read_ledger(tmp_path / "ledger.tsv")[0]
    assert row["test_accuracy"] == "87.5000" and row["hp_id"] == "HP2"
    back = ledger_results(tmp_path / "ledger.tsv")[0]
    assert back.genotype == G and back.test_accuracy == 87.5
    (tmp_path / "bad.tsv").write_text("a\tb\n")
    with pytest.raises(ValueError):
        read_ledger(tmp_path / "bad.tsv")


def test_summarize_population_std_and_partial():
    accs = {"HP1": 80.0, "HP2": 90.0, "HP3": 70.0}
    results = [EvalResult("wide_regular", "darts", G, h, 0, a, 3) for h, a in accs.items()]
    table, tally = summarize(results)
    s = table[("darts", "wide_regular")]
    assert s.mean == pytest.approx(80.0) and s.std == pytest.approx(np.sqrt(200 / 3))
    assert s.max == 90.0 and s.best_hp == "HP2" and tally["HP2"] == 1
    assert s.partial and s.missing[0] == "HP4"
    table, _ = summarize(results, ["HP1", "HP2", "HP3"])
    assert not table[("darts", "wide_regular")].partial


def test_planned_trials():
    b = enumerate_benchmarks()[:2]
    assert planned_trials(b, [0, 1]) == [(b[0].id, 0), (b[0].id, 1), (b[1].id, 0), (b[1].id, 1)]


def test_retrain_reads_only_retraining_split(tiny_data, tmp_path):
    split = split_dataset(tiny_data.n_train, 0, tiny_data.n_test)
    geno = Genotype({ct: tuple(GenotypeEdge(j + 2, s, "sep_conv_3x3") for j in range(8) for s in (0, 1))
                     for ct in ("reduce",)})
    ov = RetrainOverrides(epochs=1, batch_size=8, channels=2, augment=True, recalibrate_bn=True)
    res = retrain(geno, get_benchmark("single_cell_regular"), get_hp("HP1"), split, tiny_data, 0, ov, "darts",
                  tmp_path)
    assert res.forbidden_reads == 0 and 0 <= res.test_accuracy <= 100
    assert (tmp_path / "result.txt").is_file() and res.genotype_path.endswith("genotype.txt")
    # a split whose retraining part overlaps the search part is caught by the audit
    split.retrain_train = np.concatenate([split.retrain_train, split.search_val[:1]])
    with pytest.raises(AccessViolation):
        retrain(geno, get_benchmark("single_cell_regular"), get_hp("HP1"), split, tiny_data, 0, ov)


def test_run_benchsuite_reuses_finished_trials(tiny_data, tmp_path):
    desk = DeskOverrides(channels=2, search_epochs=1, steps_per_epoch=1, search_batch_size=4, retrain_epochs=1,
                         retrain_batch_size=8, num_hps=1)
    bench = [get_benchmark("wide_no_skip")]
    logs = []
    res = run_benchsuite({"darts": preset("darts")}, tiny_data, tmp_path, benchmarks=bench, seeds=(0, 1),
                         desk=desk, log=logs.append)
    assert len(res) == 1 and len(read_ledger(tmp_path / "results.tsv")) == 1
    assert (tmp_path / "wide_no_skip" / "darts" / "selected_genotype.txt").is_file()
    stamp = {p: p.stat().st_mtime_ns for p in tmp_path.rglob("metrics.log")}
    run_benchsuite({"darts": preset("darts")}, tiny_data, tmp_path, benchmarks=bench, seeds=(0, 1), desk=desk)
    assert {p: p.stat().st_mtime_ns for p in tmp_path.rglob("metrics.log")} == stamp
    assert len(read_ledger(tmp_path / "results.tsv")) == 2
    assert any("selected seed" in line for line in logs)
