import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from confnas.analytics import (AnalyticsError, RankTable, Ranking, aggregate_rankings, correlation_matrix,
                               kendall, mean_rank_cd, nemenyi_q, parse_benchmark_id, rank_methods, rank_scores,
                               read_rankings_tsv, spearman, table_from_results, win_rate_matrix, write_report)
from confnas.benchsuite import EvalResult

from .conftest import FIXTURES


def _accuracy_table(column="mean_accuracy"):
    scores = {}
    with open(FIXTURES / "benchmark_accuracy.tsv") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            scores.setdefault(row["method"], {})[row["benchmark"]] = float(row[column])
    return RankTable.from_nested(scores)


def test_mean_accuracy_reproduces_published_benchmark_ranking():
    published = read_rankings_tsv(FIXTURES / "paper_rankings.tsv")
    ranking = rank_methods(_accuracy_table())
    assert ranking.methods == published.methods and ranking.benchmarks == published.benchmarks
    np.testing.assert_array_equal(ranking.ranks, published.ranks)


def test_grouped_rankings_reproduce_published_tables():
    table = _accuracy_table()
    by_opset = aggregate_rankings(table, "opset")
    assert by_opset.benchmarks == ["all_skip", "no_skip", "regular"]
    np.testing.assert_array_equal(by_opset.ranks, [[6, 3, 5, 2, 4, 1, 7], [7, 1, 3, 2, 6, 4, 5],
                                                   [7, 1, 4, 2, 5, 3, 6]])
    by_variant = aggregate_rankings(table, "variant")
    assert by_variant.benchmarks == ["deep", "single_cell", "wide"]
    np.testing.assert_array_equal(by_variant.ranks, [[2, 1, 5, 4, 3, 6, 7], [7, 2, 4, 3, 6, 1, 5],
                                                     [7, 4, 6, 1, 3, 2, 5]])
    assert aggregate_rankings(table, "none").ranks.shape == (9, 7)
    with pytest.raises(AnalyticsError):
        aggregate_rankings(table, "method")


def test_aggregate_from_ranks_uses_mean_rank():
    r = Ranking(["a", "b"], ["deep_regular", "wide_regular"], np.array([[1.0, 2.0], [1.0, 2.0]]))
    np.testing.assert_array_equal(aggregate_rankings(r, "opset").ranks, [[1.0, 2.0]])


def test_parse_benchmark_id():
    assert parse_benchmark_id("single_cell_no_skip") == ("single_cell", "no_skip")
    with pytest.raises(AnalyticsError):
        parse_benchmark_id("darts_regular")


def test_rank_scores_ties_average():
    np.testing.assert_array_equal(rank_scores([90, 95, 90, 80]), [2.5, 1, 2.5, 4])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-400, 400), min_size=2, max_size=8))
def test_ranking_invariant_under_increasing_transform(scores):
    # quarter-point grid: distinct scores stay distinct after the float transform
    a = np.array(scores) / 4.0
    np.testing.assert_array_equal(rank_scores(a), rank_scores(np.exp(a / 50) * 3 + 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=3, max_size=9))
def test_spearman_matches_scipy(pairs):
    a = stats.rankdata([p[0] for p in pairs])
    b = stats.rankdata([p[1] for p in pairs])
    got = spearman(a, b)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        assert got.constant and got.value == 0.0
    else:
        assert got.value == pytest.approx(stats.spearmanr(a, b).statistic, abs=1e-12)
    assert spearman(a, a).value == pytest.approx(1.0) or np.ptp(a) == 0


def test_spearman_and_kendall_errors():
    with pytest.raises(AnalyticsError):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(AnalyticsError):
        spearman([1], [1])
    with pytest.raises(AnalyticsError):
        kendall([1], [1])
    assert kendall([1, 2, 3], [3, 2, 1]).value == pytest.approx(-1.0)
    assert kendall([1, 1, 1], [1, 2, 3]).constant


def test_correlation_matrix_is_symmetric():
    r = read_rankings_tsv(FIXTURES / "paper_rankings.tsv")
    for method in ("spearman", "kendall"):
        c = correlation_matrix(r, method)
        np.testing.assert_array_equal(c, c.T)
        np.testing.assert_array_equal(np.diag(c), 1.0)
    with pytest.raises(AnalyticsError):
        correlation_matrix(r, "pearson")


def test_win_rate_with_ties_is_complementary():
    r = Ranking(["a", "b", "c"], ["x", "y"], np.array([[1.0, 2.5, 2.5], [2.0, 1.0, 3.0]]))
    w = win_rate_matrix(r)
    np.testing.assert_array_equal(w + w.T, np.ones((3, 3)))
    assert w[1, 2] == 0.75 and w[0, 1] == 0.5
    with pytest.raises(AnalyticsError):
        win_rate_matrix(Ranking(["a", "b"], ["x"], np.array([[1.0, 2.0]])))


def test_critical_difference():
    r = Ranking(list("abc"), ["x", "y"], np.array([[2.0, 2.0, 2.0], [2.0, 2.0, 2.0]]))
    means, cd = mean_rank_cd(r)
    assert set(means.values()) == {2.0}
    assert cd == pytest.approx(2.343 * np.sqrt(3 * 4 / 12))
    with pytest.raises(AnalyticsError):
        mean_rank_cd(Ranking(["a"], ["x", "y"], np.ones((2, 1))))
    with pytest.raises(AnalyticsError):
        nemenyi_q(11)
    with pytest.raises(AnalyticsError):
        nemenyi_q(3, alpha=0.01)


def test_rank_table_rejects_holes_and_bad_shapes():
    with pytest.raises(AnalyticsError):
        RankTable.from_nested({"a": {"x": 1.0}, "b": {"y": 2.0}})
    with pytest.raises(AnalyticsError):
        RankTable(["a"], ["x"], np.zeros((2, 2)))


def _results():
    out = []
    for m, accs in {"a": (90.0, 70.0), "b": (80.0, 85.0)}.items():
        for bench in ("deep_regular", "wide_regular"):
            for hp, acc in zip(("HP1", "HP2"), accs):
                out.append(EvalResult(bench, m, None, hp, 0, acc + (bench == "wide_regular"), 3))
    return out


@pytest.mark.parametrize("mode,first", [("best", "a"), ("mean", "b"), ("hp:HP1", "a"), ("hp:HP2", "b")])
def test_table_from_results_modes(mode, first):
    ranking = rank_methods(table_from_results(_results(), mode))
    assert ranking.methods[int(np.argmin(ranking.ranks[0]))] == first


def test_table_from_results_errors():
    with pytest.raises(AnalyticsError):
        table_from_results(_results(), "median")
    with pytest.raises(AnalyticsError):
        table_from_results(_results(), "hp:HP7")


def test_write_report_files_round_trip(tmp_path):
    table = _accuracy_table()
    ranking = rank_methods(table)
    written = write_report(tmp_path, ranking, "hp:HP1", table)
    names = sorted(p.name for p in written)
    assert names == sorted(["rankings.tsv", "scores_hp_HP1.tsv", "correlation_hp_HP1.tsv", "correlation_hp_HP1.svg",
                            "winrate_hp_HP1.tsv", "winrate_hp_HP1.svg", "cd_hp_HP1.tsv", "cd_hp_HP1.svg"])
    np.testing.assert_array_equal(read_rankings_tsv(tmp_path / "rankings.tsv").ranks, ranking.ranks)
    assert (tmp_path / "cd_hp_HP1.svg").read_text().startswith("<svg")


def test_read_rankings_errors(tmp_path):
    (tmp_path / "e.tsv").write_text("")
    (tmp_path / "c.tsv").write_text("benchmark\ta\tb\nx\t1\n")
    (tmp_path / "n.tsv").write_text("benchmark\ta\nx\tfirst\n")
    for name in ("e.tsv", "c.tsv", "n.tsv"):
        with pytest.raises(AnalyticsError):
            read_rankings_tsv(tmp_path / name)
