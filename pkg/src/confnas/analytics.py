"""Rank statistics over method x benchmark results, plus TSV/SVG report output."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .expdir import atomic_write_text

# Nemenyi critical values q_alpha(k) = studentized range quantile / sqrt(2), k = 2..10
NEMENYI_Q = {
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164),
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920),
}
GROUPINGS = ("none", "opset", "variant")
VARIANT_IDS = ("single_cell", "deep", "wide")
OPSET_IDS = ("all_skip", "no_skip", "regular")


class AnalyticsError(ValueError):
    pass


@dataclass
class RankTable:
    """scores[b, m] is the accuracy of method m on benchmark b (higher is better)."""

    methods: list
    benchmarks: list
    scores: np.ndarray
    mode: str = "mean"

    def __post_init__(self):
        self.methods, self.benchmarks = list(self.methods), list(self.benchmarks)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.benchmarks), len(self.methods)):
            raise AnalyticsError(f"score matrix shape {self.scores.shape} does not match "
                                 f"{len(self.benchmarks)} benchmarks x {len(self.methods)} methods")

    @classmethod
    def from_nested(cls, scores: Mapping[str, Mapping[str, float]], mode: str = "mean",
                    methods: Optional[Sequence[str]] = None, benchmarks: Optional[Sequence[str]] = None):
        """Build from scores[method][benchmark]; any hole is rejected."""
        methods = list(methods) if methods is not None else sorted(scores)
        benchmarks = list(benchmarks) if benchmarks is not None else sorted({b for m in scores.values() for b in m})
        mat = np.full((len(benchmarks), len(methods)), np.nan)
        for j, m in enumerate(methods):
            for i, b in enumerate(benchmarks):
                v = scores.get(m, {}).get(b)
                if v is not None:
                    mat[i, j] = v
        holes = [(methods[j], benchmarks[i]) for i, j in zip(*np.nonzero(np.isnan(mat)))]
        if holes:
            raise AnalyticsError(f"rank table has {len(holes)} holes, e.g. {holes[:3]}")
        return cls(methods, benchmarks, mat, mode)


@dataclass
class Ranking:
    """ranks[b, m]: rank of method m on benchmark b (1 = best, ties averaged)."""

    methods: list
    benchmarks: list
    ranks: np.ndarray

    def row(self, benchmark: str) -> np.ndarray:
        return self.ranks[self.benchmarks.index(benchmark)]

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {b: dict(zip(self.methods, map(float, r))) for b, r in zip(self.benchmarks, self.ranks)}


def rank_scores(scores: Sequence[float]) -> np.ndarray:
    """Descending ranks with average-rank ties."""
    return stats.rankdata(-np.asarray(scores, dtype=np.float64), method="average")


def rank_methods(table: RankTable) -> Ranking:
    if np.isnan(table.scores).any():
        raise AnalyticsError("rank table has holes")
    ranks = np.vstack([rank_scores(row) for row in table.scores]) if len(table.benchmarks) else np.zeros((0, 0))
    return Ranking(table.methods, table.benchmarks, ranks)


@dataclass
class Correlation:
    value: float
    constant: bool = False


def spearman(rank_a, rank_b) -> Correlation:
    """Pearson correlation of two rank vectors; a constant vector gives 0 with `constant` set."""
    a = np.asarray(rank_a, dtype=np.float64)
    b = np.asarray(rank_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise AnalyticsError(f"rank vectors differ in shape ({a.shape} vs {b.shape})")
    if a.size < 2:
        raise AnalyticsError("need at least 2 methods to correlate")
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if na == 0.0 or nb == 0.0:
        return Correlation(0.0, True)
    return Correlation(float(np.clip(da @ db / (na * nb), -1.0, 1.0)))


def kendall(rank_a, rank_b) -> Correlation:
    """Kendall tau-b; a constant vector gives 0 with `constant` set."""
    a = np.asarray(rank_a, dtype=np.float64)
    b = np.asarray(rank_b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise AnalyticsError("kendall: need two equally long rank vectors of length >= 2")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return Correlation(0.0, True)
    return Correlation(float(stats.kendalltau(a, b, variant="b").statistic))


def correlation_matrix(ranking: Ranking, method: str = "spearman") -> np.ndarray:
    """Benchmark x benchmark correlation of method rankings."""
    fn = {"spearman": spearman, "kendall": kendall}.get(method)
    if fn is None:
        raise AnalyticsError(f"unknown correlation {method!r}; expected spearman or kendall")
    n = len(ranking.benchmarks)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = fn(ranking.ranks[i], ranking.ranks[j]).value
    return out


def win_rate_matrix(ranking: Ranking) -> np.ndarray:
    """w[i, j] = (benchmarks where i ranks better than j + half the ties) / benchmarks."""
    n_bench = len(ranking.benchmarks)
    if n_bench < 2:
        raise AnalyticsError("win rates need at least 2 benchmarks")
    r = ranking.ranks
    wins = (r[:, :, None] < r[:, None, :]).sum(axis=0)
    ties = (r[:, :, None] == r[:, None, :]).sum(axis=0)
    # w + w.T is exactly 1 because integer counts are combined before the one division
    return (2 * wins + ties) / (2.0 * n_bench)


def nemenyi_q(k: int, alpha: float = 0.05) -> float:
    table = NEMENYI_Q.get(alpha)
    if table is None:
        raise AnalyticsError(f"no Nemenyi table for alpha={alpha}; supported: {sorted(NEMENYI_Q)}")
    if not 2 <= k <= 1 + len(table):
        raise AnalyticsError(f"Nemenyi table covers 2..{1 + len(table)} methods, got {k}")
    return table[k - 2]


def mean_rank_cd(ranking: Ranking, alpha: float = 0.05) -> tuple[dict[str, float], float]:
    """Mean rank per method and the Nemenyi critical difference."""
    m, n = len(ranking.methods), len(ranking.benchmarks)
    if m < 2:
        raise AnalyticsError("critical difference needs at least 2 methods")
    if n < 2:
        raise AnalyticsError("critical difference needs at least 2 benchmarks")
    cd = nemenyi_q(m, alpha) * math.sqrt(m * (m + 1) / (6.0 * n))
    means = ranking.ranks.mean(axis=0)
    return dict(zip(ranking.methods, map(float, means))), cd


def parse_benchmark_id(bench_id: str) -> tuple[str, str]:
    for v in VARIANT_IDS:
        if bench_id.startswith(v + "_") and bench_id[len(v) + 1:] in OPSET_IDS:
            return v, bench_id[len(v) + 1:]
    raise AnalyticsError(f"cannot parse benchmark id {bench_id!r} into (variant, op set)")


def aggregate_rankings(data, groupby: str = "none") -> Ranking:
    """Rank methods within groups of benchmarks.

    With a RankTable, methods are ranked by their mean score over the group.
    With a Ranking (no scores available) they are ranked by mean rank.
    """
    if groupby not in GROUPINGS:
        raise AnalyticsError(f"unknown grouping {groupby!r}; expected one of {GROUPINGS}")
    if isinstance(data, RankTable):
        values, higher_better = data.scores, True
    else:
        values, higher_better = data.ranks, False
    keys = [parse_benchmark_id(b) for b in data.benchmarks]
    if groupby == "none":
        groups = {b: [i] for i, b in enumerate(data.benchmarks)}
    else:
        pos = 1 if groupby == "opset" else 0
        groups = {}
        for i, k in enumerate(keys):
            groups.setdefault(k[pos], []).append(i)
    names = sorted(groups)
    ranks = []
    for g in names:
        mean = values[groups[g]].mean(axis=0)
        ranks.append(rank_scores(mean if higher_better else -mean))
    return Ranking(data.methods, names, np.vstack(ranks))


# ---------------------------------------------------------------- reporting

def _tsv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    def fmt(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
    return "\n".join(["\t".join(header)] + ["\t".join(fmt(v) for v in r) for r in rows]) + "\n"


def _color(v: float, lo: float, hi: float) -> str:
    t = 0.5 if hi == lo else (v - lo) / (hi - lo)
    r, b = int(255 * t), int(255 * (1 - t))
    return f"rgb({r},{min(r, b) + 60},{b})"


def heatmap_svg(matrix: np.ndarray, labels: Sequence[str], title: str, lo: float = -1.0, hi: float = 1.0) -> str:
    n = len(labels)
    cell, left, top = 36, 120, 40
    w, h = left + n * cell + 10, top + n * cell + 110
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" '
             f'font-size="10">', f'<text x="{left}" y="20" font-size="13">{title}</text>']
    for i in range(n):
        parts.append(f'<text x="{left - 4}" y="{top + i * cell + cell / 2 + 3}" text-anchor="end">{labels[i]}</text>')
        parts.append(f'<text transform="translate({left + i * cell + cell / 2},{top + n * cell + 6}) rotate(60)">'
                     f'{labels[i]}</text>')
        for j in range(n):
            v = float(matrix[i, j])
            x, y = left + j * cell, top + i * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(v, lo, hi)}"/>')
            parts.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 3}" text-anchor="middle">{v:.2f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cd_svg(mean_ranks: Mapping[str, float], cd: float, title: str) -> str:
    """A critical-difference axis: methods placed at their mean rank, CD shown as a bar."""
    m = len(mean_ranks)
    width, left, right, axis_y = 560, 60, 500, 60
    scale = (right - left) / max(m - 1, 1)

    def x(r):
        return left + (r - 1) * scale
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{100 + 18 * m}" '
             f'font-family="sans-serif" font-size="11">', f'<text x="{left}" y="16" font-size="13">{title}</text>',
             f'<line x1="{left}" y1="{axis_y}" x2="{right}" y2="{axis_y}" stroke="black"/>']
    for k in range(1, m + 1):
        parts.append(f'<line x1="{x(k)}" y1="{axis_y - 5}" x2="{x(k)}" y2="{axis_y}" stroke="black"/>')
        parts.append(f'<text x="{x(k)}" y="{axis_y - 8}" text-anchor="middle">{k}</text>')
    parts.append(f'<line x1="{x(1)}" y1="30" x2="{x(1) + cd * scale}" y2="30" stroke="red" stroke-width="2"/>')
    parts.append(f'<text x="{x(1) + cd * scale + 4}" y="34">CD={cd:.3f}</text>')
    for i, (name, r) in enumerate(sorted(mean_ranks.items(), key=lambda kv: kv[1])):
        y = axis_y + 20 + 18 * i
        parts.append(f'<line x1="{x(r)}" y1="{axis_y}" x2="{x(r)}" y2="{y}" stroke="gray"/>')
        parts.append(f'<text x="{x(r) + 4}" y="{y + 4}">{name} ({r:.2f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(out_dir, ranking: Ranking, mode: str, table: Optional[RankTable] = None, alpha: float = 0.05,
                 correlation: str = "spearman") -> list[Path]:
    """Write rankings, correlation, win-rate and CD files (TSV plus SVG) for one mode."""
    out = Path(out_dir)
    tag = mode.replace(":", "_")
    written = []

    def put(name, text):
        atomic_write_text(out / name, text)
        written.append(out / name)

    put("rankings.tsv", _tsv(["benchmark"] + ranking.methods,
                             [[b] + list(r) for b, r in zip(ranking.benchmarks, ranking.ranks)]))
    if table is not None:
        put(f"scores_{tag}.tsv", _tsv(["benchmark"] + table.methods,
                                     [[b] + list(r) for b, r in zip(table.benchmarks, table.scores)]))
    if len(ranking.benchmarks) >= 2:
        corr = correlation_matrix(ranking, correlation)
        put(f"correlation_{tag}.tsv", _tsv(["benchmark"] + ranking.benchmarks,
                                          [[b] + list(r) for b, r in zip(ranking.benchmarks, corr)]))
        put(f"correlation_{tag}.svg", heatmap_svg(corr, ranking.benchmarks, f"{correlation} correlation ({mode})"))
        wr = win_rate_matrix(ranking)
        put(f"winrate_{tag}.tsv", _tsv(["method"] + ranking.methods,
                                      [[m] + list(r) for m, r in zip(ranking.methods, wr)]))
        put(f"winrate_{tag}.svg", heatmap_svg(wr, ranking.methods, f"win rate ({mode})", 0.0, 1.0))
        if len(ranking.methods) >= 2:
            means, cd = mean_rank_cd(ranking, alpha)
            put(f"cd_{tag}.tsv", _tsv(["method", "mean_rank", "critical_difference"],
                                     [[m, r, cd] for m, r in sorted(means.items(), key=lambda kv: kv[1])]))
            put(f"cd_{tag}.svg", cd_svg(means, cd, f"mean rank ({mode}), alpha={alpha}"))
    return written


def read_rankings_tsv(path) -> Ranking:
    """Load a `benchmark<TAB>method...` rank table (the format `write_report` emits)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise AnalyticsError(f"{path}: empty rankings file")
    header = lines[0].split("\t")
    methods = header[1:]
    benchmarks, rows = [], []
    for k, line in enumerate(lines[1:], start=2):
        vals = line.split("\t")
        if len(vals) != len(header):
            raise AnalyticsError(f"{path}:{k}: expected {len(header)} columns, found {len(vals)}")
        benchmarks.append(vals[0])
        try:
            rows.append([float(v) for v in vals[1:]])
        except ValueError:
            raise AnalyticsError(f"{path}:{k}: non-numeric rank") from None
    return Ranking(methods, benchmarks, np.asarray(rows))


def table_from_results(results, mode: str = "mean") -> RankTable:
    """Scores per (method, benchmark) from EvalResults: best, mean, or hp:<id>."""
    acc: dict[str, dict[str, list]] = {}
    for r in results:
        acc.setdefault(r.method, {}).setdefault(r.benchmark, []).append((r.hp_id, r.test_accuracy))
    scores: dict[str, dict[str, float]] = {}
    for method, benches in acc.items():
        for bench, vals in benches.items():
            if mode == "best":
                v = max(a for _, a in vals)
            elif mode == "mean":
                v = float(np.mean([a for _, a in vals]))
            elif mode.startswith("hp:"):
                hit = [a for h, a in vals if h == mode[3:]]
                if not hit:
                    continue
                v = hit[0]
            else:
                raise AnalyticsError(f"unknown report mode {mode!r}; expected best, mean or hp:<id>")
            scores.setdefault(method, {})[bench] = v
    return RankTable.from_nested(scores, mode, sorted(acc), sorted({r.benchmark for r in results}))


__all__ = ["AnalyticsError", "Correlation", "NEMENYI_Q", "RankTable", "Ranking", "aggregate_rankings",
           "cd_svg", "correlation_matrix", "heatmap_svg", "kendall", "mean_rank_cd", "nemenyi_q",
           "parse_benchmark_id", "rank_methods", "rank_scores", "read_rankings_tsv", "spearman",
           "table_from_results", "win_rate_matrix", "write_report"]
