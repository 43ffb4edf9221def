"""Command-line entry point: search, retrain, evaluate, report, benchsuite.

Exit codes: 0 success, 1 usage or validation error, 2 aborted trial.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import analytics
from .analytics import AnalyticsError
from .benchsuite import (DeskOverrides, RetrainOverrides, enumerate_benchmarks, get_benchmark, get_hp,
                         ledger_results, planned_trials, retrain, run_benchsuite, split_dataset, summarize)
from .data import AccessViolation, DataError, resolve_dataset
from .expdir import ExperimentDir, append_line_locked, atomic_write_text
from .searchspace.genotype import Genotype, GenotypeError
from .trainer import CheckpointError, ProfileError, TrialAborted, parse_profile, preset, train_supernet
from .trainer.profile import METHODS as PRESET_METHODS

EXIT_OK, EXIT_INVALID, EXIT_ABORTED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _threads() -> int:
    raw = os.environ.get("CONFOPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"CONFOPT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _desk_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="override search epochs")
    p.add_argument("--steps-per-epoch", type=int, help="cap steps per search epoch")
    p.add_argument("--channels", type=int, help="override initial channels (desk scale)")
    p.add_argument("--batch-size", type=int, help="override the search batch size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="confnas", description="Configurable one-shot architecture search.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("search", help="run one search trial")
    s.add_argument("--profile", required=True, help="profile file (key=value lines)")
    s.add_argument("--benchmark", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data", help="CIFAR-10 binary directory or synth:n=..,classes=..,size=..,seed=..")
    s.add_argument("--out", required=True)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--resume", action="store_true", help="continue from the trial's checkpoint")
    _desk_args(s)

    r = sub.add_parser("retrain", help="retrain a genotype from scratch and test it")
    r.add_argument("--genotype", required=True)
    r.add_argument("--benchmark", required=True)
    r.add_argument("--hp", required=True, help="HP1..HP9")
    r.add_argument("--out", required=True)
    r.add_argument("--data")
    r.add_argument("--method", default="custom", help="method label for the results ledger")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--split-seed", type=int, default=0)
    r.add_argument("--epochs", type=int, default=300)
    r.add_argument("--batch-size", type=int, default=512)
    r.add_argument("--channels", type=int)
    r.add_argument("--no-augment", action="store_true")

    e = sub.add_parser("evaluate", help="summarise the results ledger")
    e.add_argument("--results", required=True)

    p = sub.add_parser("report", help="rank statistics and plots")
    p.add_argument("--results", required=True)
    p.add_argument("--mode", default="mean", help="best, mean or hp:<id>")
    p.add_argument("--rankings", help="rank table TSV to analyse instead of the ledger")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--correlation", choices=("spearman", "kendall"), default="spearman")
    p.add_argument("--groupby", choices=analytics.GROUPINGS, default="none")

    b = sub.add_parser("benchsuite", help="search, select and retrain over the benchmarks")
    b.add_argument("--method", action="append", choices=PRESET_METHODS, help="repeatable")
    b.add_argument("--out")
    b.add_argument("--data")
    b.add_argument("--profile", help="profile file used instead of the preset (single method)")
    b.add_argument("--benchmark", action="append", help="restrict to these benchmarks (repeatable)")
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--split-seed", type=int, default=0)
    b.add_argument("--criterion", choices=("final_val_loss", "best_val_loss"), default="final_val_loss")
    b.add_argument("--dry-run", action="store_true", help="list the search trials and exit")
    b.add_argument("--desk", action="store_true", help="desk-scale overrides (see the --desk-* flags)")
    d = DeskOverrides()
    b.add_argument("--desk-channels", type=int, default=d.channels)
    b.add_argument("--desk-search-epochs", type=int, default=d.search_epochs)
    b.add_argument("--desk-steps", type=int, default=d.steps_per_epoch)
    b.add_argument("--desk-search-batch", type=int, default=d.search_batch_size)
    b.add_argument("--desk-retrain-epochs", type=int, default=d.retrain_epochs)
    b.add_argument("--desk-retrain-batch", type=int, default=d.retrain_batch_size)
    b.add_argument("--desk-hps", type=int, default=d.num_hps)
    return parser


def _apply_desk(profile, args):
    changes = {}
    if args.epochs is not None:
        changes["epochs"] = args.epochs
        changes["warm_epochs"] = min(profile.warm_epochs, max(args.epochs - 1, 0))
    if args.steps_per_epoch is not None:
        changes["steps_per_epoch"] = args.steps_per_epoch
    if args.channels is not None:
        changes["channels"] = args.channels
    if args.batch_size is not None:
        changes["batch_size"] = args.batch_size
    if not changes:
        return profile
    out = profile.replace(**changes)
    out.validate()
    return out


def cmd_search(args) -> int:
    profile = _apply_desk(parse_profile(args.profile), args)
    bench = get_benchmark(args.benchmark)
    dataset = resolve_dataset(args.data)
    split = split_dataset(dataset.n_train, args.split_seed, dataset.n_test)
    tdir = ExperimentDir(args.out).trial(bench.id, profile.method, args.seed)
    resume = tdir / "checkpoint.bin" if args.resume and (tdir / "checkpoint.bin").exists() else None
    result = train_supernet(profile, dataset, split, args.seed, tdir, bench.variant.name, bench.opset,
                            resume_from=resume)
    print(f"final_val_loss={result.final_val_loss!r}")
    print(f"genotype={tdir / 'genotype.txt'}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    bench = get_benchmark(args.benchmark)
    hp = get_hp(args.hp)
    genotype = Genotype.load(args.genotype)
    dataset = resolve_dataset(args.data)
    split = split_dataset(dataset.n_train, args.split_seed, dataset.n_test)
    ov = RetrainOverrides(args.epochs, args.batch_size, args.channels, not args.no_augment)
    exp = ExperimentDir(args.out)
    res = retrain(genotype, bench, hp, split, dataset, args.seed, ov, args.method,
                  exp.retrain(bench.id, args.method, hp.id, args.seed))
    append_line_locked(exp.ledger, res.ledger_line())
    print(f"test_accuracy={res.test_accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    exp = ExperimentDir(args.results)
    if not exp.ledger.exists():
        raise DataError(f"no results ledger at {exp.ledger}")
    table, tally = summarize(ledger_results(exp.ledger))
    lines = ["method\tbenchmark\tmean\tstd\tmax\tcount\tbest_hp\tmissing"]
    for s in table.values():
        lines.append(f"{s.method}\t{s.benchmark}\t{s.mean:.4f}\t{s.std:.4f}\t{s.max:.4f}\t{s.count}\t{s.best_hp}\t"
                     f"{','.join(s.missing)}")
    text = "\n".join(lines) + "\n"
    atomic_write_text(exp.reports / "summary.tsv", text)
    atomic_write_text(exp.reports / "best_hp_tally.tsv",
                      "hp_id\tcount\n" + "".join(f"{h}\t{n}\n" for h, n in sorted(tally.items())))
    sys.stdout.write(text)
    print("best-HP tally: " + ", ".join(f"{h}={n}" for h, n in sorted(tally.items())))
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.results)
    exp = ExperimentDir(root)
    table = None
    rankings = args.rankings
    if rankings is None and not exp.ledger.exists() and (root / "rankings.tsv").exists():
        rankings = root / "rankings.tsv"
    if rankings is not None:
        ranking = analytics.read_rankings_tsv(rankings)
    else:
        if not exp.ledger.exists():
            raise DataError(f"no results ledger at {exp.ledger} and no --rankings given")
        table = analytics.table_from_results(ledger_results(exp.ledger), args.mode)
        ranking = analytics.rank_methods(table)
    if args.groupby != "none":
        ranking = analytics.aggregate_rankings(table if table is not None else ranking, args.groupby)
    written = analytics.write_report(exp.reports, ranking, args.mode, table, args.alpha, args.correlation)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_benchsuite(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    benches = [get_benchmark(b) for b in args.benchmark] if args.benchmark else enumerate_benchmarks()
    methods = args.method or []
    if args.dry_run:
        for method in methods or ["<method>"]:
            for bench_id, seed in planned_trials(benches, seeds):
                print(f"search {method} {bench_id} seed={seed}")
        return EXIT_OK
    if not methods:
        raise UsageError("benchsuite: at least one --method is required")
    if not args.out:
        raise UsageError("benchsuite: --out is required")
    if args.profile:
        if len(methods) != 1:
            raise UsageError("benchsuite: --profile works with exactly one --method")
        profiles = {methods[0]: parse_profile(args.profile)}
    else:
        profiles = {m: preset(m) for m in methods}
    desk = None
    if args.desk:
        desk = DeskOverrides(args.desk_channels, args.desk_search_epochs, args.desk_steps, args.desk_search_batch,
                             args.desk_retrain_epochs, args.desk_retrain_batch, args.desk_hps)
    dataset = resolve_dataset(args.data)
    results = run_benchsuite(profiles, dataset, args.out, args.split_seed, benches, seeds, desk, args.criterion,
                             log=lambda s: print(s, flush=True), workers=_threads())
    print(f"{len(results)} retraining results written to {ExperimentDir(args.out).ledger}")
    return EXIT_OK


COMMANDS = {"search": cmd_search, "retrain": cmd_retrain, "evaluate": cmd_evaluate, "report": cmd_report,
            "benchsuite": cmd_benchsuite}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except TrialAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (ProfileError, GenotypeError, CheckpointError, DataError, AnalyticsError, AccessViolation, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
