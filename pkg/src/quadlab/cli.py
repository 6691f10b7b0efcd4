"""``quadlab`` command line: generate data, run methods, sweeps and ablations.

Every command writes CSV/JSON only; plotting is left to external tools.
Settings come from an optional JSON config and are overridden by flags.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import METHODS
from .benchmark import Benchmark, BenchmarkConfig, build_schedule, export_benchmark, generate_all
from .metrics import aggregate_novel_composition, matrix_to_csv
from .trainer import Data, TrainConfig, data_from_dir, load_data, run_sequence, summary_dict, write_run

ABLATION_VARIANTS = ("quad_pl_only", "quad_att_only", "quad", "quad_l1", "quad_asym")
MATRIX_METHODS = ("vanilla", "quad_pl_only", "quad")


@dataclass
class ExperimentConfig:
    benchmark: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    fold: int = 0
    methods: list[str] = field(default_factory=lambda: ["vanilla", "quad"])
    memory_sizes: list[int] = field(default_factory=lambda: [25, 50, 100, 200])
    selections: list[str] = field(default_factory=lambda: ["object_matched"])
    seeds: list[int] = field(default_factory=lambda: [0])
    data: str | None = None
    out: str = "results"

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unregistered methods: {unknown}")
        if not self.memory_sizes or not self.selections or not self.seeds:
            raise ValueError("memory sizes, selections and seeds must be non-empty")

    def bench_config(self) -> BenchmarkConfig:
        return BenchmarkConfig(**self.benchmark)

    def train_config(self, **over) -> TrainConfig:
        return TrainConfig(**{**self.train, **over})


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_config(args) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        known = {f.name for f in fields(ExperimentConfig)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
    if args.seed is not None:
        raw["seeds"] = [args.seed]
        if args.command == "generate":
            raw["benchmark"] = {**raw.get("benchmark", {}), "seed": args.seed}
    if args.fold is not None:
        raw["fold"] = args.fold
    if getattr(args, "methods", None):
        raw["methods"] = _words(args.methods)
    if getattr(args, "memory_sizes", None):
        raw["memory_sizes"] = _ints(args.memory_sizes)
    if getattr(args, "selection", None):
        raw["selections"] = _words(args.selection)
    if getattr(args, "data", None):
        raw["data"] = args.data
    if args.out:
        raw["out"] = args.out
    return ExperimentConfig(**raw)


# ---------------------------------------------------------------- run plumbing

def _threads() -> int:
    return max(1, int(os.environ.get("QUADLAB_THREADS", "1")))


def _data_for(exp: ExperimentConfig, fold: int | None = None) -> Data:
    if exp.data and fold is None:
        return data_from_dir(exp.data)
    if exp.data:
        # other folds are regenerated from the stored config, never written back
        stored = data_from_dir(exp.data)
        return load_data(stored.bench.config, fold)
    return load_data(exp.bench_config(), exp.fold if fold is None else fold)


def _job(args):
    exp, fold, train_kw, out = args
    data = _data_for(exp, fold)
    cfg = exp.train_config(**train_kw)
    metrics, state = run_sequence(data, cfg)
    if out:
        write_run(out, data, cfg, metrics, state)
    seen = {skill: float(metrics.a[m, -1]) for m, skill in enumerate(data.schedule.skills)}
    return {**summary_dict(metrics), "seen_per_skill": seen}


def run_jobs(jobs: list[tuple]) -> list[dict]:
    """Independent runs; fanned out over QUADLAB_THREADS processes."""
    n = _threads()
    if n == 1 or len(jobs) == 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_job, jobs))


def _mean(results: list[dict], key: str) -> float:
    return float(np.mean([r[key] for r in results]))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_manifest(out: Path, exp: ExperimentConfig, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {"experiment": exp.__dict__, **extra}
    (out / "experiment.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=str),
                                         encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_generate(exp: ExperimentConfig) -> int:
    bench = Benchmark(exp.bench_config())
    schedule = build_schedule(bench, exp.fold)
    out = Path(exp.out)
    try:
        path = export_benchmark(bench, schedule, generate_all(bench, schedule), out)
    except OSError as e:
        raise OSError(f"cannot write benchmark to {out}: {e}") from e
    print(f"wrote {path} ({len(schedule.all_subtasks())} sub-tasks, fold {exp.fold})")
    return 0


def cmd_run(exp: ExperimentConfig) -> int:
    if exp.data is None:
        raise FileNotFoundError("no benchmark given; run `quadlab generate --out DIR` and pass --data DIR")
    _data_for(exp)  # fail early with the generate hint
    out = Path(exp.out)
    jobs = [(exp, None, {"method": m, "seed": s}, out / m / f"seed{s}")
            for m in exp.methods for s in exp.seeds]
    results = run_jobs(jobs)
    for (_, _, kw, path), r in zip(jobs, results):
        print(f"{kw['method']:>14} seed {kw['seed']}: AP {100 * r['AP']:.2f}%  "
              f"Forget {100 * r['Forget']:.2f}%  -> {path}")
    return 0


def cmd_sweep_memory(exp: ExperimentConfig) -> int:
    methods = [m for m in exp.methods if m in ("quad", "er")] or ["quad"]
    cells = [(m, sel, mem) for m in sorted(methods) for sel in exp.selections for mem in sorted(exp.memory_sizes)
             if not (m == "er" and sel != exp.selections[0])]
    jobs = [(exp, None, {"method": m, "selection": sel, "memory_capacity": mem, "seed": s}, None)
            for m, sel, mem in cells for s in exp.seeds]
    results = run_jobs(jobs)
    k = len(exp.seeds)
    rows = []
    for i, (m, sel, mem) in enumerate(cells):
        chunk = results[i * k:(i + 1) * k]
        rows.append([m, sel, mem, _mean(chunk, "AP"), _mean(chunk, "Forget")])
    out = Path(exp.out)
    _write_csv(out / "memory_sweep.csv", ["method", "selection", "memory", "AP", "Forget"], rows)
    _write_manifest(out, exp, seeds=exp.seeds)
    print(f"wrote {out / 'memory_sweep.csv'} ({len(rows)} rows)")
    return 0


def cmd_ablate(exp: ExperimentConfig) -> int:
    jobs = [(exp, None, {"method": v, "seed": s}, None) for v in ABLATION_VARIANTS for s in exp.seeds]
    results = run_jobs(jobs)
    k = len(exp.seeds)
    rows = []
    for i, v in enumerate(ABLATION_VARIANTS):
        chunk = results[i * k:(i + 1) * k]
        rows.append([v, _mean(chunk, "AP"), _mean(chunk, "Forget"), int(v == "quad")])
    out = Path(exp.out)
    _write_csv(out / "ablation.csv", ["variant", "AP", "Forget", "reference"], rows)
    _write_manifest(out, exp, seeds={v: exp.seeds for v in ABLATION_VARIANTS})
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_matrix(exp: ExperimentConfig) -> int:
    seed = exp.seeds[0]
    out = Path(exp.out)
    data = _data_for(exp)
    names = list(data.schedule.skills)
    for m in MATRIX_METHODS:
        metrics, _ = run_sequence(data, exp.train_config(method=m, seed=seed))
        out.mkdir(parents=True, exist_ok=True)
        (out / f"matrix_{m}.csv").write_text(matrix_to_csv(metrics.a, names), encoding="utf-8")
        print(f"wrote {out / f'matrix_{m}.csv'}")
    _write_manifest(out, exp, seeds=[seed])
    return 0


def cmd_novel(exp: ExperimentConfig) -> int:
    K = exp.bench_config().n_groups
    method = exp.methods[-1]
    jobs = [(exp, k, {"method": method, "seed": exp.seeds[0]}, None) for k in range(K)]
    results = run_jobs(jobs)
    agg = aggregate_novel_composition({k: r["novel_per_skill"] for k, r in enumerate(results)}, K,
                                      seen={k: r["seen_per_skill"] for k, r in enumerate(results)})
    out = Path(exp.out)
    rows = [[s] + agg["table"][s] + [agg["per_skill"][s], agg["seen_per_skill"][s], agg["gap"][s]]
            for s in agg["table"]]
    _write_csv(out / "novel.csv", ["skill"] + [f"fold{k}" for k in range(K)] + ["novel_mean", "seen_mean", "gap"],
               rows)
    _write_manifest(out, exp, method=method, overall=agg["overall"])
    print(f"{method}: novel AP {100 * agg['overall']:.2f}% over {K} folds -> {out / 'novel.csv'}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "sweep-memory": cmd_sweep_memory,
    "ablate": cmd_ablate,
    "matrix": cmd_matrix,
    "novel": cmd_novel,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="experiment JSON; flags override it")
        c.add_argument("--seed", type=int)
        c.add_argument("--fold", type=int)
        c.add_argument("--out")
        if name != "generate":
            c.add_argument("--data", help="benchmark directory written by `generate`")
            c.add_argument("--methods", help="comma list, e.g. vanilla,quad")
            c.add_argument("--memory-sizes", help="comma list, e.g. 25,50,100,200")
            c.add_argument("--selection", help="random, object_matched, or both comma-separated")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        exp = build_config(args)
        return COMMANDS[args.command](exp)
    except (ValueError, OSError, KeyError) as e:
        print(f"quadlab {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
