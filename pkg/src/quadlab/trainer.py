"""Sequential training loop shared by every method.

Three independent RNG streams keep runs comparable: ``model`` seeds the
initial weights, ``data`` shuffles mini-batches, ``replay`` drives memory
sampling and down-sampling. Methods that never touch memory never draw from
the replay stream, so the data order is identical across methods.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baselines import FisherDiag, MethodSpec, estimate_fisher, ewc_penalty, method_spec
from .benchmark import (Benchmark, BenchmarkConfig, TaskSchedule, TripletSet, build_schedule,
                        generate_all, load_benchmark)
from .losses import ATTENTION_LOSSES, LossWeights, plasticity_loss, pseudo_label_loss, total_loss
from .memory import QuestionMemory, TripletBuffer, pair_with_images
from .metrics import RunMetrics, average_forgetting, average_performance, matrix_to_csv
from .model import Model, ModelConfig, clone_frozen, init_params

EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    method: str = "quad"
    lam: float = 0.5
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 32
    memory_capacity: int = 200
    selection: str = "object_matched"
    seed: int = 0
    ewc_lambda: float = 100.0
    fisher_samples: int = 100
    init_std: float = 0.1
    teacher_every: str = "macro"   # or "subtask"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128

    def __post_init__(self):
        spec = method_spec(self.method)
        for name in ("lr", "epochs", "batch_size", "fisher_samples", "init_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.ewc_lambda < 0 or self.memory_capacity < 0:
            raise ValueError("weights and memory capacity must be non-negative")
        if self.selection not in ("random", "object_matched"):
            raise ValueError(f"unknown selection strategy {self.selection!r}")
        if self.teacher_every not in ("macro", "subtask"):
            raise ValueError("teacher_every must be 'macro' or 'subtask'")
        if spec.replay == "questions" and self.memory_capacity == 0:
            raise ValueError(f"{self.method} needs a non-empty question memory")

    @property
    def spec(self) -> MethodSpec:
        return method_spec(self.method)

    def rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, ("model", "data", "replay").index(stream)])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Counters:
    stability_evals: list[int] = field(default_factory=list)   # per sub-task
    memory_reads: int = 0
    memory_mutations: int = 0
    steps: int = 0


@dataclass
class RunState:
    model: Model
    adam: ad.AdamState
    teacher: Model | None = None
    memory: QuestionMemory | None = None
    buffer: TripletBuffer | None = None
    fishers: list[FisherDiag] = field(default_factory=list)
    a: np.ndarray | None = None
    ooas: np.ndarray | None = None
    task_index: int = 0
    losses: list[tuple] = field(default_factory=list)   # (step, task, plast, pl, att, total)
    counters: Counters = field(default_factory=Counters)
    pending: list[tuple[int, TripletSet]] = field(default_factory=list)


@dataclass
class Data:
    bench: Benchmark
    schedule: TaskSchedule
    splits: list[dict[str, TripletSet]]
    source_hash: str | None = None   # sha256 of manifest.json when loaded from disk

    def macro_split(self, macro: int, name: str) -> TripletSet:
        return TripletSet.concat([self.splits[t][name] for t in self.schedule.macro_tasks(macro)])

    @property
    def manifest_hash(self) -> str:
        if self.source_hash:
            return self.source_hash
        blob = json.dumps({"config": self.bench.config.to_dict(), "fold": self.schedule.fold},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@functools.lru_cache(maxsize=8)
def _cached_data(config_json: str, fold: int) -> Data:
    bench = Benchmark(BenchmarkConfig(**json.loads(config_json)))
    schedule = build_schedule(bench, fold)
    return Data(bench, schedule, generate_all(bench, schedule))


def load_data(config: BenchmarkConfig | None = None, fold: int = 0) -> Data:
    """Generate (or reuse, within a process) every split for one benchmark and fold."""
    cfg = config or BenchmarkConfig()
    return _cached_data(json.dumps(cfg.to_dict(), sort_keys=True), fold)


def data_from_dir(path) -> Data:
    bench, schedule, splits = load_benchmark(path)
    digest = hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()
    return Data(bench, schedule, splits, digest)


def model_config_for(bench: Benchmark, cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(
        question_vocab_size=bench.vocab.question_vocab_size,
        answer_vocab_size=bench.vocab.answer_vocab_size,
        max_question_len=bench.max_question_len,
        d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads, d_ff=cfg.d_ff,
        n_regions=bench.config.n_regions, d_visual=bench.config.d_visual)


def init_state(data: Data, cfg: TrainConfig) -> RunState:
    mcfg = model_config_for(data.bench, cfg)
    model = Model(mcfg, init_params(mcfg, int(cfg.rng("model").integers(2**31)), std=cfg.init_std))
    spec = cfg.spec
    L = data.schedule.n_macro
    return RunState(
        model=model, adam=ad.AdamState(),
        memory=QuestionMemory(cfg.memory_capacity) if spec.replay == "questions" else None,
        buffer=TripletBuffer(cfg.memory_capacity) if spec.replay == "triplets" else None,
        a=np.full((L, L), np.nan), ooas=np.full((L, L), np.nan))


# ---------------------------------------------------------------- evaluation

def predict(model: Model, data: TripletSet) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(data), EVAL_CHUNK):
            logits, _ = model(data.features[i:i + EVAL_CHUNK], data.questions[i:i + EVAL_CHUNK])
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out)


def score(pred: np.ndarray, answers: np.ndarray, space: np.ndarray) -> tuple[float, float]:
    """(exact-match accuracy, fraction of predictions outside ``space``)."""
    if len(answers) == 0:
        raise ValueError("cannot evaluate an empty split")
    return float(np.mean(pred == answers)), float(np.mean(~np.isin(pred, space)))


def evaluate(model: Model, data: TripletSet, space: np.ndarray) -> tuple[float, float]:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    return score(predict(model, data), data.answers, space)


def skill_space(data: Data, macro: int) -> np.ndarray:
    return data.bench.vocab.answer_space[data.schedule.skills[macro]]


# ---------------------------------------------------------------- training

def _step(state: RunState, cfg: TrainConfig, batch: TripletSet, categories, replay_rng,
          task: int) -> None:
    spec = cfg.spec
    model = state.model
    logits, _ = model(batch.features, batch.questions)
    plast = plasticity_loss(logits, batch.answers)
    pl = att = None

    if spec.distills and state.teacher is not None and len(state.memory):
        if cfg.selection == "object_matched":
            chosen = state.memory.select_object_matched(categories, len(batch), replay_rng)
        else:
            chosen = state.memory.select_random(len(batch), replay_rng)
        state.counters.memory_reads += 1
        paired = pair_with_images(chosen, batch.features)
        t_logits, t_cap = state.teacher(paired.features, paired.questions)
        s_logits, s_cap = model(paired.features, paired.questions)
        if spec.pseudo_label:
            pl = pseudo_label_loss(s_logits, t_logits)
        if spec.attention:
            att = ATTENTION_LOSSES[spec.attention](s_cap, t_cap)
        state.counters.stability_evals[-1] += 1

    if spec.replay == "triplets" and state.buffer is not None and len(state.buffer):
        replay = state.buffer.sample(len(batch), replay_rng)
        state.counters.memory_reads += 1
        r_logits, _ = model(replay.features, replay.questions)
        plast = ad.add(plast, plasticity_loss(r_logits, replay.answers))

    if spec.ewc and state.fishers:
        plast = ad.add(plast, ad.mul(ewc_penalty(model.params, state.fishers), ad.Tensor(cfg.ewc_lambda)))

    parts = total_loss(LossWeights(cfg.lam), plast, pl, att)
    params = model.parameters()
    ad.backward(parts.total_tensor)
    ad.adam_step(params, [p.grad for p in params], state.adam, cfg.lr)
    for p in params:
        p.grad = None
    state.counters.steps += 1
    state.losses.append((state.counters.steps, task) + parts.row())


def train_on(state: RunState, cfg: TrainConfig, train: TripletSet, categories, data_rng,
             replay_rng, task: int, epochs: int) -> None:
    state.counters.stability_evals.append(0)
    n = len(train)
    for _ in range(epochs):
        order = data_rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            _step(state, cfg, train.subset(order[i:i + cfg.batch_size]), categories, replay_rng, task)


def _commit_boundary(state: RunState, cfg: TrainConfig, data: Data, replay_rng, macro: int) -> None:
    """Teacher snapshot plus memory / Fisher updates for everything since the last boundary."""
    spec = cfg.spec
    if spec.distills:
        state.teacher = clone_frozen(state.model)
    for t, train in state.pending:
        if state.memory is not None:
            state.memory.insert_task_questions(t, train, replay_rng)
            state.counters.memory_mutations += 1
        if state.buffer is not None:
            state.buffer.insert_task_triplets(t, train, replay_rng)
            state.counters.memory_mutations += 1
    if spec.ewc and state.pending:
        union = TripletSet.concat([tr for _, tr in state.pending])
        state.fishers.append(estimate_fisher(state.model, union, cfg.fisher_samples, replay_rng))
    state.pending = []


def train_task(state: RunState, cfg: TrainConfig, data: Data, task: int, data_rng, replay_rng) -> RunState:
    """Train on one sub-task; boundary bookkeeping happens when its macro-task ends."""
    s, g = data.schedule.tasks[task]
    train = data.splits[task]["train"]
    train_on(state, cfg, train, data.schedule.groups[g], data_rng, replay_rng, task, cfg.epochs)
    state.pending.append((task, train))
    state.task_index = task + 1
    last_of_macro = task == data.schedule.macro_tasks(s)[-1]
    if last_of_macro or cfg.teacher_every == "subtask":
        _commit_boundary(state, cfg, data, replay_rng, s)
    return state


def _fill_column(state: RunState, data: Data, j: int, rows) -> None:
    for i in rows:
        acc, rate = evaluate(state.model, data.macro_split(i, "test"), skill_space(data, i))
        state.a[i, j] = acc
        state.ooas[i, j] = rate


def _novel(state: RunState, data: Data) -> dict[str, float]:
    return {skill: evaluate(state.model, data.macro_split(m, "novel_test"), skill_space(data, m))[0]
            for m, skill in enumerate(data.schedule.skills)}


def run_sequence(data: Data, cfg: TrainConfig, eval_hook=None) -> tuple[RunMetrics, RunState]:
    """All sub-tasks in schedule order; the matrix is filled at macro boundaries.

    ``joint`` instead trains once on the shuffled union for the same number
    of epochs and only fills the final column.
    """
    state = init_state(data, cfg)
    data_rng, replay_rng = cfg.rng("data"), cfg.rng("replay")
    L = data.schedule.n_macro

    if cfg.spec.joint:
        union = TripletSet.concat([sp["train"] for sp in data.splits])
        train_on(state, cfg, union, (), data_rng, replay_rng, -1, cfg.epochs)
        _fill_column(state, data, L - 1, range(L))
        metrics = RunMetrics(a=state.a, ap=average_performance(state.a), forget=float("nan"),
                             ooas=list(state.ooas[:, -1]), novel=_novel(state, data))
        return metrics, state

    for task in range(len(data.schedule.tasks)):
        train_task(state, cfg, data, task, data_rng, replay_rng)
        s, _ = data.schedule.tasks[task]
        if task == data.schedule.macro_tasks(s)[-1]:
            _fill_column(state, data, s, range(s + 1))
            if eval_hook is not None:
                eval_hook(state, s)
    metrics = RunMetrics(a=state.a, ap=average_performance(state.a), forget=average_forgetting(state.a),
                         ooas=list(state.ooas[:, -1]), novel=_novel(state, data))
    return metrics, state


# ---------------------------------------------------------------- artifacts

def loss_csv(state: RunState) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "task", "plasticity", "pseudo_label", "attention", "total"])
    w.writerows(state.losses)
    return buf.getvalue()


def summary_dict(metrics: RunMetrics) -> dict:
    """AP, Forget, OOAS (mean over every task but the last, at the end) and novelAP."""
    rates = metrics.ooas[:-1]
    return {
        "AP": metrics.ap,
        "Forget": metrics.forget,
        "OOAS": float(np.mean(rates)) if rates else float("nan"),
        "novelAP": float(np.mean(list(metrics.novel.values()))),
        "novel_per_skill": metrics.novel,
        "ooas_per_task": metrics.ooas,
    }


def write_run(out_dir, data: Data, cfg: TrainConfig, metrics: RunMetrics, state: RunState) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(data.schedule.skills)
    (out / "matrix.csv").write_text(matrix_to_csv(metrics.a, names), encoding="utf-8")
    (out / "losses.csv").write_text(loss_csv(state), encoding="utf-8")
    (out / "metrics.json").write_text(json.dumps(summary_dict(metrics), indent=2, sort_keys=True),
                                      encoding="utf-8")
    manifest = {
        "train_config": cfg.to_dict(),
        "benchmark_config": data.bench.config.to_dict(),
        "fold": data.schedule.fold,
        "seeds": {"global": cfg.seed, "benchmark": data.bench.config.seed},
        "benchmark_hash": data.manifest_hash,
        "counters": asdict(state.counters),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out
