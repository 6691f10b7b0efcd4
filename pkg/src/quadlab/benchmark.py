"""Procedural VQA continual-learning benchmark.

Scenes are a few attributed objects on a 3x3 grid, rendered as noisy region
feature rows. Five question skills with disjoint answer spaces form the
macro-tasks; a partition of the object categories into groups forms the
sub-tasks. One group per skill is held out for novel-composition tests.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

SKILLS = ("count", "color", "existence", "recognition", "location")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
GRID = 3
N_CELLS = GRID * GRID
MAX_COUNT = 5

PAD = "<pad>"
WORDS = (PAD, "how", "many", "what", "color", "is", "the", "there", "a", "in", "cell", "where")
TEMPLATES = {
    "count": ("how", "many", "{cat}"),
    "color": ("what", "color", "is", "the", "{cat}"),
    "existence": ("is", "there", "a", "{cat}"),
    "recognition": ("what", "is", "in", "cell", "{cell}"),
    "location": ("where", "is", "the", "{cat}"),
}


class RetryScene(Exception):
    """Scene cannot host an unambiguous question of the requested skill."""


@dataclass
class BenchmarkConfig:
    n_categories: int = 10
    n_groups: int = 5
    n_regions: int = 9
    d_visual: int = 32
    noise: float = 0.05
    min_objects: int = 2
    max_objects: int = 5
    seed: int = 0
    skills: tuple[str, ...] = SKILLS
    train_size: int = 800
    val_size: int = 50
    test_size: int = 100
    novel_size: int = 100

    def __post_init__(self):
        self.skills = tuple(self.skills)
        if self.n_groups > self.n_categories:
            raise ValueError(f"K={self.n_groups} groups exceed C={self.n_categories} categories")
        if self.n_regions < self.max_objects or self.max_objects > N_CELLS:
            raise ValueError("max_objects must fit in regions and grid cells")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("invalid object count range")
        unknown = set(self.skills) - set(SKILLS)
        if unknown:
            raise ValueError(f"unknown skills {sorted(unknown)}")

    @property
    def max_question_len(self) -> int:
        return max(len(TEMPLATES[s]) for s in self.skills)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skills"] = list(self.skills)
        return d


class Vocab:
    """Fixed word->id tables for questions and answers."""

    def __init__(self, n_categories: int):
        self.n_categories = n_categories
        self.question_tokens = list(WORDS) + [f"cat{c}" for c in range(n_categories)] \
            + [f"cell{k}" for k in range(N_CELLS)]
        self.qid = {w: i for i, w in enumerate(self.question_tokens)}
        spaces = {
            "count": [f"{n}" for n in range(MAX_COUNT + 1)],
            "color": list(COLORS),
            "existence": ["yes", "no"],
            "recognition": [f"cat{c}" for c in range(n_categories)],
            "location": [f"cell{k}" for k in range(N_CELLS)],
        }
        self.answer_tokens: list[str] = []
        self.answer_space: dict[str, np.ndarray] = {}
        for skill in SKILLS:
            start = len(self.answer_tokens)
            self.answer_tokens += [f"{skill}:{a}" for a in spaces[skill]]
            self.answer_space[skill] = np.arange(start, len(self.answer_tokens))
        self.aid = {a: i for i, a in enumerate(self.answer_tokens)}

    @property
    def question_vocab_size(self) -> int:
        return len(self.question_tokens)

    @property
    def answer_vocab_size(self) -> int:
        return len(self.answer_tokens)

    def encode(self, words) -> list[int]:
        return [self.qid[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.question_tokens[i] for i in ids if self.question_tokens[i] != PAD]

    def answer(self, skill: str, value) -> int:
        return self.aid[f"{skill}:{value}"]

    def answer_name(self, aid: int) -> str:
        return self.answer_tokens[aid]


@dataclass(frozen=True)
class ObjectInstance:
    category: int
    color: int
    cell: int


@dataclass
class Scene:
    objects: list[ObjectInstance]
    slots: list[int]  # region row holding each object
    seed: int = 0

    @property
    def categories(self) -> set[int]:
        return {o.category for o in self.objects}


@dataclass
class Triplet:
    features: np.ndarray
    question: np.ndarray
    answer: int
    skill: int
    group: int
    categories: tuple[int, ...]


@dataclass
class TripletSet:
    """Column-stored triplets; row i is one (x, q, y) sample."""
    features: np.ndarray      # (N, R, dv)
    questions: np.ndarray     # (N, Lq)
    answers: np.ndarray       # (N,)
    skills: np.ndarray        # (N,)
    groups: np.ndarray        # (N,)
    categories: list[tuple[int, ...]]
    scenes: list[Scene] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.answers)

    def __getitem__(self, i: int) -> Triplet:
        return Triplet(self.features[i], self.questions[i], int(self.answers[i]),
                       int(self.skills[i]), int(self.groups[i]), self.categories[i])

    def subset(self, idx) -> "TripletSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TripletSet(self.features[idx], self.questions[idx], self.answers[idx],
                          self.skills[idx], self.groups[idx], [self.categories[i] for i in idx],
                          [self.scenes[i] for i in idx] if self.scenes else [])

    @staticmethod
    def concat(sets: list["TripletSet"]) -> "TripletSet":
        return TripletSet(
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.questions for s in sets]),
            np.concatenate([s.answers for s in sets]),
            np.concatenate([s.skills for s in sets]),
            np.concatenate([s.groups for s in sets]),
            [c for s in sets for c in s.categories],
            [c for s in sets for c in s.scenes],
        )


class Benchmark:
    """Embedding tables, vocabulary and category partition for one seed."""

    def __init__(self, config: BenchmarkConfig | None = None):
        self.config = config or BenchmarkConfig()
        cfg = self.config
        self.vocab = Vocab(cfg.n_categories)
        rng = np.random.default_rng([cfg.seed, 101])
        scale = 1.0 / np.sqrt(cfg.d_visual)
        self.E_cat = rng.normal(0, scale, (cfg.n_categories, cfg.d_visual))
        self.E_col = rng.normal(0, scale, (len(COLORS), cfg.d_visual))
        self.E_pos = rng.normal(0, scale, (N_CELLS, cfg.d_visual))
        self.E_null = rng.normal(0, scale, cfg.d_visual)
        perm = np.random.default_rng([cfg.seed, 202]).permutation(cfg.n_categories)
        # round-robin keeps group sizes within one when K does not divide C
        self.groups: list[tuple[int, ...]] = [
            tuple(sorted(int(c) for c in perm[k::cfg.n_groups])) for k in range(cfg.n_groups)]

    @property
    def max_question_len(self) -> int:
        return self.config.max_question_len

    def skill_index(self, skill: str) -> int:
        return self.config.skills.index(skill)


def generate_scene(rng: np.random.Generator, group: tuple[int, ...], config: BenchmarkConfig,
                   seed: int = 0) -> Scene:
    if not group:
        raise ValueError("object group is empty")
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(N_CELLS, size=n, replace=False)
    cats = rng.choice(np.asarray(group), size=n, replace=True)
    cols = rng.integers(0, len(COLORS), size=n)
    # one region per grid cell when they line up; otherwise objects take random rows
    if config.n_regions == N_CELLS:
        slots = cells
    else:
        slots = rng.choice(config.n_regions, size=n, replace=False)
    objs = [ObjectInstance(int(c), int(k), int(p)) for c, k, p in zip(cats, cols, cells)]
    return Scene(objs, [int(s) for s in slots], seed)


def render_features(bench: Benchmark, scene: Scene, rng: np.random.Generator | None = None,
                    noise: float | None = None) -> np.ndarray:
    """Row r = E_cat + E_col + E_pos + noise for the object in slot r, else E_null + noise."""
    cfg = bench.config
    sigma = cfg.noise if noise is None else noise
    out = np.tile(bench.E_null, (cfg.n_regions, 1))
    for o, s in zip(scene.objects, scene.slots):
        out[s] = bench.E_cat[o.category] + bench.E_col[o.color] + bench.E_pos[o.cell]
    if sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        out = out + rng.normal(0.0, sigma, out.shape)
    return out


def instantiate_question(bench: Benchmark, skill: str, scene: Scene, group: tuple[int, ...],
                         rng: np.random.Generator):
    """Returns (question ids padded to max length, answer id, referenced categories)."""
    vocab = bench.vocab
    counts = {c: 0 for c in group}
    for o in scene.objects:
        counts[o.category] = counts.get(o.category, 0) + 1
    singles = [o for o in scene.objects if counts[o.category] == 1]

    if skill == "count":
        cat = int(rng.choice(np.asarray(group)))
        ans, refs, slot = vocab.answer("count", counts[cat]), (cat,), f"cat{cat}"
    elif skill == "existence":
        present = sorted(c for c in group if counts[c] > 0)
        absent = sorted(c for c in group if counts[c] == 0)
        if rng.random() < 0.5:
            if not absent:
                raise RetryScene
            cat, value = int(rng.choice(absent)), "no"
        else:
            cat, value = int(rng.choice(present)), "yes"
        ans, refs, slot = vocab.answer("existence", value), (cat,), f"cat{cat}"
    elif skill in ("color", "location"):
        if not singles:
            raise RetryScene
        o = singles[int(rng.integers(len(singles)))]
        value = COLORS[o.color] if skill == "color" else f"cell{o.cell}"
        ans, refs, slot = vocab.answer(skill, value), (o.category,), f"cat{o.category}"
    elif skill == "recognition":
        o = scene.objects[int(rng.integers(len(scene.objects)))]
        ans, refs, slot = vocab.answer("recognition", f"cat{o.category}"), (o.category,), f"cell{o.cell}"
    else:
        raise ValueError(f"unknown skill {skill}")

    words = [slot if w in ("{cat}", "{cell}") else w for w in TEMPLATES[skill]]
    # left padding keeps the slot token in the last position for every skill
    words = [PAD] * (bench.max_question_len - len(words)) + words
    return np.asarray(vocab.encode(words), dtype=np.int64), ans, refs


def sample_triplets(bench: Benchmark, skill: str, group_id: int, n: int,
                    rng: np.random.Generator) -> TripletSet:
    cfg = bench.config
    group = bench.groups[group_id]
    feats, qs, ans, refs, scenes = [], [], [], [], []
    while len(ans) < n:
        scene = generate_scene(rng, group, cfg)
        try:
            q, a, r = instantiate_question(bench, skill, scene, group, rng)
        except RetryScene:
            continue
        feats.append(render_features(bench, scene, rng))
        qs.append(q)
        ans.append(a)
        refs.append(r)
        scenes.append(scene)
    k = bench.skill_index(skill)
    return TripletSet(
        np.asarray(feats).reshape(n, cfg.n_regions, cfg.d_visual),
        np.asarray(qs, dtype=np.int64).reshape(n, bench.max_question_len),
        np.asarray(ans, dtype=np.int64),
        np.full(n, k, dtype=np.int64),
        np.full(n, group_id, dtype=np.int64),
        refs, scenes)


@dataclass
class TaskSchedule:
    skills: tuple[str, ...]
    groups: list[tuple[int, ...]]
    held_out: dict[str, int]
    tasks: list[tuple[int, int]]  # (skill index, group index) in training order
    fold: int
    sizes: tuple[int, int, int, int]

    @property
    def n_macro(self) -> int:
        return len(self.skills)

    def macro_tasks(self, macro: int) -> list[int]:
        return [i for i, (s, _) in enumerate(self.tasks) if s == macro]

    def all_subtasks(self) -> list[dict]:
        out = []
        for si, skill in enumerate(self.skills):
            for g in range(len(self.groups)):
                out.append({"skill": skill, "group": g, "held_out": self.held_out[skill] == g})
        return out


def build_schedule(bench: Benchmark, fold: int = 0) -> TaskSchedule:
    cfg = bench.config
    K = cfg.n_groups
    if not 0 <= fold < K:
        raise ValueError(f"fold must be in 0..{K - 1}, got {fold}")
    held = {skill: (i + fold) % K for i, skill in enumerate(cfg.skills)}
    tasks = [(i, g) for i, skill in enumerate(cfg.skills) for g in range(K) if g != held[skill]]
    return TaskSchedule(cfg.skills, list(bench.groups), held, tasks, fold,
                        (cfg.train_size, cfg.val_size, cfg.test_size, cfg.novel_size))


def task_rng(bench: Benchmark, schedule: TaskSchedule, task_index: int, split: str) -> np.random.Generator:
    split_id = ("train", "val", "test", "novel_test").index(split)
    return np.random.default_rng([bench.config.seed, schedule.fold, task_index, split_id])


def generate_task_split(bench: Benchmark, schedule: TaskSchedule, task_index: int,
                        sizes: tuple[int, int, int, int] | None = None) -> dict[str, TripletSet]:
    """Train/val/test from the task's (skill, group); novel_test from the held-out group.

    Each split draws from its own seed derived from (benchmark seed, fold, task, split).
    """
    sizes = sizes or schedule.sizes
    if min(sizes) <= 0:
        raise ValueError("split sizes must be positive")
    s, g = schedule.tasks[task_index]
    skill = schedule.skills[s]
    out = {}
    for name, n in zip(("train", "val", "test"), sizes[:3]):
        out[name] = sample_triplets(bench, skill, g, n, task_rng(bench, schedule, task_index, name))
    out["novel_test"] = sample_triplets(bench, skill, schedule.held_out[skill], sizes[3],
                                        task_rng(bench, schedule, task_index, "novel_test"))
    return out


def generate_all(bench: Benchmark, schedule: TaskSchedule) -> list[dict[str, TripletSet]]:
    return [generate_task_split(bench, schedule, i) for i in range(len(schedule.tasks))]


# ---------------------------------------------------------------- export

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def export_benchmark(bench: Benchmark, schedule: TaskSchedule,
                     splits: list[dict[str, TripletSet]], out_dir) -> Path:
    """One JSON-lines file + one binary feature file per split, plus manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for ti, task in enumerate(splits):
        s, g = schedule.tasks[ti]
        for name, ts in task.items():
            stem = f"task{ti:02d}_{schedule.skills[s]}_g{g}_{name}"
            jl = out / f"{stem}.jsonl"
            with open(jl, "w", encoding="utf-8") as f:
                for i in range(len(ts)):
                    f.write(json.dumps({
                        "index": i,
                        "question": [int(t) for t in ts.questions[i]],
                        "question_text": " ".join(bench.vocab.decode(ts.questions[i])),
                        "answer": int(ts.answers[i]),
                        "answer_text": bench.vocab.answer_name(int(ts.answers[i])),
                        "skill": schedule.skills[int(ts.skills[i])],
                        "group": int(ts.groups[i]),
                        "categories": list(ts.categories[i]),
                    }, sort_keys=True) + "\n")
            fb = out / f"{stem}.features.bin"
            ad.save_tensors(fb, {"features": ts.features})
            files[jl.name] = _sha256(jl)
            files[fb.name] = _sha256(fb)
    manifest = {
        "config": bench.config.to_dict(),
        "seed": bench.config.seed,
        "fold": schedule.fold,
        "groups": [list(g) for g in schedule.groups],
        "held_out": schedule.held_out,
        "training_tasks": [{"skill": schedule.skills[s], "group": g} for s, g in schedule.tasks],
        "subtasks": schedule.all_subtasks(),
        "question_vocab": bench.vocab.question_tokens,
        "answer_vocab": bench.vocab.answer_tokens,
        "files": dict(sorted(files.items())),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_benchmark(in_dir) -> tuple[Benchmark, TaskSchedule, list[dict[str, TripletSet]]]:
    """Read an exported benchmark back, checking every file against its manifest hash."""
    root = Path(in_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no benchmark manifest at {mpath}; run `quadlab generate --out {root}` first")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    for name, digest in manifest["files"].items():
        if _sha256(root / name) != digest:
            raise ValueError(f"{root / name} does not match its manifest hash")
    bench = Benchmark(BenchmarkConfig(**manifest["config"]))
    schedule = build_schedule(bench, manifest["fold"])
    splits = []
    for ti, (s, g) in enumerate(schedule.tasks):
        task = {}
        for name in ("train", "val", "test", "novel_test"):
            stem = f"task{ti:02d}_{schedule.skills[s]}_g{g}_{name}"
            rows = [json.loads(line) for line in (root / f"{stem}.jsonl").read_text(encoding="utf-8").splitlines()]
            feats = ad.load_tensors(root / f"{stem}.features.bin")["features"]
            task[name] = TripletSet(
                feats,
                np.asarray([r["question"] for r in rows], dtype=np.int64),
                np.asarray([r["answer"] for r in rows], dtype=np.int64),
                np.asarray([schedule.skills.index(r["skill"]) for r in rows], dtype=np.int64),
                np.asarray([r["group"] for r in rows], dtype=np.int64),
                [tuple(r["categories"]) for r in rows])
        splits.append(task)
    return bench, schedule, splits
