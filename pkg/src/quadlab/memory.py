"""Replay memories.

``QuestionMemory`` keeps only question-side fields; ``MemoryEntry`` has no
slot for visual data, so nothing image-derived can be stored. ``TripletBuffer``
holds complete (x, q, y) triplets and exists for the ER baseline.
Both re-divide capacity equally among all tasks seen so far.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .benchmark import TripletSet


@dataclass(frozen=True)
class MemoryEntry:
    __slots__ = ("question", "skill", "answer_space", "categories", "task")
    question: tuple[int, ...]
    skill: int
    answer_space: int
    categories: tuple[int, ...]
    task: int

    def to_json(self) -> str:
        return json.dumps({"question": list(self.question), "skill": self.skill,
                           "answer_space": self.answer_space, "categories": list(self.categories),
                           "task": self.task}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MemoryEntry":
        d = json.loads(line)
        return cls(tuple(d["question"]), d["skill"], d["answer_space"], tuple(d["categories"]), d["task"])


def _quotas(capacity: int, tasks: list[int], available: dict[int, int]) -> dict[int, int]:
    """Equal split of capacity (remainder to the earliest tasks), capped by availability.

    Slack left by tasks with too few items is handed to the others round-robin.
    """
    n = len(tasks)
    if n == 0:
        return {}
    base, rem = divmod(capacity, n)
    quota = {t: min(available[t], base + (1 if i < rem else 0)) for i, t in enumerate(tasks)}
    slack = capacity - sum(quota.values())
    while slack > 0:
        grew = False
        for t in tasks:
            if slack and quota[t] < available[t]:
                quota[t] += 1
                slack -= 1
                grew = True
        if not grew:
            break
    return quota


class _QuotaStore:
    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.tasks: list[int] = []
        self.pools: dict[int, list] = {}     # all candidates offered per task
        self.kept: dict[int, np.ndarray] = {}  # indices into pools kept per task
        self.mutations = 0

    def _commit(self, task: int, items: list, rng: np.random.Generator) -> None:
        if task in self.pools:
            raise ValueError(f"task {task} already inserted")
        self.tasks.append(task)
        self.pools[task] = items
        avail = {t: len(self.kept.get(t, self.pools[t])) if t != task else len(items) for t in self.tasks}
        quota = _quotas(self.capacity, self.tasks, avail)
        for t in self.tasks:
            cur = self.kept.get(t)
            if cur is None:
                cur = np.arange(len(self.pools[t]))
            if len(cur) > quota[t]:
                # uniform down-sampling, order preserved
                cur = np.sort(rng.choice(cur, size=quota[t], replace=False))
            self.kept[t] = cur
        self.mutations += 1

    def _items(self) -> list:
        return [self.pools[t][i] for t in self.tasks for i in self.kept[t]]

    def __len__(self) -> int:
        return int(sum(len(v) for v in self.kept.values()))

    def per_task(self) -> dict[int, int]:
        return {t: len(self.kept[t]) for t in self.tasks}


class QuestionMemory(_QuotaStore):
    def __init__(self, capacity: int = 200):
        super().__init__(capacity)
        self._cache: list[MemoryEntry] | None = None

    @property
    def entries(self) -> list[MemoryEntry]:
        if self._cache is None:
            self._cache = self._items()
        return self._cache

    def insert_task_questions(self, task: int, triplets: TripletSet, rng: np.random.Generator,
                              answer_spaces: np.ndarray | None = None) -> "QuestionMemory":
        """Copy question-side fields of a finished task, then rebalance quotas."""
        items = [
            MemoryEntry(tuple(int(t) for t in triplets.questions[i]), int(triplets.skills[i]),
                        int(triplets.skills[i] if answer_spaces is None else answer_spaces[i]),
                        tuple(int(c) for c in triplets.categories[i]), task)
            for i in range(len(triplets))
        ]
        self._commit(task, items, rng)
        self._cache = None
        return self

    def select_random(self, batch_size: int, rng: np.random.Generator) -> list[MemoryEntry]:
        """Uniform draw with replacement; empty memory gives an empty list."""
        entries = self.entries
        if not entries or batch_size <= 0:
            return []
        return [entries[i] for i in rng.integers(0, len(entries), size=batch_size)]

    def select_object_matched(self, categories, batch_size: int,
                              rng: np.random.Generator) -> list[MemoryEntry]:
        """Draw from entries whose categories intersect ``categories``.

        Matches are used without replacement; if the pool is smaller than the
        batch, the remainder comes from select_random. An empty pool makes
        this identical to select_random.
        """
        entries = self.entries
        if not entries or batch_size <= 0:
            return []
        cats = set(int(c) for c in categories)
        pool = [i for i, e in enumerate(entries) if cats.intersection(e.categories)]
        if not pool:
            return self.select_random(batch_size, rng)
        if len(pool) >= batch_size:
            # uniform over pool members, so each source task appears in proportion to its pool share
            pick = rng.choice(len(pool), size=batch_size, replace=False)
            return [entries[pool[i]] for i in pick]
        chosen = [entries[i] for i in pool]
        return chosen + self.select_random(batch_size - len(pool), rng)

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.entries)

    def serialized_size(self) -> int:
        return len(self.to_jsonl().encode("utf-8"))

    @staticmethod
    def read_jsonl(text: str) -> list[MemoryEntry]:
        return [MemoryEntry.from_json(line) for line in text.splitlines() if line.strip()]


@dataclass
class PairedBatch:
    """Current-task images with memory questions; x comes only from the current batch."""
    features: np.ndarray
    questions: np.ndarray
    answer_spaces: np.ndarray
    skills: np.ndarray
    categories: list[tuple[int, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.questions)


def pair_with_images(selected: list[MemoryEntry], features: np.ndarray) -> PairedBatch:
    """i-th current image with i-th selected question."""
    if len(selected) != len(features):
        raise ValueError(f"{len(selected)} questions for {len(features)} images")
    return PairedBatch(
        features=features,
        questions=np.asarray([e.question for e in selected], dtype=np.int64),
        answer_spaces=np.asarray([e.answer_space for e in selected], dtype=np.int64),
        skills=np.asarray([e.skill for e in selected], dtype=np.int64),
        categories=[e.categories for e in selected],
    )


class TripletBuffer(_QuotaStore):
    """Full (x, q, y) replay buffer with the same quota accounting."""

    def __init__(self, capacity: int = 200):
        super().__init__(capacity)
        self._stack: TripletSet | None = None

    def insert_task_triplets(self, task: int, triplets: TripletSet, rng: np.random.Generator) -> "TripletBuffer":
        self._commit(task, [triplets.subset([i]) for i in range(len(triplets))], rng)
        self._stack = None
        return self

    def stacked(self) -> TripletSet | None:
        if self._stack is None and len(self):
            self._stack = TripletSet.concat(self._items())
        return self._stack

    def sample(self, batch_size: int, rng: np.random.Generator) -> TripletSet | None:
        data = self.stacked()
        if data is None or batch_size <= 0:
            return None
        return data.subset(rng.integers(0, len(data), size=batch_size))

    def serialized_size(self) -> int:
        data = self.stacked()
        if data is None:
            return 0
        lines = []
        for i in range(len(data)):
            lines.append(json.dumps({
                "features": data.features[i].tolist(), "question": data.questions[i].tolist(),
                "answer": int(data.answers[i]), "skill": int(data.skills[i]),
                "categories": list(data.categories[i])}))
        return len("\n".join(lines).encode("utf-8"))
