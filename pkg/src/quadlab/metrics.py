"""Continual-learning metrics over the accuracy matrix.

``a[i, j]`` is the accuracy on task i after finishing task j; only cells with
i <= j are defined, the rest are NaN. Values are fractions in [0, 1].
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RunMetrics:
    a: np.ndarray
    ap: float
    forget: float
    ooas: list[float] = field(default_factory=list)
    novel: dict = field(default_factory=dict)

    def summary(self) -> dict:
        rates = [r for r in self.ooas if np.isfinite(r)]
        return {
            "AP": self.ap,
            "Forget": self.forget,
            "OOAS": float(np.mean(rates)) if rates else float("nan"),
            "novelAP": float(np.mean(list(self.novel.values()))) if self.novel else float("nan"),
        }


def average_performance(a) -> float:
    """Mean of the final column."""
    a = np.asarray(a, dtype=np.float64)
    last = a[:, -1]
    if np.any(np.isnan(last)):
        raise ValueError("final column of the accuracy matrix is incomplete")
    return float(last.mean())


def average_forgetting(a) -> float:
    """(1/(T-1)) * sum_{t<T} [max_{t<=z<=T-1} a[t,z] - a[t,T]], 1-indexed.

    No clamping at zero: a task whose final accuracy beats every interim
    value contributes a negative term.
    """
    a = np.asarray(a, dtype=np.float64)
    T = a.shape[1]
    if T < 2 or a.shape[0] != T:
        raise ValueError("forgetting needs a square matrix with at least two tasks")
    gaps = []
    for t in range(T - 1):
        interim = a[t, t:T - 1]
        if np.any(np.isnan(interim)) or np.isnan(a[t, T - 1]):
            raise ValueError(f"row {t} of the accuracy matrix is incomplete")
        gaps.append(interim.max() - a[t, T - 1])
    return float(np.mean(gaps))


def offdiag_mean(a) -> float:
    """Mean of defined cells strictly above the diagonal (earlier tasks, later checkpoints)."""
    a = np.asarray(a, dtype=np.float64)
    iu = np.triu_indices(a.shape[0], k=1)
    vals = a[iu]
    return float(np.nanmean(vals)) if vals.size else float("nan")


def aggregate_novel_composition(per_fold: dict[int, dict[str, float]], K: int,
                                seen: dict[int, dict[str, float]] | None = None) -> dict:
    """Unweighted mean over K folds of per-skill novel-composition accuracy.

    ``per_fold[fold][skill]`` -> accuracy. With ``seen`` supplied in the same
    layout, the per-skill seen-minus-novel gap is reported too.
    """
    missing = [k for k in range(K) if k not in per_fold]
    if missing:
        raise ValueError(f"missing folds: {missing}")
    skills = list(per_fold[0])
    table = {s: [per_fold[k][s] for k in range(K)] for s in skills}
    per_skill = {s: float(np.mean(v)) for s, v in table.items()}
    out = {"table": table, "per_skill": per_skill, "overall": float(np.mean(list(per_skill.values())))}
    if seen is not None:
        miss = [k for k in range(K) if k not in seen]
        if miss:
            raise ValueError(f"missing seen folds: {miss}")
        seen_mean = {s: float(np.mean([seen[k][s] for k in range(K)])) for s in skills}
        out["seen_per_skill"] = seen_mean
        out["gap"] = {s: seen_mean[s] - per_skill[s] for s in skills}
    return out


def matrix_to_csv(a, names: list[str]) -> str:
    """Header row of task names, one row per evaluated task, undefined cells empty."""
    a = np.asarray(a, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task"] + list(names))
    for i, name in enumerate(names):
        w.writerow([name] + ["" if np.isnan(v) else repr(float(v)) for v in a[i]])
    return buf.getvalue()


def matrix_from_csv(text: str) -> tuple[np.ndarray, list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    names = rows[0][1:]
    a = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows[1:]])
    return a, names


def format_percent(x: float) -> str:
    return f"{100.0 * x:.2f}%"
