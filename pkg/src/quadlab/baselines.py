"""Method registry and the EWC pieces.

Every method runs through the same trainer; a ``MethodSpec`` only says
which extra terms the step adds and which memory it keeps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .benchmark import TripletSet
from .model import Model


@dataclass(frozen=True)
class MethodSpec:
    name: str
    pseudo_label: bool = False
    attention: str | None = None   # "ce", "l1", "asym" or None
    replay: str | None = None      # "questions", "triplets" or None
    ewc: bool = False
    joint: bool = False

    @property
    def distills(self) -> bool:
        return self.pseudo_label or self.attention is not None


METHODS: dict[str, MethodSpec] = {m.name: m for m in (
    MethodSpec("vanilla"),
    MethodSpec("joint", joint=True),
    MethodSpec("er", replay="triplets"),
    MethodSpec("ewc", ewc=True),
    MethodSpec("quad", pseudo_label=True, attention="ce", replay="questions"),
    MethodSpec("quad_pl_only", pseudo_label=True, replay="questions"),
    MethodSpec("quad_att_only", attention="ce", replay="questions"),
    MethodSpec("quad_l1", pseudo_label=True, attention="l1", replay="questions"),
    MethodSpec("quad_asym", pseudo_label=True, attention="asym", replay="questions"),
)}


def method_spec(name: str) -> MethodSpec:
    try:
        return METHODS[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}") from None


@dataclass
class FisherDiag:
    importance: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]


def estimate_fisher(model: Model, data: TripletSet, n_samples: int,
                    rng: np.random.Generator) -> FisherDiag:
    """Mean squared gradient of log p(argmax | x, q) over single-sample passes."""
    if n_samples <= 0 or len(data) == 0:
        raise ValueError("Fisher estimate needs at least one sample")
    idx = rng.choice(len(data), size=min(n_samples, len(data)), replace=False)
    params = model.params
    acc = {k: np.zeros_like(p.data) for k, p in params.items()}
    for i in idx:
        ad.zero_grads(params.values())
        logits, _ = model(data.features[i:i + 1], data.questions[i:i + 1])
        pred = int(np.argmax(logits.data[0]))
        target = np.zeros_like(logits.data)
        target[0, pred] = 1.0
        # CE against the own prediction is -log p(pred): same squared gradient
        ad.backward(ad.cross_entropy_soft(logits, target))
        for k, p in params.items():
            acc[k] += p.grad * p.grad
    ad.zero_grads(params.values())
    n = len(idx)
    return FisherDiag({k: v / n for k, v in acc.items()},
                      {k: p.data.copy() for k, p in params.items()})


def ewc_penalty(params: dict[str, Tensor], fishers: list[FisherDiag]) -> Tensor:
    """sum over stored tasks and entries of F * (theta - theta*)^2."""
    if not fishers:
        raise ValueError("no Fisher estimates stored")
    out = None
    for f in fishers:
        for k, p in params.items():
            d = ad.sub(p, Tensor(f.anchor[k]))
            term = ad.sum_(ad.mul(Tensor(f.importance[k]), ad.mul(d, d)))
            out = term if out is None else ad.add(out, term)
    return out


def ewc_penalty_value(params: dict[str, np.ndarray], fishers: list[FisherDiag]) -> float:
    return float(sum((f.importance[k] * (params[k] - f.anchor[k]) ** 2).sum()
                     for f in fishers for k in params))
