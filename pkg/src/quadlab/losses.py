"""Training objective: plasticity CE plus the two distillation terms.

Teacher outputs always enter as plain numpy constants, so nothing can
backpropagate into the teacher.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import AttentionCapture


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"stability weight must be >= 0, got {self.lam}")


@dataclass
class LossBreakdown:
    plasticity: float
    pseudo_label: float
    attention: float
    total: float
    total_tensor: Tensor | None = None

    def row(self) -> tuple[float, float, float, float]:
        return self.plasticity, self.pseudo_label, self.attention, self.total


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def plasticity_loss(logits: Tensor, answers) -> Tensor:
    """Mean CE against one-hot ground truth."""
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    return ad.cross_entropy_soft(logits, one_hot(answers, logits.shape[1]))


def pseudo_label_loss(student_logits: Tensor, teacher_logits) -> Tensor:
    """CE of the student against the teacher's full softmax (no argmax)."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    return ad.cross_entropy_soft(student_logits, softmax_np(t))


def _check_geometry(student: list, teacher: list) -> None:
    if len(student) != len(teacher):
        raise ad.DimensionError(f"{len(student)} student layers vs {len(teacher)} teacher layers")
    for s, t in zip(student, teacher):
        if s.shape != t.shape:
            raise ad.DimensionError(f"attention geometry {s.shape} vs {t.shape}")


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def attention_consistency_loss(student: AttentionCapture, teacher: AttentionCapture) -> Tensor:
    """Row CE between post-softmax maps, flat mean over layers, heads, rows and batch."""
    _check_geometry(student.probs, teacher.probs)
    per_layer = []
    for s, t in zip(student.probs, teacher.probs):
        ce_rows = ad.sum_(ad.mul(Tensor(-_const(t)), ad.log_clamped(s)), axis=-1)
        per_layer.append(ad.mean(ce_rows))
    out = per_layer[0]
    for x in per_layer[1:]:
        out = ad.add(out, x)
    return ad.mul(out, Tensor(1.0 / len(per_layer)))


def _mean_over_layers(student: list, teacher: list, elementwise) -> Tensor:
    _check_geometry(student, teacher)
    out = None
    for s, t in zip(student, teacher):
        term = ad.mean(elementwise(s, Tensor(_const(t))))
        out = term if out is None else ad.add(out, term)
    return ad.mul(out, Tensor(1.0 / len(student)))


def attention_l1_loss(student: AttentionCapture, teacher: AttentionCapture) -> Tensor:
    """Mean |s - t| on raw (pre-softmax) scores."""
    return _mean_over_layers(student.scores, teacher.scores, lambda s, t: ad.abs_(ad.sub(s, t)))


def attention_asym_loss(student: AttentionCapture, teacher: AttentionCapture) -> Tensor:
    """Mean ReLU(t - s) on raw scores: only drops in attention are penalised."""
    return _mean_over_layers(student.scores, teacher.scores, lambda s, t: ad.relu(ad.sub(t, s)))


ATTENTION_LOSSES = {
    "ce": attention_consistency_loss,
    "l1": attention_l1_loss,
    "asym": attention_asym_loss,
}


def total_loss(weights: LossWeights, plasticity: Tensor, pseudo_label: Tensor | None = None,
               attention: Tensor | None = None) -> LossBreakdown:
    """plasticity + lam * (pseudo_label + attention); missing terms count as 0.

    The stability sum is multiplied by lam even when lam is 0, so the
    gradient reduces exactly to the plasticity gradient.
    """
    stab = None
    for term in (pseudo_label, attention):
        if term is not None:
            stab = term if stab is None else ad.add(stab, term)
    total = plasticity if stab is None else ad.add(plasticity, ad.mul(stab, Tensor(weights.lam)))
    return LossBreakdown(
        plasticity=plasticity.item(),
        pseudo_label=0.0 if pseudo_label is None else pseudo_label.item(),
        attention=0.0 if attention is None else attention.item(),
        total=total.item(),
        total_tensor=total,
    )
