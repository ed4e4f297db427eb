"""Balanced cross-entropy, confusion matrices and challenge metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import List, Sequence

import numpy as np
import torch

from .dataset import EXPRESSIONS, NUM_CLASSES

ACCURACY_COEF = 0.33
F1_COEF = 0.67


def balanced_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Class-weighted cross-entropy normalized by the sum of the sample weights.

    ``loss = sum_i w[y_i] * -log softmax(logits_i)[y_i] / sum_i w[y_i]``
    """
    k = logits.shape[-1]
    labels = labels.long()
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    weights = weights.to(dtype=logits.dtype, device=logits.device)
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    nll = -log_probs.gather(-1, labels[:, None]).squeeze(-1)
    w = weights[labels]
    return (w * nll).sum() / w.sum()


def _check_labels(values: np.ndarray, k: int, what: str) -> None:
    if values.size and (values.min() < 0 or values.max() >= k):
        raise ValueError(f"{what} must lie in [0, {k})")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    @classmethod
    def empty(cls, num_classes: int = NUM_CLASSES) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash(self.counts.tobytes())


def accumulate(cm: ConfusionMatrix, predictions, labels) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64).ravel()
    truth = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != truth.shape:
        raise ValueError("predictions and labels differ in length")
    k = cm.num_classes
    _check_labels(preds, k, "predictions")
    _check_labels(truth, k, "labels")
    batch = np.bincount(truth * k + preds, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + batch)


def merge(matrices: Sequence[ConfusionMatrix]) -> ConfusionMatrix:
    out = matrices[0]
    for cm in matrices[1:]:
        out = out + cm
    return out


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    tp = np.diag(cm.counts).astype(np.float64)
    precision = _safe_div(tp, cm.counts.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, cm.counts.sum(axis=1).astype(np.float64))
    return _safe_div(2.0 * precision * recall, precision + recall)


def macro_average(values) -> float:
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")


def accuracy(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return float(np.trace(cm.counts)) / cm.total


def macro_f1(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return macro_average(per_class_f1(cm))


def challenge_score(accuracy: float, macro_f1: float) -> float:
    for name, v in (("accuracy", accuracy), ("macro_f1", macro_f1)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    return ACCURACY_COEF * accuracy + F1_COEF * macro_f1


def round3(x: float) -> str:
    """Three-decimal display string, half-even on the decimal representation."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


@dataclass(frozen=True)
class MetricsReport:
    per_class_f1: List[float]
    macro_f1: float
    accuracy: float
    challenge_score: float
    support: List[int]

    def to_dict(self) -> dict:
        return {
            "per_class_f1": list(self.per_class_f1),
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "challenge_score": self.challenge_score,
            "support": list(self.support),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            [float(v) for v in d["per_class_f1"]],
            float(d["macro_f1"]),
            float(d["accuracy"]),
            float(d["challenge_score"]),
            [int(v) for v in d["support"]],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def per_class_table(self) -> str:
        names = EXPRESSIONS if len(self.per_class_f1) == NUM_CLASSES else [str(i) for i in range(len(self.per_class_f1))]
        head = f"{'':<10}" + "".join(f"{n:>11}" for n in names)
        row = f"{'F1 Score':<10}" + "".join(f"{round3(v):>11}" for v in self.per_class_f1)
        return head + "\n" + row + "\n"

    def summary_table(self) -> str:
        head = f"{'Accuracy':>10}{'F1 Score':>12}{'Challenge Score':>17}\n"
        sub = f"{'':>10}{'(macro-avg)':>12}{'':>17}\n"
        row = f"{round3(self.accuracy):>10}{round3(self.macro_f1):>12}{round3(self.challenge_score):>17}\n"
        return head + sub + row


def build_report(cm: ConfusionMatrix) -> MetricsReport:
    _require_nonempty(cm)
    f1 = per_class_f1(cm)
    acc = accuracy(cm)
    mf1 = macro_average(f1)
    return MetricsReport(
        per_class_f1=[float(v) for v in f1],
        macro_f1=mf1,
        accuracy=acc,
        challenge_score=challenge_score(acc, mf1),
        support=[int(v) for v in cm.counts.sum(axis=1)],
    )
