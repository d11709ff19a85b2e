"""Confusion matrices and the scalar metrics derived from them."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import VrsniffError


@dataclass
class EvalReport:
    labels: list[str]
    confusion_matrix: np.ndarray  # rows: true class, columns: predicted class
    accuracy: float
    macro_precision: float
    macro_recall: float
    per_class_accuracy: dict[str, float]
    timing: dict = field(default_factory=dict)
    resources: dict = field(default_factory=dict)

    def to_json(self, with_costs: bool = True) -> dict:
        doc = {
            "labels": list(self.labels),
            "confusion_matrix": self.confusion_matrix.tolist(),
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "per_class_accuracy": dict(self.per_class_accuracy),
        }
        if with_costs:
            doc["timing"] = dict(self.timing)
            doc["resources"] = dict(self.resources)
        return doc


def confusion_matrix(y_true, y_pred, labels) -> np.ndarray:
    index = {lab: i for i, lab in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[index[t], index[p]] += 1
    return cm


def accuracy_from_cm(cm: np.ndarray) -> float:
    return float(Fraction(int(np.trace(cm)), int(cm.sum())))


def _macro_mean(diag, totals) -> float:
    # mean of per-class ratios in exact arithmetic, rounded once, so the scalar
    # is reproducible bit-for-bit from the matrix
    ratios = [Fraction(int(d), int(t)) for d, t in zip(diag, totals) if t > 0]
    return float(sum(ratios) / len(ratios)) if ratios else 0.0


def macro_precision_from_cm(cm: np.ndarray) -> float:
    return _macro_mean(np.diag(cm), cm.sum(axis=0))


def macro_recall_from_cm(cm: np.ndarray) -> float:
    return _macro_mean(np.diag(cm), cm.sum(axis=1))


def report_from_cm(cm: np.ndarray, labels) -> EvalReport:
    if cm.sum() == 0:
        raise VrsniffError("EMPTY_TEST_SET", "no test rows")
    row = cm.sum(axis=1)
    per_class = {lab: float(cm[i, i]) / float(row[i]) for i, lab in enumerate(labels) if row[i] > 0}
    return EvalReport(list(labels), cm, accuracy_from_cm(cm), macro_precision_from_cm(cm),
                      macro_recall_from_cm(cm), per_class)


def evaluate_predictions(y_true, y_pred, labels=None) -> EvalReport:
    """Build a report; the label set defaults to every label seen on either side."""
    if len(y_true) == 0:
        raise VrsniffError("EMPTY_TEST_SET", "no test rows")
    if labels is None:
        labels = sorted(set(y_true) | set(y_pred))
    else:
        labels = sorted(set(labels) | set(y_true) | set(y_pred))
    return report_from_cm(confusion_matrix(y_true, y_pred, labels), labels)
