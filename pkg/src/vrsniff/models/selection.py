"""Stratified k-fold cross-validation and exhaustive grid search."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import VrsniffError
from ..features import FeatureDataset
from ..metrics import EvalReport, evaluate_predictions
from .trained import FeatureConfig, ModelSpec, TrainedModel


def stratified_folds(labels, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per row.

    Each class is shuffled and the classes are laid end to end, then dealt
    round-robin; every fold gets floor or ceil of ``n_class / folds`` rows of
    each class and floor or ceil of ``n / folds`` rows overall.
    """
    labels = np.asarray(labels, dtype=object)
    if folds < 2:
        raise VrsniffError("TOO_FEW_SAMPLES", "need at least 2 folds")
    if len(labels) < folds:
        raise VrsniffError("TOO_FEW_SAMPLES", f"{len(labels)} rows cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in sorted(set(labels))])
    fold = np.empty(len(labels), dtype=np.int64)
    fold[order] = np.arange(len(order)) % folds
    return fold


@dataclass
class CvResult:
    reports: list[EvalReport]
    fold_of: np.ndarray

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.reports])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std_accuracy(self) -> float:
        return float(self.accuracies.std())


def cross_validate(dataset: FeatureDataset, spec: ModelSpec, target: str = "activity", folds: int = 5,
                   seed: int = 0, feature_config: FeatureConfig | None = None) -> CvResult:
    y = dataset.labels(target)
    fold_of = stratified_folds(y, folds, seed)
    reports = []
    for f in range(folds):
        val = fold_of == f
        model = TrainedModel.fit(dataset.take(np.flatnonzero(~val)), spec, target, feature_config)
        held = dataset.take(np.flatnonzero(val))
        reports.append(evaluate_predictions(list(held.labels(target)), list(model.predict(held)), model.codec.labels))
    return CvResult(reports, fold_of)


def expand_grid(grid) -> list[dict]:
    """A dict of value lists becomes its Cartesian product (key order kept); a list passes through."""
    if isinstance(grid, dict):
        keys = list(grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    return [dict(p) for p in grid]


@dataclass
class TuneResult:
    best_params: dict
    best_score: float
    table: list[dict]


def tune(dataset: FeatureDataset, spec: ModelSpec, grid, target: str = "activity", folds: int = 5,
         seed: int = 0) -> TuneResult:
    points = expand_grid(grid)
    if not points:
        raise VrsniffError("BAD_CONFIG", "empty hyperparameter grid")
    table = []
    best = None
    for params in points:
        cv = cross_validate(dataset, spec.with_params(**params), target, folds, seed)
        table.append({"params": params, "mean_accuracy": cv.mean_accuracy, "std_accuracy": cv.std_accuracy})
        if best is None or cv.mean_accuracy > best["mean_accuracy"]:
            best = table[-1]
    return TuneResult(best["params"], best["mean_accuracy"], table)
