"""Bagged forest of CART trees with per-split feature subsampling."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..errors import VrsniffError
from .tree import TreeArrays, grow_tree


class RandomForest:
    """Majority-vote forest.

    Tree ``i`` draws its bootstrap sample from ``numpy.random.default_rng(seed + i)``
    and its split-feature order from a xorshift stream seeded with ``seed + i``,
    so the forest is a pure function of (data, seed, hyperparameters) no matter
    how many worker threads build it.
    """

    kind = "forest"

    def __init__(self, n_trees: int = 300, max_depth: int | None = None, min_leaf: int = 1,
                 max_features: int | str | None = "sqrt", bootstrap: bool = True, seed: int = 0,
                 threads: int | None = None):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.seed = seed
        self.threads = threads
        self.trees: list[TreeArrays] = []
        self.n_classes = 0

    def params(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth, "min_leaf": self.min_leaf,
                "max_features": self.max_features, "bootstrap": self.bootstrap, "seed": self.seed}

    def _features_per_split(self, d: int) -> int:
        if self.max_features == "sqrt":
            return math.ceil(math.sqrt(d))
        if self.max_features is None:
            return d
        return min(int(self.max_features), d)

    def fit(self, X: np.ndarray, y: np.ndarray, n_classes: int) -> "RandomForest":
        X = np.ascontiguousarray(X, dtype=float)
        y = np.ascontiguousarray(y, dtype=np.int64)
        if len(X) == 0:
            raise VrsniffError("EMPTY_DATASET", "cannot train a forest on zero rows")
        n, d = X.shape
        k = self._features_per_split(d)
        self.n_classes = n_classes

        def one(i: int) -> TreeArrays:
            tree_seed = self.seed + i
            samples = np.random.default_rng(tree_seed).integers(0, n, n) if self.bootstrap else None
            return grow_tree(X, y, n_classes, samples, self.max_depth, self.min_leaf, k, tree_seed)

        workers = self.threads or os.cpu_count() or 1
        if workers == 1:
            self.trees = [one(i) for i in range(self.n_trees)]
        else:
            with ThreadPoolExecutor(workers) as pool:
                self.trees = list(pool.map(one, range(self.n_trees)))  # map keeps tree-index order
        return self

    def tree_predictions(self, X: np.ndarray) -> np.ndarray:
        """(n_trees, n_rows) matrix of per-tree class predictions."""
        X = np.ascontiguousarray(X, dtype=float)
        return np.stack([t.prediction[t.apply(X)] for t in self.trees])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        preds = self.tree_predictions(X)
        votes = np.zeros((preds.shape[1], self.n_classes))
        rows = np.arange(preds.shape[1])
        for p in preds:
            votes[rows, p] += 1
        return votes / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def payload(self) -> dict:
        return {"trees": [t.to_json() for t in self.trees]}

    @classmethod
    def from_payload(cls, params: dict, payload: dict, n_classes: int) -> "RandomForest":
        model = cls(**params)
        model.n_classes = n_classes
        model.trees = [TreeArrays.from_json(t, n_classes) for t in payload["trees"]]
        return model
