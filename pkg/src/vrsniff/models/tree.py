"""CART decision trees grown by Gini impurity, compiled with numba.

Trees are stored as flat node arrays. Node 0 is the root; a node with
``feature == -1`` is a leaf. Rows with ``x[feature] <= threshold`` go left.

The split score maximised at a node is ``S_l / n_l + S_r / n_r`` where ``S``
is the sum of squared class counts on each side, which ranks candidate splits
exactly as Gini gain does. Scores within a relative 1e-12 of each other count
as ties; ties go to the lower feature index, then the lower threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..errors import VrsniffError

UNLIMITED_DEPTH = 1 << 30
TIE_RTOL = 1e-12


@numba.njit(cache=True, nogil=True)
def _next(state):
    x = state
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    return x, x * np.uint64(0x2545F4914F6CDD1D)


@numba.njit(cache=True, nogil=True)
def _seed_state(seed):
    z = np.uint64(seed) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    if z == np.uint64(0):
        z = np.uint64(0x9E3779B97F4A7C15)
    return z


@numba.njit(cache=True, nogil=True)
def _grow(X, y, n_classes, samples, max_depth, min_leaf, max_features, seed):
    n = samples.shape[0]
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    counts = np.zeros((cap, n_classes), np.int64)
    idx = samples.copy()
    buf = np.empty(n, np.int64)
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    order = np.arange(d)
    vals = np.empty(n)
    cl = np.zeros(n_classes, np.int64)
    cr = np.zeros(n_classes, np.int64)
    state = _seed_state(seed)

    n_nodes = 1
    sp = 0
    st_node[0], st_lo[0], st_hi[0], st_depth[0] = 0, 0, n, 0
    sp = 1
    while sp > 0:
        sp -= 1
        node, lo, hi, depth = st_node[sp], st_lo[sp], st_hi[sp], st_depth[sp]
        m = hi - lo
        for i in range(lo, hi):
            counts[node, y[idx[i]]] += 1
        sumsq = 0
        for c in range(n_classes):
            sumsq += counts[node, c] * counts[node, c]
        if sumsq == m * m or depth >= max_depth or m < 2 * min_leaf:
            continue

        subsample = max_features < d
        if subsample:
            for i in range(d):
                order[i] = i
            for i in range(d - 1, 0, -1):
                state, r = _next(state)
                j = np.int64((r >> np.uint64(11)) % np.uint64(i + 1))
                order[i], order[j] = order[j], order[i]

        best_f = -1
        best_t = 0.0
        best_s = -1.0
        evaluated = 0
        for fi in range(d):
            if subsample and evaluated >= max_features:
                break
            f = order[fi]
            for i in range(m):
                vals[i] = X[idx[lo + i], f]
            srt = np.argsort(vals[:m], kind="mergesort")
            if vals[srt[0]] == vals[srt[m - 1]]:
                continue
            evaluated += 1
            for c in range(n_classes):
                cl[c] = 0
                cr[c] = counts[node, c]
            s_l = 0
            s_r = sumsq
            for j in range(m - 1):
                c = y[idx[lo + srt[j]]]
                s_l += 2 * cl[c] + 1
                cl[c] += 1
                s_r -= 2 * cr[c] - 1
                cr[c] -= 1
                v0 = vals[srt[j]]
                v1 = vals[srt[j + 1]]
                if v0 == v1:
                    continue
                n_l = j + 1
                n_r = m - n_l
                if n_l < min_leaf or n_r < min_leaf:
                    continue
                score = s_l / n_l + s_r / n_r
                t = (v0 + v1) / 2.0
                if t >= v1:
                    t = v0
                if best_f < 0 or score > best_s * (1.0 + 1e-12):
                    take = True
                elif score >= best_s * (1.0 - 1e-12):
                    take = f < best_f or (f == best_f and t < best_t)
                else:
                    take = False
                if take:
                    best_f, best_t, best_s = f, t, score
        if best_f < 0:
            continue

        n_l = 0
        for i in range(lo, hi):
            if X[idx[i], best_f] <= best_t:
                buf[n_l] = idx[i]
                n_l += 1
        k = n_l
        for i in range(lo, hi):
            if not X[idx[i], best_f] <= best_t:
                buf[k] = idx[i]
                k += 1
        for i in range(m):
            idx[lo + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[sp], st_lo[sp], st_hi[sp], st_depth[sp] = n_nodes + 1, lo + n_l, hi, depth + 1
        st_node[sp + 1], st_lo[sp + 1], st_hi[sp + 1], st_depth[sp + 1] = n_nodes, lo, lo + n_l, depth + 1
        sp += 2
        n_nodes += 2

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), counts[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _apply(feature, threshold, left, right, X):
    out = np.empty(X.shape[0], np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass
class TreeArrays:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # class counts of training rows reaching each node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def prediction(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lexicographically smallest label
        return self.counts.argmax(axis=1)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return _apply(self.feature, self.threshold, self.left, self.right, np.ascontiguousarray(X, dtype=float))

    def to_json(self) -> dict:
        leaves = np.flatnonzero(self.is_leaf)
        return {
            "feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
            "left": self.left.tolist(), "right": self.right.tolist(),
            "leaf_counts": {str(i): {str(c): int(v) for c, v in enumerate(self.counts[i]) if v}
                            for i in leaves.tolist()},
        }

    @classmethod
    def from_json(cls, doc: dict, n_classes: int) -> "TreeArrays":
        feature = np.asarray(doc["feature"], np.int32)
        counts = np.zeros((len(feature), n_classes), np.int64)
        for node, cc in doc["leaf_counts"].items():
            for c, v in cc.items():
                counts[int(node), int(c)] = v
        return cls(feature, np.asarray(doc["threshold"], float), np.asarray(doc["left"], np.int32),
                   np.asarray(doc["right"], np.int32), counts)


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, samples: np.ndarray | None = None,
              max_depth: int | None = None, min_leaf: int = 1, max_features: int | None = None,
              seed: int = 0) -> TreeArrays:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if len(X) == 0:
        raise VrsniffError("EMPTY_DATASET", "cannot grow a tree on zero rows")
    samples = np.arange(len(X), dtype=np.int64) if samples is None else np.asarray(samples, np.int64)
    d = X.shape[1]
    arrays = _grow(X, y, n_classes, samples, UNLIMITED_DEPTH if max_depth is None else max_depth,
                   max(int(min_leaf), 1), d if max_features is None else min(int(max_features), d), seed)
    return TreeArrays(*arrays)


class DecisionTree:
    """Single CART classifier over integer class indices."""

    kind = "tree"

    def __init__(self, max_depth: int | None = None, min_leaf: int = 1):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.tree: TreeArrays | None = None
        self.n_classes = 0

    def params(self) -> dict:
        return {"max_depth": self.max_depth, "min_leaf": self.min_leaf}

    def fit(self, X: np.ndarray, y: np.ndarray, n_classes: int) -> "DecisionTree":
        self.n_classes = n_classes
        self.tree = grow_tree(X, y, n_classes, max_depth=self.max_depth, min_leaf=self.min_leaf)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.tree.prediction[self.tree.apply(X)]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        c = self.tree.counts[self.tree.apply(X)].astype(float)
        return c / c.sum(axis=1, keepdims=True)

    def payload(self) -> dict:
        return self.tree.to_json()

    @classmethod
    def from_payload(cls, params: dict, payload: dict, n_classes: int) -> "DecisionTree":
        model = cls(**params)
        model.n_classes = n_classes
        model.tree = TreeArrays.from_json(payload, n_classes)
        return model


def warmup() -> None:
    """Compile (or load from cache) the kernels so later timings exclude JIT cost."""
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    tree = grow_tree(X, np.array([0, 0, 1, 1]), 2, max_features=1, seed=1)
    tree.apply(X)
