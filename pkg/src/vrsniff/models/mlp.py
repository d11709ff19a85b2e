"""Multi-layer perceptron: ReLU hidden layers, softmax output, cross-entropy loss."""
from __future__ import annotations

import math

import numpy as np

from ..errors import VrsniffError


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_params(sizes, rng: np.random.Generator):
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def forward(weights, biases, X):
    """Return the list of layer activations, input first and softmax last."""
    acts = [X]
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = acts[-1] @ W + b
        acts.append(softmax(z) if i == len(weights) - 1 else np.maximum(z, 0.0))
    return acts


def loss_and_grads(weights, biases, X, y, n_classes):
    """Mean cross-entropy of integer targets ``y`` and its parameter gradients."""
    acts = forward(weights, biases, X)
    probs = acts[-1]
    n = len(X)
    loss = -np.mean(np.log(np.clip(probs[np.arange(n), y], 1e-300, None)))
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw, gb = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


class Mlp:
    """Mini-batch gradient descent with momentum; expects standardised inputs."""

    kind = "mlp"

    def __init__(self, hidden=(64, 32), epochs: int = 200, lr: float = 0.05, batch_size: int = 64,
                 momentum: float = 0.9, seed: int = 0):
        self.hidden = tuple(hidden)
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.seed = seed
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self.n_classes = 0
        self.final_loss = math.nan

    def params(self) -> dict:
        return {"hidden": list(self.hidden), "epochs": self.epochs, "lr": self.lr,
                "batch_size": self.batch_size, "momentum": self.momentum, "seed": self.seed}

    def fit(self, X: np.ndarray, y: np.ndarray, n_classes: int) -> "Mlp":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=np.int64)
        if len(X) == 0:
            raise VrsniffError("EMPTY_DATASET", "cannot train an MLP on zero rows")
        self.n_classes = n_classes
        rng = np.random.default_rng(self.seed)
        self.weights, self.biases = init_params((X.shape[1],) + self.hidden + (n_classes,), rng)
        vw = [np.zeros_like(w) for w in self.weights]
        vb = [np.zeros_like(b) for b in self.biases]
        n = len(X)
        for _ in range(self.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                batch = perm[start:start + self.batch_size]
                loss, gw, gb = loss_and_grads(self.weights, self.biases, X[batch], y[batch], n_classes)
                if not math.isfinite(loss):
                    raise VrsniffError("NONFINITE_LOSS", f"loss diverged; lower the learning rate (lr={self.lr})")
                total += loss * len(batch)
                for i in range(len(self.weights)):
                    vw[i] = self.momentum * vw[i] - self.lr * gw[i]
                    vb[i] = self.momentum * vb[i] - self.lr * gb[i]
                    self.weights[i] += vw[i]
                    self.biases[i] += vb[i]
            self.final_loss = total / n
        if not all(np.isfinite(w).all() for w in self.weights):
            raise VrsniffError("NONFINITE_LOSS", "weights diverged")
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return forward(self.weights, self.biases, np.asarray(X, dtype=float))[-1]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def payload(self) -> dict:
        return {"weights": [w.tolist() for w in self.weights], "biases": [b.tolist() for b in self.biases],
                "final_loss": self.final_loss}

    @classmethod
    def from_payload(cls, params: dict, payload: dict, n_classes: int) -> "Mlp":
        model = cls(**params)
        model.n_classes = n_classes
        model.weights = [np.asarray(w, float) for w in payload["weights"]]
        model.biases = [np.asarray(b, float) for b in payload["biases"]]
        model.final_loss = payload.get("final_loss", math.nan)
        return model
