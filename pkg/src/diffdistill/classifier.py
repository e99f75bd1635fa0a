"""One-hidden-layer tanh softmax classifier shared by the feature extractor and the evaluator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .math_core import AdamWState, Rng, adamw_step


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MLPClassifier:
    params: dict[str, np.ndarray]

    @property
    def n_classes(self) -> int:
        return self.params["W2"].shape[0]

    def hidden(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.tanh(X @ self.params["W1"].T + self.params["b1"])

    def logits(self, X) -> np.ndarray:
        return self.hidden(X) @ self.params["W2"].T + self.params["b2"]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def init_classifier(in_dim: int, n_classes: int, hidden: int, rng: Rng) -> MLPClassifier:
    return MLPClassifier({
        "W1": rng.normal((hidden, in_dim)) / np.sqrt(in_dim),
        "b1": np.zeros(hidden),
        "W2": rng.normal((n_classes, hidden)) / np.sqrt(hidden),
        "b2": np.zeros(n_classes),
    })


def loss_and_grads(clf: MLPClassifier, X, y):
    """Mean softmax cross-entropy and its gradients."""
    P = clf.params
    n = len(y)
    H = np.tanh(X @ P["W1"].T + P["b1"])
    logits = H @ P["W2"].T + P["b2"]
    logits = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    prob = expl / expl.sum(axis=1, keepdims=True)
    loss = -float(np.mean(np.log(prob[np.arange(n), y])))
    G = prob
    G[np.arange(n), y] -= 1.0
    G /= n
    gH = (G @ P["W2"]) * (1.0 - H * H)
    grads = {"W2": G.T @ H, "b2": G.sum(axis=0), "W1": gH.T @ X, "b1": gH.sum(axis=0)}
    return loss, grads


def train_classifier(X, y, n_classes: int, rng: Rng, hidden: int = 32, epochs: int = 100,
                     batch_size: int = 32, lr: float = 1e-2, weight_decay: float = 0.0) -> MLPClassifier:
    """Minibatch AdamW on cross-entropy with a fixed epoch budget."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty training set")
    clf = init_classifier(X.shape[1], n_classes, hidden, rng)
    opt = AdamWState(lr=lr, weight_decay=weight_decay)
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grads(clf, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"classifier loss became {loss}")
            clf.params, opt = adamw_step(clf.params, grads, opt)
    return clf
