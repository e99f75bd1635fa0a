"""Synthetic Gaussian-mixture data, the frozen feature encoder and dataset containers."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import MLPClassifier, train_classifier
from .math_core import Rng, normalize_rows


@dataclass
class GmmSpec:
    C: int = 5
    d: int = 8
    mean_scale: float = 2.0
    scale: float = 1.0  # isotropic standard deviation around each mean
    n_train: int = 500
    n_test: int = 200
    means: list[list[float]] | None = None

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            M = np.asarray(self.means, dtype=np.float64)
        elif self.C <= self.d:
            # scaled simplex: vertex i on axis i
            M = self.mean_scale * np.eye(self.C, self.d)
        else:
            ang = 2 * np.pi * np.arange(self.C) / self.C
            M = np.zeros((self.C, self.d))
            M[:, 0] = self.mean_scale * np.cos(ang)
            M[:, 1 % self.d] += self.mean_scale * np.sin(ang)
        if M.shape != (self.C, self.d):
            raise ValueError(f"means must have shape ({self.C}, {self.d}), got {M.shape}")
        if len({tuple(m) for m in M}) != self.C:
            raise ValueError("class means must be pairwise distinct")
        return M

    def validate(self) -> None:
        if self.C < 1 or self.d < 1:
            raise ValueError("C and d must be positive")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need n_train >= 1 and n_test >= 0")
        self.class_means()


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    n_classes: int | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise ValueError("X and y differ in length")
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1 if len(self.y) else 0
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("class id out of range")

    def __len__(self):
        return len(self.y)

    def of_class(self, c: int) -> np.ndarray:
        return self.X[self.y == c]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"x_{k + 1}" for k in range(self.X.shape[1])])
            for label, row in zip(self.y, self.X):
                w.writerow([int(label)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, split: str = "train", n_classes: int | None = None) -> "LabeledDataset":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        y = [int(r[0]) for r in body]
        X = [[float(v) for v in r[1:]] for r in body]
        return cls(np.array(X, dtype=np.float64).reshape(len(body), len(rows[0]) - 1), np.array(y, dtype=np.int64),
                   split, n_classes)


def generate_gmm(spec: GmmSpec, rng: Rng) -> tuple[LabeledDataset, LabeledDataset]:
    spec.validate()
    M = spec.class_means()
    parts = {}
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        X = np.concatenate([M[c] + spec.scale * rng.normal((n, spec.d)) for c in range(spec.C)])
        y = np.repeat(np.arange(spec.C), n)
        parts[split] = LabeledDataset(X.reshape(spec.C * n, spec.d), y, split, spec.C)
    return parts["train"], parts["test"]


@dataclass
class FeatureExtractor:
    """Frozen encoder: unit-normalized hidden activations of a trained classifier."""

    classifier: MLPClassifier
    train_accuracy: float = float("nan")

    @property
    def dim(self) -> int:
        return self.classifier.params["W1"].shape[0]

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        H = self.classifier.hidden(X)
        F = normalize_rows(H)
        return F[0] if X.ndim == 1 else F


def fit_feature_extractor(train: LabeledDataset, rng: Rng, hidden: int = 32, epochs: int = 30,
                          batch_size: int = 64, lr: float = 1e-2) -> FeatureExtractor:
    if train.n_classes < 2:
        raise ValueError("feature extractor needs at least 2 classes")
    clf = train_classifier(train.X, train.y, train.n_classes, rng, hidden=hidden, epochs=epochs,
                           batch_size=batch_size, lr=lr)
    return FeatureExtractor(clf, clf.accuracy(train.X, train.y))


def write_feature_csv(path, features: np.ndarray, labels) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f_{k + 1}" for k in range(features.shape[1])])
        for label, row in zip(labels, features):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def make_distilled(selected: list[np.ndarray], ipc: int, n_classes: int | None = None) -> LabeledDataset:
    """Stack one selected (IPC, d) subgroup per class into a labeled distilled set."""
    for c, S in enumerate(selected):
        if len(S) != ipc:
            raise ValueError(f"class {c}: subgroup has {len(S)} samples, expected IPC={ipc}")
    X = np.concatenate([np.asarray(S, dtype=np.float64) for S in selected])
    y = np.repeat(np.arange(len(selected)), ipc)
    return LabeledDataset(X, y, "distilled", n_classes or len(selected))
