"""Hard-label evaluation: train a fresh classifier on a (distilled) set, score on real test data."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifier import train_classifier
from .datasets_features import LabeledDataset
from .math_core import Rng


@dataclass(frozen=True)
class EvalRecipe:
    hidden: int = 32
    epochs: int = 100
    batch_size: int = 10
    lr: float = 1e-2
    weight_decay: float = 0.0

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    method: str
    accuracies: list[float]
    seeds: list[int]
    fingerprint: str
    ipc: int | None = None
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        acc = np.asarray(self.accuracies, dtype=np.float64)
        self.mean = float(acc.mean())
        self.std = float(acc.std())  # population std over seeds


def train_and_eval(train_set: LabeledDataset, test_set: LabeledDataset, seed: int,
                   recipe: EvalRecipe = EvalRecipe()) -> float:
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("train and test sets must be nonempty")
    n_classes = max(train_set.n_classes, test_set.n_classes)
    clf = train_classifier(train_set.X, train_set.y, n_classes, Rng(seed), hidden=recipe.hidden,
                           epochs=recipe.epochs, batch_size=recipe.batch_size, lr=recipe.lr,
                           weight_decay=recipe.weight_decay)
    return clf.accuracy(test_set.X, test_set.y)


def compare_methods(methods: dict[str, LabeledDataset], test_set: LabeledDataset, seeds: list[int],
                    recipe: EvalRecipe = EvalRecipe(), ipc: int | None = None) -> list[EvalReport]:
    """One report per method, all trained with the same recipe and seeds."""
    if not methods:
        raise ValueError("need at least one method")
    fp = recipe.fingerprint()
    return [EvalReport(name, [train_and_eval(ds, test_set, s, recipe) for s in seeds], list(seeds), fp, ipc)
            for name, ds in methods.items()]


def write_results_csv(path, reports: list[EvalReport]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "ipc", "seed", "accuracy"])
        for r in reports:
            for s, a in zip(r.seeds, r.accuracies):
                w.writerow([r.method, r.ipc, s, repr(float(a))])


def write_summary_csv(path, reports: list[EvalReport]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "ipc", "mean", "std"])
        for r in reports:
            w.writerow([r.method, r.ipc, repr(r.mean), repr(r.std)])
