"""Subgroup selection by centroid similarity.

Each class i has G candidate subgroups with unit centroids c[i, g] and a unit
reference centroid r[i] built from real data. The objective for an
assignment ``g = (g_0, ..., g_{C-1})`` is

    alpha * sum_i log(1 - cos(c[i, g_i], r[i]))
      - beta / ((C - 1) G) * sum_i sum_{j != i} sum_h log(1 - cos(c[i, g_i], c[j, h]))

The repulsion sum runs over every candidate of the other classes, not just
the chosen ones, so the objective is a sum of per-class terms and the
per-class argmin is the global argmin. Indices are 0-based; ties go to the
lexicographically smallest assignment.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion_engine import sample as ddim_sample
from .math_core import Rng, cosine_similarity

CLAMP_LO = 1e-9
CLAMP_HI = 2.0
MAX_BRUTEFORCE = 10**6


class DegenerateCentroid(ValueError):
    pass


class SearchSpaceTooLarge(ValueError):
    pass


def _unit_mean(X, what: str) -> np.ndarray:
    m = np.asarray(X, dtype=np.float64).mean(axis=0)
    nm = float(np.linalg.norm(m))
    if nm <= 1e-10:
        raise DegenerateCentroid(f"{what}: mean feature has norm {nm:.3g}")
    return m / nm


def real_centroid(features, K_i: int | None = None, rng: Rng | None = None) -> np.ndarray:
    """Normalized mean of K_i feature vectors drawn without replacement (all of them if K_i is None)."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if K_i is None or K_i == len(F):
        chosen = F
    elif K_i > len(F) or K_i < 1:
        raise ValueError(f"K_i={K_i} but {len(F)} features available")
    else:
        idx = rng.choice(len(F), K_i) if rng is not None else np.arange(K_i)
        chosen = F[idx]
    return _unit_mean(chosen, "reference centroid")


def subgroup_centroid(subgroup) -> np.ndarray:
    return _unit_mean(np.atleast_2d(subgroup), "subgroup centroid")


@dataclass
class CandidatePool:
    centroids: np.ndarray  # (C, G, f), unit rows
    real_centroids: np.ndarray  # (C, f), unit rows
    K: int = 0
    K_i: int = 0
    members: np.ndarray | None = None  # (C, G, K, d) latents
    member_features: np.ndarray | None = None  # (C, G, K, f)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.real_centroids = np.asarray(self.real_centroids, dtype=np.float64)
        C, G, f = self.centroids.shape
        if C < 1 or G < 1:
            raise ValueError("pool needs C >= 1 and G >= 1")
        if self.real_centroids.shape != (C, f):
            raise ValueError(f"real centroids shape {self.real_centroids.shape} != {(C, f)}")
        if not (np.allclose(np.linalg.norm(self.centroids, axis=2), 1.0, atol=1e-10, rtol=0)
                and np.allclose(np.linalg.norm(self.real_centroids, axis=1), 1.0, atol=1e-10, rtol=0)):
            raise ValueError("centroids must be unit norm")

    @property
    def C(self) -> int:
        return self.centroids.shape[0]

    @property
    def G(self) -> int:
        return self.centroids.shape[1]

    def subgroup(self, i: int, g: int) -> np.ndarray:
        return self.members[i, g]

    def to_csv(self, centroid_path, member_path=None) -> None:
        with open(Path(centroid_path), "w", newline="") as fh:
            w = csv.writer(fh)
            f = self.centroids.shape[2]
            w.writerow(["class", "subgroup"] + [f"c_{k + 1}" for k in range(f)])
            for i in range(self.C):
                w.writerow([i, "real"] + [repr(float(v)) for v in self.real_centroids[i]])
                for g in range(self.G):
                    w.writerow([i, g] + [repr(float(v)) for v in self.centroids[i, g]])
        if member_path is not None and self.member_features is not None:
            with open(Path(member_path), "w", newline="") as fh:
                w = csv.writer(fh)
                f = self.member_features.shape[3]
                w.writerow(["class", "subgroup", "member"] + [f"f_{k + 1}" for k in range(f)])
                for i, g, k in np.ndindex(self.member_features.shape[:3]):
                    w.writerow([i, g, k] + [repr(float(v)) for v in self.member_features[i, g, k]])

    @classmethod
    def from_csv(cls, centroid_path) -> "CandidatePool":
        with open(Path(centroid_path), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        real, cand = {}, {}
        for r in rows:
            vec = [float(v) for v in r[2:]]
            if r[1] == "real":
                real[int(r[0])] = vec
            else:
                cand[(int(r[0]), int(r[1]))] = vec
        C = len(real)
        G = max(g for _, g in cand) + 1
        cents = np.array([[cand[(i, g)] for g in range(G)] for i in range(C)])
        return cls(cents, np.array([real[i] for i in range(C)]))


@dataclass
class SelectionAssignment:
    g: list[int]
    objective_value: float
    per_class: list[float] = field(default_factory=list)

    def to_json(self, path=None) -> str:
        text = json.dumps({"assignment": {str(i): int(gi) for i, gi in enumerate(self.g)},
                           "objective": self.objective_value}, indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _log_gap(cos, floor: float = CLAMP_LO):
    return np.log(np.clip(1.0 - cos, floor, CLAMP_HI))


def class_terms(pool: CandidatePool, alpha: float, beta: float, floor: float = CLAMP_LO) -> np.ndarray:
    """(C, G) table: contribution of class i to the objective when it picks subgroup g."""
    C, G, _ = pool.centroids.shape
    attract = _log_gap(np.einsum("igf,if->ig", pool.centroids, pool.real_centroids), floor)
    terms = alpha * attract
    if C > 1:
        # cross[i, g, j, h] = cos(c[i, g], c[j, h])
        cross = np.einsum("igf,jhf->igjh", pool.centroids, pool.centroids)
        rep = _log_gap(np.clip(cross, -1.0, 1.0), floor)
        mask = 1.0 - np.eye(C)
        repel = np.einsum("igjh,ij->ig", rep, mask)
        terms = terms - beta / ((C - 1) * G) * repel
    return terms


def selection_objective(pool: CandidatePool, g, alpha: float, beta: float, floor: float = CLAMP_LO) -> float:
    """Objective value of assignment ``g``, evaluated term by term."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be > 0")
    C, G = pool.C, pool.G
    g = [int(v) for v in g]
    if len(g) != C or any(not 0 <= v < G for v in g):
        raise ValueError(f"invalid assignment {g} for C={C}, G={G}")

    def gap(a, b):
        return float(np.log(min(max(1.0 - cosine_similarity(a, b), floor), CLAMP_HI)))

    first = sum(gap(pool.centroids[i, g[i]], pool.real_centroids[i]) for i in range(C))
    second = 0.0
    if C > 1:
        for i in range(C):
            for j in range(C):
                if j == i:
                    continue
                for h in range(G):
                    second += gap(pool.centroids[i, g[i]], pool.centroids[j, h])
        second *= beta / ((C - 1) * G)
    return alpha * first - second


def select_greedy(pool: CandidatePool, alpha: float, beta: float, floor: float = CLAMP_LO) -> SelectionAssignment:
    """Exact minimizer via per-class argmin (first index on ties)."""
    terms = class_terms(pool, alpha, beta, floor)
    g = [int(v) for v in np.argmin(terms, axis=1)]
    return SelectionAssignment(g, selection_objective(pool, g, alpha, beta, floor),
                               [float(terms[i, gi]) for i, gi in enumerate(g)])


def select_bruteforce(pool: CandidatePool, alpha: float, beta: float, floor: float = CLAMP_LO) -> SelectionAssignment:
    """Exhaustive search over all G**C assignments in lexicographic order."""
    if pool.G ** pool.C > MAX_BRUTEFORCE:
        raise SearchSpaceTooLarge(f"G**C = {pool.G ** pool.C} exceeds {MAX_BRUTEFORCE}")
    best, best_val = None, np.inf
    for g in itertools.product(range(pool.G), repeat=pool.C):
        val = selection_objective(pool, g, alpha, beta, floor)
        if val < best_val:
            best, best_val = list(g), val
    return SelectionAssignment(best, best_val)


def select_random(pool: CandidatePool, rng: Rng) -> list[int]:
    return [int(v) for v in rng.integers(0, pool.G, size=pool.C)]


def reference_centroids(real_features_by_class, K_i: int | None, rng: Rng) -> np.ndarray:
    return np.array([real_centroid(F, K_i, rng) for F in real_features_by_class])


def with_reference(pool: CandidatePool, real_features_by_class, K_i: int | None, rng: Rng) -> CandidatePool:
    """Same candidates, reference centroids recomputed from K_i real samples per class."""
    reals = reference_centroids(real_features_by_class, K_i, rng)
    kf = K_i if K_i is not None else min(len(f) for f in real_features_by_class)
    return CandidatePool(pool.centroids, reals, pool.K, kf, pool.members, pool.member_features)


def build_pool(schedule, params, real_features_by_class, feature_extractor, G: int, K: int,
               K_i: int | None, rng: Rng, n_steps: int = 50) -> CandidatePool:
    """Sample G*K latents per class, embed them and compute all centroids."""
    C = len(real_features_by_class)
    gen_rng = rng.spawn("candidates")
    members, feats, cents = [], [], []
    for i in range(C):
        Z = ddim_sample(schedule, params, gen_rng, i, n_steps, n=G * K)
        F = feature_extractor(Z)
        members.append(Z.reshape(G, K, -1))
        feats.append(F.reshape(G, K, -1))
        cents.append([subgroup_centroid(F[g * K:(g + 1) * K]) for g in range(G)])
    reals = reference_centroids(real_features_by_class, K_i, rng.spawn("reference"))
    kf = K_i if K_i is not None else min(len(f) for f in real_features_by_class)
    return CandidatePool(np.array(cents), reals, K, kf, np.array(members), np.array(feats))
