"""Finite-difference estimate of the geometric-mean instability coefficient of a map.

For F: R^n -> R^n the coefficient at z is exp(mean_i log ||J_F(z) e_i||),
with {e_i} the standard basis and the Jacobian columns taken by central
differences. Values above 1 mean local expansion.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion_engine import sample_from_noise
from .math_core import Rng
from .schedule import NoiseSchedule


class NonFiniteJacobian(FloatingPointError):
    pass


@dataclass
class InstabilityReport:
    coefficients: np.ndarray
    probes: np.ndarray
    h: float
    n: int

    def summary(self) -> dict:
        q1, med, q3 = np.quantile(self.coefficients, [0.25, 0.5, 0.75])
        return {"n_probes": int(len(self.coefficients)), "dim": self.n, "h": self.h,
                "median": float(med), "q1": float(q1), "q3": float(q3),
                "min": float(self.coefficients.min()), "max": float(self.coefficients.max())}

    def to_files(self, csv_path, json_path) -> None:
        with open(Path(csv_path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe", "coefficient"])
            for i, c in enumerate(self.coefficients):
                w.writerow([i, repr(float(c))])
        Path(json_path).write_text(json.dumps(self.summary(), indent=2) + "\n")


def jacobian_columns(F, z, h: float, batched: bool = False) -> np.ndarray:
    """Central-difference Jacobian (n_out, n). ``batched`` F maps (m, n) -> (m, n_out)."""
    if h <= 0:
        raise ValueError("h must be > 0")
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    E = h * np.eye(n)
    pts = np.concatenate([z + E, z - E])
    if batched:
        out = np.asarray(F(pts), dtype=np.float64)
    else:
        out = np.array([np.asarray(F(p), dtype=np.float64) for p in pts])
    return ((out[:n] - out[n:]) / (2.0 * h)).T


def instability_coefficient(F, z, h: float = 1e-4, batched: bool = False) -> float:
    J = jacobian_columns(F, z, h, batched)
    norms = np.linalg.norm(J, axis=0)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0.0):
        raise NonFiniteJacobian(f"Jacobian column norms {norms}")
    return float(np.exp(np.mean(np.log(norms))))


def flow_map(schedule: NoiseSchedule, model, class_id: int, n_steps: int):
    """Noise at t=T -> data at t=0 along a fixed DDIM grid, batched over rows."""
    def F(Z):
        return sample_from_noise(schedule, model, Z, class_id, n_steps)
    return F


def probe_flow(schedule: NoiseSchedule, model, class_id: int, n_probes: int, rng: Rng,
               d: int | None = None, n_steps: int = 20, h: float = 1e-4) -> InstabilityReport:
    if d is None:
        d = model.d
    F = flow_map(schedule, model, class_id, n_steps)
    probes = rng.normal((n_probes, d))
    coef = np.array([instability_coefficient(F, z, h, batched=True) for z in probes])
    return InstabilityReport(coef, probes, h, d)
