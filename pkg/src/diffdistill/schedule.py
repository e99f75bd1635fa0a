"""Variance-preserving noise schedule and its sigma-space reparameterization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InvalidScheduleBounds(ValueError):
    pass


class InvalidStepCount(ValueError):
    pass


class BadTimestep(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables for t = 1..T, stored 0-indexed (entry t-1).

    ``alpha_bar(0) == 1`` and ``sigma(0) == 0`` denote clean data.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alpha_bars, self.sigmas):
            arr.setflags(write=False)

    def check_t(self, t, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        ta = np.asarray(t)
        if ta.size and (np.any(ta < lo) or np.any(ta > self.T)):
            raise BadTimestep(f"timestep {t} outside [{lo}, {self.T}]")

    def alpha_bar(self, t):
        """Cumulative product at ``t`` (scalar or int array); 1.0 at t=0."""
        ta = np.asarray(t, dtype=np.int64)
        self.check_t(ta, allow_zero=True)
        out = np.where(ta > 0, self.alpha_bars[np.maximum(ta, 1) - 1], 1.0)
        return float(out) if out.ndim == 0 else out

    def sigma(self, t):
        ta = np.asarray(t, dtype=np.int64)
        self.check_t(ta, allow_zero=True)
        out = np.where(ta > 0, self.sigmas[np.maximum(ta, 1) - 1], 0.0)
        return float(out) if out.ndim == 0 else out

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha_bar", "sigma"])
            for i in range(self.T):
                w.writerow([i + 1, repr(float(self.betas[i])), repr(float(self.alpha_bars[i])),
                            repr(float(self.sigmas[i]))])


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.array(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 2:
        raise InvalidScheduleBounds("need at least two betas")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise InvalidScheduleBounds("betas must lie in (0, 1)")
    alpha_bars = np.cumprod(1.0 - betas)
    sigmas = np.sqrt((1.0 - alpha_bars) / alpha_bars)
    return NoiseSchedule(T=int(betas.size), betas=betas, alpha_bars=alpha_bars, sigmas=sigmas)


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise InvalidScheduleBounds(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidScheduleBounds(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def uniform_grid(t_end: int, n_steps: int) -> np.ndarray:
    """n_steps + 1 points 0 = t_0 <= ... <= t_n = t_end, t_k = round(k * t_end / n).

    Strictly increasing when n_steps <= t_end; repeated points otherwise.
    """
    k = np.arange(n_steps + 1, dtype=np.float64)
    return np.floor(k * t_end / n_steps + 0.5).astype(np.int64)


def timestep_grid(schedule: NoiseSchedule, n_steps: int) -> list[int]:
    """Strictly increasing timesteps in 1..T, ending at T."""
    if not 1 <= n_steps <= schedule.T:
        raise InvalidStepCount(f"n_steps must be in [1, {schedule.T}], got {n_steps}")
    return [int(t) for t in uniform_grid(schedule.T, n_steps)[1:]]
