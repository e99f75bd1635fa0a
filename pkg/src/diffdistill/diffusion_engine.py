"""Forward noising, deterministic DDIM sampling and Euler-form inversion.

``model`` arguments accept either a :class:`DenoiserParams` or any callable
``eps(z, t, class_ids)`` returning noise predictions of the same shape as ``z``
(used for oracle and zero denoisers in tests).

Inversion runs in the rescaled coordinates ``x = z / sqrt(alpha_bar_t)``, where
noise level is ``sigma_t = sqrt((1 - alpha_bar_t) / alpha_bar_t)``. In these
coordinates a DDIM step is exactly an explicit Euler step in sigma, so
inversion is the same scheme run with increasing sigma.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import denoiser
from .denoiser import DenoiserParams
from .math_core import Rng
from .schedule import NoiseSchedule, timestep_grid, uniform_grid


class BadTimestepOrder(ValueError):
    pass


@dataclass
class LatentBatch:
    latents: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    t: int = 0

    def __post_init__(self):
        self.latents = np.atleast_2d(np.asarray(self.latents, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.latents) != len(self.labels):
            raise ValueError("latents and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def to_csv(self, path) -> None:
        write_latent_csv(path, self.latents, self.labels)


def write_latent_csv(path, latents, labels) -> None:
    latents = np.atleast_2d(latents)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x_{k + 1}" for k in range(latents.shape[1])])
        for y, row in zip(labels, latents):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def _eps(model, z, t, class_id):
    if isinstance(model, DenoiserParams):
        return denoiser.forward(model, z, t, class_id)
    return np.asarray(model(z, t, class_id), dtype=np.float64)


def _col(x, like):
    """Per-row scalar(s) shaped to broadcast against ``like``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or np.ndim(like) == 1:
        return x
    return x[:, None]


def forward_noise(schedule: NoiseSchedule, z0, t, eps) -> np.ndarray:
    schedule.check_t(t)
    ab = schedule.alpha_bar(t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError("z0 and eps differ in shape")
    return np.sqrt(_col(ab, z0)) * z0 + np.sqrt(1.0 - _col(ab, z0)) * eps


def predict_z0(schedule: NoiseSchedule, model, z_t, t, class_id, eps_pred=None) -> np.ndarray:
    schedule.check_t(t)
    z_t = np.asarray(z_t, dtype=np.float64)
    if eps_pred is None:
        eps_pred = _eps(model, z_t, t, class_id)
    ab = _col(schedule.alpha_bar(t), z_t)
    return (z_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def ddim_step(schedule: NoiseSchedule, model, z_t, t, t_prev, class_id) -> np.ndarray:
    """Deterministic (eta = 0) update from t to t_prev < t."""
    if np.any(np.asarray(t_prev) >= np.asarray(t)):
        raise BadTimestepOrder(f"t_prev={t_prev} must be < t={t}")
    schedule.check_t(t)
    schedule.check_t(t_prev, allow_zero=True)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps = _eps(model, z_t, t, class_id)
    z0_hat = predict_z0(schedule, model, z_t, t, class_id, eps_pred=eps)
    ab_prev = _col(schedule.alpha_bar(t_prev), z_t)
    return np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps


def sample_from_noise(schedule: NoiseSchedule, model, z_T, class_id, n_steps: int) -> np.ndarray:
    """Run DDIM from t=T down to t=0 along ``timestep_grid(schedule, n_steps)``."""
    grid = [0] + timestep_grid(schedule, n_steps)
    z = np.asarray(z_T, dtype=np.float64)
    for k in range(len(grid) - 1, 0, -1):
        z = ddim_step(schedule, model, z, grid[k], grid[k - 1], class_id)
    return z


def sample(schedule: NoiseSchedule, model, rng: Rng, class_id, n_steps: int,
           n: int | None = None, d: int | None = None) -> np.ndarray:
    """Draw z_T ~ N(0, I) and denoise it. Returns (d,) when ``n`` is None, else (n, d)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if d is None:
        d = model.d
    z_T = rng.normal(d if n is None else (n, d))
    return sample_from_noise(schedule, model, z_T, class_id, n_steps)


@dataclass
class InversionStep:
    t_from: np.ndarray  # timestep at which eps was evaluated (>= 1)
    dsigma: np.ndarray
    scale_in: np.ndarray  # sqrt(alpha_bar) used to map x -> z for the network input
    z_in: np.ndarray
    vjp: object = None


def inversion_grid(t_target, n_inv_steps: int) -> np.ndarray:
    """Rows of n_inv_steps + 1 near-uniform timesteps from 0 to each t_target."""
    tt = np.atleast_1d(np.asarray(t_target, dtype=np.int64))
    return np.stack([uniform_grid(int(t), n_inv_steps) for t in tt])


def invert_trajectory(schedule: NoiseSchedule, model, z0, t_target, class_id, n_inv_steps: int,
                      keep_vjp: bool = False, final_model=None):
    """Euler inversion returning (z_t_inv, steps).

    The first increment leaves t=0; the network has no t=0 input, so that
    evaluation uses t=1 (alpha_bar_1 ~ 1, so z_1 ~ z_0). ``final_model``, if
    given, is used for the last increment only (stop-gradient surrogates).
    """
    if n_inv_steps < 1:
        raise ValueError("n_inv_steps must be >= 1")
    schedule.check_t(t_target)
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 1
    Z0 = z0[None, :] if single else z0
    n = Z0.shape[0]
    tt = np.broadcast_to(np.asarray(t_target, dtype=np.int64), (n,))
    ys = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (n,))
    grid = inversion_grid(tt, n_inv_steps)
    sig = schedule.sigma(grid)
    ab = schedule.alpha_bar(grid)

    x = Z0.copy()
    steps = []
    for k in range(1, n_inv_steps + 1):
        t_from = np.maximum(grid[:, k - 1], 1)
        scale_in = np.sqrt(ab[:, k - 1])
        z_in = x * scale_in[:, None]
        m = final_model if (final_model is not None and k == n_inv_steps) else model
        if keep_vjp:
            eps, vjp = denoiser.forward_with_grad(m, z_in, t_from, ys)
        else:
            eps, vjp = _eps(m, z_in, t_from, ys), None
        dsig = sig[:, k] - sig[:, k - 1]
        x = x + dsig[:, None] * eps
        steps.append(InversionStep(t_from, dsig, scale_in, z_in, vjp))
    z_inv = x * np.sqrt(ab[:, -1])[:, None]
    return (z_inv[0] if single else z_inv), steps


def invert(schedule: NoiseSchedule, model, z0, t_target, class_id, n_inv_steps: int) -> np.ndarray:
    z_inv, _ = invert_trajectory(schedule, model, z0, t_target, class_id, n_inv_steps)
    return z_inv
