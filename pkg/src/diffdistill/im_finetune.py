"""Inversion-matching fine-tuning of the noise predictor.

Per sample the objective is

    ||eps_theta(z_t, c) - eps||^2 + lambda_im * (1 - cos(z_t_inv, z_t))

averaged over the mini-batch, where z_t is the forward-noised latent and
z_t_inv the Euler inversion of z_0 to the same t under the current weights.
z_t carries no parameter dependence, so the matching term is differentiated
through the inversion only: either through the final Euler increment
(``"last"``) or through every network call on the trajectory (``"full"``).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import denoiser
from .denoiser import DenoiserParams
from .diffusion_engine import forward_noise, invert_trajectory
from .math_core import AdamWState, Rng, ZeroNormInput, adamw_step, cosine_similarity
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

BACKPROP_DEPTHS = ("last", "full")
IM_LOSSES = ("cosine", "l1", "l2")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class IMFinetuneConfig:
    lambda_im: float = 0.002
    epochs: int = 8
    batch_size: int = 8
    lr: float = 1e-3
    n_inv_steps: int = 8
    backprop_depth: str = "last"
    im_loss: str = "cosine"
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.lambda_im < 0:
            raise ValueError("lambda_im must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.n_inv_steps < 1:
            raise ValueError("epochs, batch_size and n_inv_steps must be >= 1")
        if self.backprop_depth not in BACKPROP_DEPTHS:
            raise ValueError(f"backprop_depth must be one of {BACKPROP_DEPTHS}")
        if self.im_loss not in IM_LOSSES:
            raise ValueError(f"im_loss must be one of {IM_LOSSES}")


@dataclass
class LossRecord:
    epoch: int
    batch: int
    loss_diff: float
    loss_im: float
    total: float


def loss_diff(eps_pred, eps) -> float:
    r = np.asarray(eps_pred, dtype=np.float64) - np.asarray(eps, dtype=np.float64)
    return float(r @ r)


def loss_im(z_inv, z_t) -> float:
    return 1.0 - cosine_similarity(z_inv, z_t)


def total_loss(l_diff: float, l_im: float, lambda_im: float) -> float:
    return l_diff + lambda_im * l_im


def _matching_rows(A, B, kind: str):
    """Per-row matching loss between A (inverted) and B (noised) and its gradient w.r.t. A."""
    d = A.shape[1]
    if kind == "cosine":
        na = np.linalg.norm(A, axis=1)
        nb = np.linalg.norm(B, axis=1)
        if np.any(na < 1e-12) or np.any(nb < 1e-12):
            raise ZeroNormInput("zero-norm latent in matching loss")
        cos = np.clip(np.sum(A * B, axis=1) / (na * nb), -1.0, 1.0)
        grad = -(B / (na * nb)[:, None] - (cos / na**2)[:, None] * A)
        return 1.0 - cos, grad
    diff = A - B
    if kind == "l2":
        return np.sum(diff**2, axis=1) / d, 2.0 * diff / d
    if kind == "l1":
        return np.sum(np.abs(diff), axis=1) / d, np.sign(diff) / d
    raise ValueError(f"unknown matching loss {kind!r}")


def _add(acc, g, scale=1.0):
    for k, v in g.items():
        acc[k] += scale * v if scale != 1.0 else v


def batch_loss_and_grads(params: DenoiserParams, schedule: NoiseSchedule, z0, y, t, eps,
                         cfg: IMFinetuneConfig):
    """Mean losses over the batch and the analytic gradient of the mean total loss.

    Returns ``(loss_diff, loss_im, total, grads)``; ``loss_im`` is NaN when
    ``lambda_im == 0`` since the inversion is then skipped.
    """
    n = len(y)
    z_t = forward_noise(schedule, z0, t, eps)
    pred, vjp = denoiser.forward_with_grad(params, z_t, t, y)
    resid = pred - eps
    l_diff = float(np.mean(np.sum(resid**2, axis=1)))
    grads, _ = vjp(2.0 * resid / n)

    if cfg.lambda_im == 0.0:
        return l_diff, float("nan"), l_diff, grads

    z_inv, steps = invert_trajectory(schedule, params, z0, t, y, cfg.n_inv_steps, keep_vjp=True)
    rows, g_inv = _matching_rows(z_inv, z_t, cfg.im_loss)
    l_im = float(np.mean(rows))
    g_x = g_inv * (cfg.lambda_im / n) * np.sqrt(schedule.alpha_bar(t))[:, None]
    depth = 1 if cfg.backprop_depth == "last" else len(steps)
    for step in reversed(steps[-depth:]):
        g_step, g_z = step.vjp(step.dsigma[:, None] * g_x)
        _add(grads, g_step)
        g_x = g_x + step.scale_in[:, None] * g_z
    return l_diff, l_im, l_diff + cfg.lambda_im * l_im, grads


def batch_total_loss(params: DenoiserParams, schedule: NoiseSchedule, z0, y, t, eps,
                     cfg: IMFinetuneConfig, frozen: DenoiserParams | None = None) -> float:
    """Mean total loss by forward evaluation only.

    With ``frozen`` given, every inversion increment except the last is
    computed with ``frozen`` weights: the function whose gradient at
    ``params == frozen`` is the ``"last"`` backprop mode.
    """
    z_t = forward_noise(schedule, z0, t, eps)
    pred = denoiser.forward(params, z_t, t, y)
    l_diff = float(np.mean(np.sum((pred - eps) ** 2, axis=1)))
    if cfg.lambda_im == 0.0:
        return l_diff
    if frozen is None:
        z_inv, _ = invert_trajectory(schedule, params, z0, t, y, cfg.n_inv_steps)
    else:
        z_inv, _ = invert_trajectory(schedule, frozen, z0, t, y, cfg.n_inv_steps, final_model=params)
    rows, _ = _matching_rows(z_inv, z_t, cfg.im_loss)
    return l_diff + cfg.lambda_im * float(np.mean(rows))


def finetune_epoch(params: DenoiserParams, schedule: NoiseSchedule, latents, labels,
                   cfg: IMFinetuneConfig, rng: Rng, opt: AdamWState, epoch: int = 0):
    """One pass over shuffled mini-batches. Returns (params, opt, log)."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    order = rng.permutation(n)
    log = []
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.normal((len(idx), params.d))
        l_d, l_i, tot, grads = batch_loss_and_grads(params, schedule, latents[idx], labels[idx], t, eps, cfg)
        if not np.isfinite(tot):
            raise NonFiniteLoss(
                f"epoch {epoch} batch {b}: loss_diff={l_d} loss_im={l_i} total={tot}; "
                f"t={t.tolist()} labels={labels[idx].tolist()}"
            )
        tensors, opt = adamw_step(params.tensors, grads, opt)
        params = params.with_tensors(tensors)
        log.append(LossRecord(epoch, b, l_d, l_i, tot))
    return params, opt, log


def finetune(params: DenoiserParams, schedule: NoiseSchedule, latents, labels, cfg: IMFinetuneConfig,
             rng: Rng, opt: AdamWState | None = None):
    """Run ``cfg.epochs`` epochs. With lambda_im = 0 this is plain diffusion training."""
    cfg.validate()
    if opt is None:
        opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = []
    for epoch in range(cfg.epochs):
        params, opt, rows = finetune_epoch(params, schedule, latents, labels, cfg, rng, opt, epoch)
        log.extend(rows)
        if rows:
            logger.debug("epoch %d mean loss_diff %.4f", epoch, np.mean([r.loss_diff for r in rows]))
    return params, opt, log


def write_loss_log(path, log: list[LossRecord]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "batch", "loss_diff", "loss_im", "total"])
        for r in log:
            w.writerow([r.epoch, r.batch, repr(r.loss_diff), repr(r.loss_im), repr(r.total)])
