import math

import numpy as np
import pytest

from conftest import central_diff_grads, rel_err, small_params
from diffdistill import denoiser
from diffdistill.diffusion_engine import forward_noise
from diffdistill.im_finetune import (
    IMFinetuneConfig, LossRecord, batch_loss_and_grads, batch_total_loss, finetune, finetune_epoch, loss_diff,
    loss_im, total_loss, write_loss_log,
)
from diffdistill.math_core import AdamWState, Rng, ZeroNormInput, adamw_step


def test_loss_examples():
    assert loss_diff([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert loss_diff([1, 0], [0, 0]) == 1.0
    assert loss_diff([1, 2], [3, 1]) == 5.0
    assert loss_im([1, 2], [1, 2]) == pytest.approx(0.0, abs=1e-15)
    assert loss_im([1, 0], [0, 3]) == 1.0
    assert loss_im([1, 1], [-2, -2]) == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ZeroNormInput):
        loss_im([0, 0], [1, 0])
    assert total_loss(3.0, 0.7, 0.0) == 3.0
    assert total_loss(1.0, 0.5, 0.002) == pytest.approx(1.001, abs=1e-15)
    assert total_loss(0.0, 2.0, 0.5) == 1.0


def test_config_validation():
    for bad in (dict(lambda_im=-1.0), dict(epochs=0), dict(backprop_depth="some"), dict(im_loss="huber")):
        with pytest.raises(ValueError):
            IMFinetuneConfig(**bad).validate()


def _silu(a):
    return a / (1 + math.exp(-a))


def _dsilu(a):
    s = 1 / (1 + math.exp(-a))
    return s * (1 + a * (1 - s))


def test_micro_model_hand_gradient_and_update(schedule):
    # d=1 with only the last layer live: out = w1*silu(b2_0) + w2*silu(b2_1) + b3
    p = denoiser.init_denoiser(1, 1, schedule.T, Rng(0), hidden=2, n_freq=2, emb_dim=1)
    p = p.with_tensors({k: np.zeros_like(v) for k, v in p.tensors.items()})
    p.tensors["b2"][:] = [1.0, -0.5]
    p.tensors["W3"][:] = [[0.3, 0.2]]
    p.tensors["b3"][:] = [0.1]
    out = 0.3 * _silu(1.0) + 0.2 * _silu(-0.5) + 0.1
    eps = np.array([[0.4], [-1.3]])
    z0, y, t = np.array([[0.7], [-0.2]]), np.array([0, 0]), np.array([10, 900])
    r = [out - 0.4, out + 1.3]
    g_b3 = (2 * r[0] + 2 * r[1]) / 2
    hand = {
        "b3": [g_b3],
        "W3": [[g_b3 * _silu(1.0), g_b3 * _silu(-0.5)]],
        "b2": [g_b3 * 0.3 * _dsilu(1.0), g_b3 * 0.2 * _dsilu(-0.5)],
    }
    cfg = IMFinetuneConfig(lambda_im=0.0)
    l_d, _, _, grads = batch_loss_and_grads(p, schedule, z0, y, t, eps, cfg)
    assert l_d == pytest.approx((r[0] ** 2 + r[1] ** 2) / 2, abs=1e-14)
    for k, v in grads.items():
        np.testing.assert_allclose(v, hand.get(k, np.zeros_like(v)), rtol=0, atol=1e-12)

    new, _ = adamw_step(p.tensors, grads, AdamWState(lr=1e-3))
    # first AdamW step: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps)
    expect_b3 = 0.1 - 1e-3 * g_b3 / (abs(g_b3) + 1e-8)
    expect_w31 = 0.2 - 1e-3 * hand["W3"][0][1] / (abs(hand["W3"][0][1]) + 1e-8)
    assert new["b3"][0] == pytest.approx(expect_b3, abs=1e-8)
    assert new["W3"][0, 1] == pytest.approx(expect_w31, abs=1e-8)
    assert new["W2"].tobytes() == p.tensors["W2"].tobytes()


def _fd_setup(seed, n=3, d=4):
    p = small_params(seed, d=d)
    r = Rng(500 + seed)
    z0 = r.normal((n, d)) + 1.0
    y = r.integers(0, 3, n)
    t = r.integers(1, 1001, n)
    eps = r.normal((n, d))
    return p, z0, y, t, eps


@pytest.mark.parametrize("depth", ["last", "full"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_total_loss_gradient_vs_finite_differences(schedule, depth, seed):
    p, z0, y, t, eps = _fd_setup(seed)
    cfg = IMFinetuneConfig(lambda_im=0.1, n_inv_steps=4, backprop_depth=depth)
    _, _, _, grads = batch_loss_and_grads(p, schedule, z0, y, t, eps, cfg)
    frozen = p if depth == "last" else None
    fd = central_diff_grads(lambda q: batch_total_loss(q, schedule, z0, y, t, eps, cfg, frozen=frozen), p)
    an = np.concatenate([grads[k].ravel() for k in fd])
    num = np.concatenate([g for _, g in fd.values()])
    assert rel_err(an, num) < 1e-4


@pytest.mark.parametrize("depth", ["last", "full"])
@pytest.mark.parametrize("kind", ["cosine", "l2"])
def test_matching_term_gradient_alone(schedule, depth, kind):
    # isolates the inversion path by differencing lambda > 0 against lambda = 0
    p, z0, y, t, eps = _fd_setup(7)
    lam = 0.5
    cfg = IMFinetuneConfig(lambda_im=lam, n_inv_steps=5, backprop_depth=depth, im_loss=kind)
    base = IMFinetuneConfig(lambda_im=0.0)
    g_tot = batch_loss_and_grads(p, schedule, z0, y, t, eps, cfg)[3]
    g_diff = batch_loss_and_grads(p, schedule, z0, y, t, eps, base)[3]
    frozen = p if depth == "last" else None

    def im_part(q):
        return (batch_total_loss(q, schedule, z0, y, t, eps, cfg, frozen=frozen)
                - batch_total_loss(q, schedule, z0, y, t, eps, base)) / lam

    fd = central_diff_grads(im_part, p)
    an = np.concatenate([(g_tot[k] - g_diff[k]).ravel() / lam for k in fd])
    num = np.concatenate([g for _, g in fd.values()])
    assert np.linalg.norm(an) > 1e-6
    assert rel_err(an, num) < 1e-4


def test_depth_modes_differ_but_agree_with_one_step(schedule):
    p, z0, y, t, eps = _fd_setup(3)
    g = {d: batch_loss_and_grads(p, schedule, z0, y, t, eps,
                                 IMFinetuneConfig(lambda_im=0.1, n_inv_steps=1, backprop_depth=d))[3]
         for d in ("last", "full")}
    for k in g["last"]:
        np.testing.assert_array_equal(g["last"][k], g["full"][k])
    g4 = [batch_loss_and_grads(p, schedule, z0, y, t, eps,
                               IMFinetuneConfig(lambda_im=0.1, n_inv_steps=4, backprop_depth=d))[3]["W1"]
          for d in ("last", "full")]
    assert not np.allclose(*g4)


def reference_plain_epoch(params, schedule, X, Y, batch_size, rng, opt):
    """Independent plain-diffusion loop: shuffle, sample t and noise, step AdamW on the mean MSE."""
    order = rng.permutation(len(Y))
    for s in range(0, len(Y), batch_size):
        idx = order[s:s + batch_size]
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.normal((len(idx), params.d))
        ab = schedule.alpha_bar(t)[:, None]
        zt = np.sqrt(ab) * X[idx] + np.sqrt(1.0 - ab) * eps
        pred, vjp = denoiser.forward_with_grad(params, zt, t, Y[idx])
        grads, _ = vjp(2.0 * (pred - eps) / len(idx))
        tensors, opt = adamw_step(params.tensors, grads, opt)
        params = params.with_tensors(tensors)
    return params, opt


def test_zero_lambda_is_bit_identical_to_plain_training(schedule, toy_data):
    _, train, _ = toy_data
    X, Y = train.X[:100], train.y[:100]
    cfg = IMFinetuneConfig(lambda_im=0.0, batch_size=16, lr=2e-3)
    p0 = denoiser.init_denoiser(2, 2, schedule.T, Rng(3), hidden=16)
    a, oa = p0, AdamWState(lr=2e-3)
    b, ob = p0, AdamWState(lr=2e-3)
    ra, rb = Rng(9), Rng(9)
    for e in range(3):
        a, oa, _ = finetune_epoch(a, schedule, X, Y, cfg, ra, oa, e)
        b, ob = reference_plain_epoch(b, schedule, X, Y, 16, rb, ob)
        for k in a.tensors:
            assert a.tensors[k].tobytes() == b.tensors[k].tobytes()


def test_training_halves_diffusion_loss(toy_model):
    _, log, cfg = toy_model
    per_epoch = {}
    for r in log:
        per_epoch.setdefault(r.epoch, []).append(r.loss_diff)
    first, last = np.mean(per_epoch[0]), np.mean(per_epoch[cfg.epochs - 1])
    assert len(per_epoch) == 200
    assert last < 0.5 * first


@pytest.mark.parametrize("depth", ["last", "full"])
def test_batch_order_independence(schedule, depth):
    p, z0, y, t, eps = _fd_setup(4, n=6)
    cfg = IMFinetuneConfig(lambda_im=0.1, n_inv_steps=4, backprop_depth=depth)
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = batch_loss_and_grads(p, schedule, z0, y, t, eps, cfg)
    b = batch_loss_and_grads(p, schedule, z0[perm], y[perm], t[perm], eps[perm], cfg)
    assert abs(a[2] - b[2]) < 1e-12
    for k in a[3]:
        np.testing.assert_allclose(a[3][k], b[3][k], rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_finetune_logs_are_finite(schedule, toy_data, toy_model, seed):
    _, train, _ = toy_data
    cfg = IMFinetuneConfig()
    _, _, log = finetune(toy_model[0], schedule, train.X, train.y, cfg, Rng(seed))
    assert len(log) == cfg.epochs * math.ceil(len(train.y) / cfg.batch_size)
    assert all(np.isfinite([r.loss_diff, r.loss_im, r.total]).all() for r in log)
    assert all(0.0 <= r.loss_im <= 2.0 for r in log)


def test_matching_variants_values(schedule):
    # zero model: z_inv = sqrt(ab_t) * z0, z_t = sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps
    p = small_params(0, d=2)
    p = p.with_tensors({k: np.zeros_like(v) for k, v in p.tensors.items()})
    z0, eps, y, t = np.array([[1.0, 2.0]]), np.array([[0.5, -1.0]]), np.array([0]), np.array([400])
    s1 = math.sqrt(1 - schedule.alpha_bar(400))
    diff = s1 * eps[0]
    zt = forward_noise(schedule, z0, t, eps)[0]
    zi = math.sqrt(schedule.alpha_bar(400)) * z0[0]
    for kind, expect in (("l2", diff @ diff / 2), ("l1", np.abs(diff).sum() / 2), ("cosine", loss_im(zi, zt))):
        l_im = batch_loss_and_grads(p, schedule, z0, y, t, eps, IMFinetuneConfig(lambda_im=1.0, im_loss=kind))[1]
        assert l_im == pytest.approx(expect, abs=1e-14)


def test_loss_log_csv(tmp_path):
    write_loss_log(tmp_path / "log.csv", [LossRecord(0, 0, 1.5, float("nan"), 1.5), LossRecord(0, 1, 1.0, 0.5, 1.001)])
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,batch,loss_diff,loss_im,total"
    assert len(lines) == 3
