import numpy as np
import pytest

from diffdistill.datasets_features import GmmSpec, fit_feature_extractor, generate_gmm
from diffdistill.denoiser import init_denoiser
from diffdistill.im_finetune import IMFinetuneConfig, finetune
from diffdistill.math_core import Rng
from diffdistill.schedule import build_linear_schedule
from diffdistill.sss_select import CandidatePool

TOY_MEANS = [[2.0, 1.0], [-2.0, 1.0]]

# one line per acceptance criterion, filled by test_acceptance.py
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def schedule():
    return build_linear_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def toy_data():
    spec = GmmSpec(C=2, d=2, means=TOY_MEANS, scale=0.5, n_train=500, n_test=200)
    return spec, *generate_gmm(spec, Rng(0))


@pytest.fixture(scope="session")
def toy_model(schedule, toy_data):
    """Two-mode 2-D model trained 200 epochs with plain diffusion loss."""
    _, train, _ = toy_data
    rng = Rng(0)
    params = init_denoiser(2, 2, schedule.T, rng.spawn("init"), hidden=64)
    cfg = IMFinetuneConfig(lambda_im=0.0, epochs=200, batch_size=64, lr=3e-3)
    params, _, log = finetune(params, schedule, train.X, train.y, cfg, rng.spawn("train"))
    return params, log, cfg


@pytest.fixture(scope="session")
def toy_extractor(toy_data):
    _, train, _ = toy_data
    return fit_feature_extractor(train, Rng(1), hidden=16, epochs=20)


def random_pool(rng: Rng, C: int, G: int, d: int) -> CandidatePool:
    def unit(shape):
        X = rng.normal(shape)
        return X / np.linalg.norm(X, axis=-1, keepdims=True)
    return CandidatePool(unit((C, G, d)), unit((C, d)))


def small_params(seed: int, d: int = 4, n_classes: int = 3, T: int = 1000, hidden: int = 8, std: float = 0.5):
    """Generic (non-tiny) weights so finite differences see O(1) gradients."""
    return init_denoiser(d, n_classes, T, Rng(seed), hidden=hidden, n_freq=4, emb_dim=4, weight_std=std)


def central_diff_grads(loss, params, h=1e-5, coords=None):
    """Central differences of ``loss(p)`` for every (or the listed) coordinate of every tensor."""
    out = {}
    for name, v in params.tensors.items():
        idx = list(np.ndindex(v.shape)) if coords is None else coords[name]
        g = []
        for i in idx:
            pp, pm = params.copy(), params.copy()
            pp.tensors[name][i] += h
            pm.tensors[name][i] -= h
            g.append((loss(pp) - loss(pm)) / (2 * h))
        out[name] = (idx, np.array(g))
    return out


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
