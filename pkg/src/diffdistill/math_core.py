"""Dense float64 helpers, a portable RNG and the AdamW updater."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-12

# Bump if the draw-to-number mapping below ever changes.
RNG_STREAM_VERSION = 1
_INV_2_53 = 1.0 / 9007199254740992.0


class ZeroNormInput(ValueError):
    """A vector whose norm is numerically zero was passed where a direction is needed."""


class NonFiniteGradient(FloatingPointError):
    pass


def as_vec(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped to [-1, 1]."""
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_EPS or nb < NORM_EPS:
        raise ZeroNormInput(f"cosine similarity of zero-norm input (|a|={na:.3g}, |b|={nb:.3g})")
    return min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb)))


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise clamped cosine similarities between the rows of A and B."""
    A = np.atleast_2d(as_vec(A))
    B = np.atleast_2d(as_vec(B))
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na < NORM_EPS) or np.any(nb < NORM_EPS):
        raise ZeroNormInput("cosine similarity of zero-norm row")
    return np.clip((A @ B.T) / np.outer(na, nb), -1.0, 1.0)


def normalize_to_sphere(v) -> np.ndarray:
    v = as_vec(v)
    n = float(np.linalg.norm(v))
    if n <= NORM_EPS:
        raise ZeroNormInput(f"cannot normalize vector of norm {n:.3g}")
    return v / n


def normalize_rows(X: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    X = as_vec(X)
    n = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise ZeroNormInput("cannot normalize zero-norm row")
    return X / n


class Rng:
    """Seeded random stream with a fixed, version-independent output sequence.

    Raw 64-bit words come from the Philox-4x64 counter generator keyed by the
    seed (bit generators in numpy are stream-stable across releases). All
    conversions to floats are done here rather than through
    ``numpy.random.Generator``, whose transforms may change between versions:

    * uniform: top 53 bits of a word, scaled by 2**-53, giving [0, 1)
    * normal: Box-Muller on pairs of words, both outputs used in order
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = seed
        self._bits = np.random.Philox(key=seed)
        self.draws = 0

    def _raw(self, n: int) -> np.ndarray:
        self.draws += n
        return self._bits.random_raw(n)

    def spawn(self, label: str) -> "Rng":
        """Independent child stream named by ``label``; does not advance this stream."""
        h = hashlib.blake2b(f"{RNG_STREAM_VERSION}:{self.seed}:{label}".encode(), digest_size=8)
        return Rng(int.from_bytes(h.digest(), "little"))

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        w = self._raw(2 * m) >> np.uint64(11)
        # u1 in (0, 1] keeps the log finite
        u1 = (w[0::2].astype(np.float64) + 1.0) * _INV_2_53
        u2 = w[1::2].astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high); multiply-shift on the uniform draw."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        u = self.uniform(1 if size is None else size)
        k = low + np.minimum(np.floor(u * span).astype(np.int64), span - 1)
        return int(k[0]) if size is None else k

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n} without replacement")
        return self.permutation(n)[:k]


def gaussian_sample(rng: Rng, dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return rng.normal(dim)


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamWState":
        return AdamWState(
            self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step_count,
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Returns new parameter arrays; ``state`` is updated in place and returned.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = p - state.lr * state.weight_decay * p - state.lr * step
    return out, state
