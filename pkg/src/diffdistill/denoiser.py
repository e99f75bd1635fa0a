"""Class-conditional noise predictor: a two-hidden-layer SiLU MLP with hand-written backprop.

Input to the first layer is the concatenation
``[z ; sin(f_k t/T), cos(f_k t/T) ; class_embedding[c]]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .math_core import Rng
from .schedule import BadTimestep

CHECKPOINT_MAGIC = b"DDCKPT01"
TENSOR_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3", "class_emb")


class BadClassId(ValueError):
    pass


@dataclass
class DenoiserParams:
    d: int
    n_classes: int
    T: int
    hidden: int = 64
    n_freq: int = 8
    emb_dim: int = 8
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def freqs(self) -> np.ndarray:
        return np.geomspace(1.0, 64.0, self.n_freq)

    @property
    def in_dim(self) -> int:
        return self.d + 2 * self.n_freq + self.emb_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden
        return {
            "W1": (h, self.in_dim), "b1": (h,),
            "W2": (h, h), "b2": (h,),
            "W3": (self.d, h), "b3": (self.d,),
            "class_emb": (self.n_classes, self.emb_dim),
        }

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.d, self.n_classes, self.T, self.hidden, self.n_freq, self.emb_dim,
                              {k: v.copy() for k, v in self.tensors.items()})

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "DenoiserParams":
        return DenoiserParams(self.d, self.n_classes, self.T, self.hidden, self.n_freq, self.emb_dim,
                              dict(tensors))

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_denoiser(d: int, n_classes: int, T: int, rng: Rng, hidden: int = 64, n_freq: int = 8,
                  emb_dim: int = 8, weight_std: float = 0.02, emb_std: float = 1.0) -> DenoiserParams:
    p = DenoiserParams(d, n_classes, T, hidden, n_freq, emb_dim)
    for name in TENSOR_ORDER:
        shape = p.shapes()[name]
        if name.startswith("b"):
            p.tensors[name] = np.zeros(shape)
        elif name == "class_emb":
            p.tensors[name] = emb_std * rng.normal(shape)
        else:
            p.tensors[name] = weight_std * rng.normal(shape)
    return p


def zeros_like_params(params: DenoiserParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def time_features(params: DenoiserParams, t: np.ndarray) -> np.ndarray:
    s = np.asarray(t, dtype=np.float64)[:, None] / params.T
    ang = s * params.freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(a):
    with np.errstate(over="ignore"):  # exp overflow -> sig = 0, the correct limit
        sig = 1.0 / (1.0 + np.exp(-a))
    return a * sig, sig


def _broadcast_inputs(params: DenoiserParams, z, t, class_id):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    n = Z.shape[0]
    if Z.shape[1] != params.d:
        raise ValueError(f"latent dim {Z.shape[1]} != {params.d}")
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    ys = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (n,))
    if np.any(ts < 1) or np.any(ts > params.T):
        raise BadTimestep(f"timestep outside [1, {params.T}]")
    if np.any(ys < 0) or np.any(ys >= params.n_classes):
        raise BadClassId(f"class id outside [0, {params.n_classes})")
    return Z, ts, ys, single


def _forward(params: DenoiserParams, Z, ts, ys):
    P = params.tensors
    X = np.concatenate([Z, time_features(params, ts), P["class_emb"][ys]], axis=1)
    a1 = X @ P["W1"].T + P["b1"]
    h1, s1 = _silu(a1)
    a2 = h1 @ P["W2"].T + P["b2"]
    h2, s2 = _silu(a2)
    out = h2 @ P["W3"].T + P["b3"]
    return out, (X, a1, h1, s1, a2, h2, s2, ys)


def forward(params: DenoiserParams, z, t, class_id) -> np.ndarray:
    """Predicted noise. ``z`` may be one latent (d,) or a batch (n, d) with per-row t / class ids."""
    Z, ts, ys, single = _broadcast_inputs(params, z, t, class_id)
    out, _ = _forward(params, Z, ts, ys)
    return out[0] if single else out


def _backward(params: DenoiserParams, cache, U):
    P = params.tensors
    X, a1, h1, s1, a2, h2, s2, ys = cache
    g = {}
    g["W3"] = U.T @ h2
    g["b3"] = U.sum(axis=0)
    ga2 = (U @ P["W3"]) * (s2 * (1.0 + a2 * (1.0 - s2)))
    g["W2"] = ga2.T @ h1
    g["b2"] = ga2.sum(axis=0)
    ga1 = (ga2 @ P["W2"]) * (s1 * (1.0 + a1 * (1.0 - s1)))
    g["W1"] = ga1.T @ X
    g["b1"] = ga1.sum(axis=0)
    gX = ga1 @ P["W1"]
    gE = np.zeros_like(P["class_emb"])
    np.add.at(gE, ys, gX[:, params.d + 2 * params.n_freq:])
    g["class_emb"] = gE
    return g, gX[:, : params.d]


def forward_with_grad(params: DenoiserParams, z, t, class_id):
    """Forward pass plus a closure computing the vector-Jacobian product for an upstream."""
    Z, ts, ys, single = _broadcast_inputs(params, z, t, class_id)
    out, cache = _forward(params, Z, ts, ys)

    def vjp(upstream):
        U = np.asarray(upstream, dtype=np.float64)
        U = U[None, :] if single else U
        if U.shape != out.shape:
            raise ValueError(f"upstream shape {U.shape} != output shape {out.shape}")
        grads, gz = _backward(params, cache, U)
        return grads, (gz[0] if single else gz)

    return (out[0] if single else out), vjp


def backward(params: DenoiserParams, z, t, class_id, upstream):
    """Gradients of <forward(params, z, t, c), upstream> w.r.t. every tensor and w.r.t. z.

    For a batch the parameter gradients are summed over rows and grad_z is per-row.
    """
    _, vjp = forward_with_grad(params, z, t, class_id)
    return vjp(upstream)


def save_checkpoint(params: DenoiserParams, path) -> None:
    header = {
        "format": "diffdistill-denoiser",
        "version": 1,
        "config": {"d": params.d, "n_classes": params.n_classes, "T": params.T,
                   "hidden": params.hidden, "n_freq": params.n_freq, "emb_dim": params.emb_dim},
        "tensors": [{"name": k, "shape": list(params.tensors[k].shape)} for k in TENSOR_ORDER],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for k in TENSOR_ORDER:
            fh.write(np.ascontiguousarray(params.tensors[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> DenoiserParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    p = DenoiserParams(**header["config"])
    off = 16 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        p.tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return p
