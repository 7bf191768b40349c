"""Trunk-plus-two-heads MLP with backprop and Adam.

The hot kernels come from the compiled ``taxdqn._core`` extension when it is
importable and fall back to :mod:`taxdqn._pycore` otherwise.  Set
``TAXDQN_BACKEND=numpy`` to force the fallback.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _pycore

FORMAT_VERSION = 1


def _load_backend():
    if os.environ.get("TAXDQN_BACKEND", "").lower() in ("numpy", "python", "py"):
        return _pycore
    try:
        from . import _core
    except ImportError:
        return _pycore
    return _core


backend = _load_backend()


def get_backend(name: Optional[str] = None):
    """Kernel module by name (``"numpy"`` or ``"compiled"``); default is the active one."""
    if name is None:
        return backend
    if name in ("numpy", "python", "py"):
        return _pycore
    if name in ("compiled", "cython", "c"):
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 21
    trunk: tuple = (256, 256, 256)
    heads: tuple = (101, 2)

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(int(w) for w in self.trunk))
        object.__setattr__(self, "heads", tuple(int(w) for w in self.heads))
        if len(self.heads) != 2:
            raise ValueError("exactly two heads are supported")
        if self.input_dim <= 0 or not self.trunk or min(self.trunk) <= 0:
            raise ValueError(f"bad network spec {self}")

    def shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim,) + self.trunk
        shapes = list(zip(dims[:-1], dims[1:]))
        return shapes + [(self.trunk[-1], h) for h in self.heads]

    def layout(self) -> tuple:
        out = []
        off = 0
        for n_in, n_out in self.shapes():
            out.append((off, off + n_in * n_out, n_in, n_out))
            off += n_in * n_out + n_out
        return tuple(out)

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.shapes())


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-4, dtype=np.float64) -> "AdamState":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), 0, lr)


class Network:
    """Parameters of one network in a single flat buffer."""

    def __init__(self, spec: NetworkSpec, flat: Optional[np.ndarray] = None, dtype=np.float64):
        self.spec = spec
        self.layout = spec.layout()
        if flat is None:
            flat = np.zeros(spec.n_params, dtype=dtype)
        if flat.shape != (spec.n_params,):
            raise ValueError(f"parameter buffer has shape {flat.shape}, spec needs ({spec.n_params},)")
        self.flat = np.ascontiguousarray(flat)

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> "Network":
        """Glorot-uniform weights, zero biases."""
        net = cls(spec, dtype=dtype)
        for w, _, n_in, n_out in net.layout:
            a = np.sqrt(6.0 / (n_in + n_out))
            net.flat[w:w + n_in * n_out] = rng.uniform(-a, a, n_in * n_out)
        return net

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _pycore._views(self.flat, self.layout)

    def forward(self, X: np.ndarray):
        """``(q1, q2, cache)`` for a batch (or a single observation)."""
        X = np.asarray(X, dtype=self.flat.dtype)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.spec.input_dim:
            raise ValueError(f"observation has {X.shape[1]} dims, network expects {self.spec.input_dim}")
        q1, q2, acts = _pycore.forward(self.flat, self.layout, X)
        if single:
            return q1[0], q2[0], acts
        return q1, q2, acts

    def backward(self, cache, grad_q1: np.ndarray, grad_q2: np.ndarray) -> np.ndarray:
        grad_q1 = np.atleast_2d(np.asarray(grad_q1, dtype=self.flat.dtype))
        grad_q2 = np.atleast_2d(np.asarray(grad_q2, dtype=self.flat.dtype))
        n = cache[0].shape[0]
        if grad_q1.shape != (n, self.spec.heads[0]) or grad_q2.shape != (n, self.spec.heads[1]):
            raise ValueError("output gradient shapes do not match the forward batch")
        grad = np.empty_like(self.flat)
        return _pycore.backward(self.flat, self.layout, cache, grad_q1, grad_q2, grad)

    def clone(self) -> "Network":
        return Network(self.spec, self.flat.copy())

    def copy_from(self, other: "Network") -> None:
        self.flat[:] = other.flat

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


def adam_step(net: Network, adam: AdamState, grads: np.ndarray, kernels=None) -> Network:
    """Bias-corrected Adam update of ``net`` in place."""
    if grads.shape != net.flat.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient passed to Adam")
    k = kernels or _pycore
    adam.t = k.adam(net.flat, grads, adam.m, adam.v, adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps)
    return net


def clone_params(net: Network) -> Network:
    return net.clone()


def gradient_check(net: Network, X: np.ndarray, w1: np.ndarray, w2: np.ndarray,
                   step: float = 1e-5) -> float:
    """Max relative error of backprop against central differences.

    The scalar checked is ``sum(w1 * q1) + sum(w2 * q2)``.
    """
    def loss(flat):
        q1, q2, _ = _pycore.forward(flat, net.layout, X)
        return float(np.sum(w1 * q1) + np.sum(w2 * q2))

    _, _, cache = _pycore.forward(net.flat, net.layout, X)
    analytic = _pycore.backward(net.flat, net.layout, cache, w1, w2, np.empty_like(net.flat))
    flat = net.flat.copy()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss(flat)
        flat[i] = orig - step
        fm = loss(flat)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * step)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class CheckpointError(ValueError):
    pass


def save(path: str | Path, net: Network, adam: Optional[AdamState] = None,
         rng_state: Optional[dict] = None, cfg_hash: str = "", extra: Optional[dict] = None) -> Path:
    """Write a versioned ``.npz`` checkpoint (bit-exact round trip)."""
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(net.spec),
        "shapes": net.spec.shapes(),
        "n_params": net.spec.n_params,
        "dtype": str(net.flat.dtype),
        "config_hash": cfg_hash,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays = {"params": net.flat}
    if adam is not None:
        header["adam"] = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
                          "beta2": adam.beta2, "eps": adam.eps}
        arrays["adam_m"] = adam.m
        arrays["adam_v"] = adam.v
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)
    return path


def load(path: str | Path, expect_input_dim: Optional[int] = None):
    """Read a checkpoint; returns ``(network, adam_or_None, header)``."""
    with np.load(path, allow_pickle=False) as z:
        try:
            header = json.loads(str(z["header"]))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: unreadable header") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
        try:
            spec = NetworkSpec(**header["spec"])
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad network spec") from exc
        if [tuple(s) for s in header["shapes"]] != spec.shapes() or header["n_params"] != spec.n_params:
            raise CheckpointError(f"{path}: shape header inconsistent with spec")
        flat = z["params"]
        if flat.shape != (spec.n_params,):
            raise CheckpointError(f"{path}: parameter array has shape {flat.shape}")
        if expect_input_dim is not None and spec.input_dim != expect_input_dim:
            raise CheckpointError(
                f"{path}: checkpoint expects {spec.input_dim}-dim observations, scenario produces {expect_input_dim}")
        net = Network(spec, flat.copy())
        adam = None
        if "adam" in header:
            a = header["adam"]
            adam = AdamState(z["adam_m"].copy(), z["adam_v"].copy(), a["t"], a["lr"],
                             a["beta1"], a["beta2"], a["eps"])
    return net, adam, header
