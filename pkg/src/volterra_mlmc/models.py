"""Coefficient models and test functionals.

Coefficients are evaluated on batches: ``X`` has shape ``(P, d)`` and the
methods return ``b: (P, d)``, ``sigma: (P, d, q)``, ``grad_b: (P, d, d)`` with
``grad_b[p, i, k] = d b^i / d x_k`` and ``grad_sigma: (P, d, q, d)`` with
``grad_sigma[p, i, c, k] = d sigma^i_c / d x_k``.

The built-in families act coordinatewise with diagonal noise (q = d).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kernel import KernelParams

__all__ = [
    "ModelSpec",
    "LinearModel",
    "TrigModel",
    "ConstantSigmaModel",
    "CallableModel",
    "MODELS",
    "build_model",
    "LinearFunctional",
    "SmoothClip",
    "FUNCTIONALS",
    "build_functional",
    "lipschitz_slope",
    "jacobian_error",
]


def _diag(v: np.ndarray) -> np.ndarray:
    """(P, d) -> (P, d, d) with v on the diagonal."""
    P, d = v.shape
    out = np.zeros((P, d, d))
    idx = np.arange(d)
    out[:, idx, idx] = v
    return out


def _diag3(v: np.ndarray) -> np.ndarray:
    """(P, d) -> (P, d, d, d) with out[p, i, i, i] = v[p, i]."""
    P, d = v.shape
    out = np.zeros((P, d, d, d))
    idx = np.arange(d)
    out[:, idx, idx, idx] = v
    return out


@dataclass(frozen=True)
class ModelSpec:
    """Base class: dimensions, initial state, horizon and kernel roughness."""

    H: float = 0.5
    X0: tuple = (0.0,)
    T: float = 1.0
    name: str = field(default="custom", init=False)

    def __post_init__(self):
        KernelParams(self.H)
        object.__setattr__(self, "X0", tuple(float(x) for x in np.atleast_1d(self.X0)))
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def d(self) -> int:
        return len(self.X0)

    @property
    def q(self) -> int:
        return self.d

    @property
    def x0(self) -> np.ndarray:
        return np.asarray(self.X0, dtype=float)

    @property
    def lipschitz(self) -> float:
        raise NotImplementedError

    def b(self, X):
        raise NotImplementedError

    def sigma(self, X):
        raise NotImplementedError

    def grad_b(self, X):
        raise NotImplementedError

    def grad_sigma(self, X):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def with_H(self, H: float) -> "ModelSpec":
        from dataclasses import replace
        return replace(self, H=H)


@dataclass(frozen=True)
class LinearModel(ModelSpec):
    beta0: float = 0.0
    beta1: float = -0.5
    s0: float = 0.3
    s1: float = 0.2
    name: str = field(default="linear", init=False)

    @property
    def lipschitz(self) -> float:
        return abs(self.beta1) + abs(self.s1)

    def b(self, X):
        return self.beta0 + self.beta1 * X

    def sigma(self, X):
        return _diag(self.s0 + self.s1 * X)

    def grad_b(self, X):
        return _diag(np.full_like(X, self.beta1))

    def grad_sigma(self, X):
        return _diag3(np.full_like(X, self.s1))

    def params(self):
        return {"beta0": self.beta0, "beta1": self.beta1, "s0": self.s0, "s1": self.s1}


@dataclass(frozen=True)
class TrigModel(ModelSpec):
    X0: tuple = (1.0,)
    beta0: float = 0.2
    s0: float = 0.5
    s1: float = 0.5
    name: str = field(default="trig", init=False)

    @property
    def lipschitz(self) -> float:
        return abs(self.beta0) + abs(self.s1)

    def b(self, X):
        return self.beta0 * np.sin(X)

    def sigma(self, X):
        return _diag(self.s0 + self.s1 * np.cos(X))

    def grad_b(self, X):
        return _diag(self.beta0 * np.cos(X))

    def grad_sigma(self, X):
        return _diag3(-self.s1 * np.sin(X))

    def params(self):
        return {"beta0": self.beta0, "s0": self.s0, "s1": self.s1}


@dataclass(frozen=True)
class ConstantSigmaModel(ModelSpec):
    """Constant drift and constant diffusion; the coupled pair error vanishes identically."""

    beta0: float = 0.0
    s0: float = 0.5
    name: str = field(default="constant-sigma", init=False)

    @property
    def lipschitz(self) -> float:
        return 0.0

    def b(self, X):
        return np.full_like(X, self.beta0)

    def sigma(self, X):
        return _diag(np.full_like(X, self.s0))

    def grad_b(self, X):
        return np.zeros(X.shape + (X.shape[1],))

    def grad_sigma(self, X):
        P, d = X.shape
        return np.zeros((P, d, d, d))

    def params(self):
        return {"beta0": self.beta0, "s0": self.s0}


@dataclass(frozen=True)
class CallableModel(ModelSpec):
    """User-supplied coefficients.

    Each callable takes a batch ``(P, d)`` and returns the shapes listed in the
    module docstring. Use module-level functions if the model must be sent to
    worker processes.
    """

    b_fn: Callable | None = None
    sigma_fn: Callable | None = None
    grad_b_fn: Callable | None = None
    grad_sigma_fn: Callable | None = None
    q_dim: int = 1
    lipschitz_hint: float = 1.0
    name: str = field(default="custom", init=False)

    def __post_init__(self):
        super().__post_init__()
        if None in (self.b_fn, self.sigma_fn, self.grad_b_fn, self.grad_sigma_fn):
            raise ValueError("b, sigma and both Jacobians are required")

    @property
    def q(self) -> int:
        return self.q_dim

    @property
    def lipschitz(self) -> float:
        return self.lipschitz_hint

    def b(self, X):
        return np.asarray(self.b_fn(X), dtype=float)

    def sigma(self, X):
        return np.asarray(self.sigma_fn(X), dtype=float)

    def grad_b(self, X):
        return np.asarray(self.grad_b_fn(X), dtype=float)

    def grad_sigma(self, X):
        return np.asarray(self.grad_sigma_fn(X), dtype=float)


MODELS = {
    "linear": LinearModel,
    "trig": TrigModel,
    "constant-sigma": ConstantSigmaModel,
}


def build_model(name: str, **params) -> ModelSpec:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**params)


@dataclass(frozen=True)
class LinearFunctional:
    """f(x) = scale * v.x"""

    v: tuple = (1.0,)
    scale: float = 1.0
    name: str = field(default="linear", init=False)

    def __call__(self, X):
        return self.scale * (np.asarray(X) @ np.asarray(self.v, dtype=float))

    def grad(self, X):
        X = np.asarray(X)
        return np.broadcast_to(self.scale * np.asarray(self.v, dtype=float), X.shape)


@dataclass(frozen=True)
class SmoothClip:
    """f(x) = scale * sum_i c tanh(x_i / c): Lipschitz, smooth, linear near 0."""

    c: float = 2.0
    scale: float = 1.0
    name: str = field(default="smooth-clip", init=False)

    def __call__(self, X):
        return self.scale * np.sum(self.c * np.tanh(np.asarray(X) / self.c), axis=-1)

    def grad(self, X):
        return self.scale / np.cosh(np.asarray(X) / self.c) ** 2


FUNCTIONALS = {"linear": LinearFunctional, "smooth-clip": SmoothClip}


def build_functional(name: str, d: int = 1, **params):
    if name not in FUNCTIONALS:
        raise ValueError(f"unknown functional {name!r}; choose from {sorted(FUNCTIONALS)}")
    if name == "linear" and "v" not in params:
        params["v"] = (1.0,) * d
    return FUNCTIONALS[name](**params)


def lipschitz_slope(model: ModelSpec, rng: np.random.Generator, box: float = 3.0,
                    samples: int = 1000) -> float:
    """Largest sampled (|b(x)-b(y)| + |sigma(x)-sigma(y)|) / |x-y| on [-box, box]^d."""
    x = rng.uniform(-box, box, (samples, model.d))
    y = x + rng.normal(0.0, 1e-3, x.shape) * rng.choice([1.0, 1e3], (samples, 1))
    dx = np.linalg.norm(x - y, axis=1)
    db = np.linalg.norm(model.b(x) - model.b(y), axis=1)
    ds = np.linalg.norm((model.sigma(x) - model.sigma(y)).reshape(samples, -1), axis=1)
    return float(np.max((db + ds) / dx))


def jacobian_error(model: ModelSpec, rng: np.random.Generator, points: int = 100,
                   box: float = 3.0, h: float = 1e-6) -> float:
    """Max relative deviation of the analytic Jacobians from central differences."""
    X = rng.uniform(-box, box, (points, model.d))
    fd_b = np.zeros((points, model.d, model.d))
    fd_s = np.zeros((points, model.d, model.q, model.d))
    for k in range(model.d):
        e = np.zeros(model.d)
        e[k] = h
        fd_b[..., k] = (model.b(X + e) - model.b(X - e)) / (2 * h)
        fd_s[..., k] = (model.sigma(X + e) - model.sigma(X - e)) / (2 * h)
    errs = []
    for fd, exact in ((fd_b, model.grad_b(X)), (fd_s, model.grad_sigma(X))):
        scale = max(1.0, float(np.max(np.abs(exact))))
        errs.append(float(np.max(np.abs(fd - exact))) / scale)
    return max(errs)
