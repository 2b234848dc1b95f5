"""Reproducible Gaussian noise on nested grids.

Every path draws from its own counter-based Philox stream whose key is a hash
of ``(master_seed, *labels)``, so a path's randomness never depends on which
worker simulated it or in what order.

Two noise modes exist. ``increments`` gives plain Brownian increments on the
fine grid. ``family`` gives, for every fine interval j, the jointly Gaussian
vector I[j][k] = int_{t_j}^{t_{j+1}} K(t_k - s) dW_s, k > j, which is what the
exact-kernel scheme needs at grid points. The covariance of that vector does
not depend on j, so one factor F (F F^T = C) serves every interval and a
realization only stores the standard normals z: I[j][j+a] = (F z_j)[a-1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .kernel import GridGeometry, KernelParams, cholesky_with_jitter, cov_matrix, pivoted_cholesky

__all__ = [
    "ConfigurationError",
    "SeedSpec",
    "Purpose",
    "derive_stream",
    "NoisePlan",
    "make_noise_plan",
    "NoiseRealization",
    "sample_increments",
    "sample_kernel_family",
    "coarsen_increments",
    "family_factor",
    "draw_batch",
    "INCREMENTS",
    "FAMILY",
]

INCREMENTS = "increments"
FAMILY = "family"


class ConfigurationError(ValueError):
    """Noise requested in a form the plan cannot provide."""


class Purpose:
    """Integer tags for the first stream label."""

    PAIR = 1
    LEVEL0 = 2
    LIMIT_W = 3
    LIMIT_B = 4
    RATE = 5
    SCHEME = 6


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int

    def __post_init__(self):
        seed = int(self.master_seed)
        if not 0 <= seed < 2**64:
            raise ValueError("master seed must fit in 64 unsigned bits")
        object.__setattr__(self, "master_seed", seed)

    def stream(self, *labels: int) -> np.random.Generator:
        return derive_stream(self, *labels)


def derive_stream(seed, *labels: int) -> np.random.Generator:
    """Independent generator for a label tuple; a pure function of (seed, labels)."""
    master = seed.master_seed if isinstance(seed, SeedSpec) else int(seed)
    key = tuple(int(x) for x in labels)
    if any(x < 0 for x in key):
        raise ValueError("stream labels must be nonnegative integers")
    ss = np.random.SeedSequence(master, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


@lru_cache(maxsize=32)
def family_factor(H: float, delta: float, N: int, method: str = "pivoted"):
    """Cached factor F of the stationary family covariance, and the jitter used.

    ``method='cholesky'`` is the full lower-triangular factor (with diagonal
    jitter on failure). ``method='pivoted'`` truncates a pivoted Cholesky once
    the residual is below 1e-13 of the largest variance, giving an N x r
    factor with r small (the kernel is smooth away from its own interval).
    """
    params = KernelParams(H)
    C = cov_matrix(params, N, delta)
    if method == "cholesky":
        F, jitter = cholesky_with_jitter(C)
    elif method == "pivoted":
        F, jitter = pivoted_cholesky(C), 0.0
    else:
        raise ValueError(f"unknown factorization {method!r}")
    F.setflags(write=False)
    return F, jitter


@dataclass(frozen=True)
class NoisePlan:
    geometry: GridGeometry
    q: int
    mode: str
    H: float | None = None
    factor: np.ndarray | None = None
    jitter: float = 0.0

    @property
    def N(self) -> int:
        return self.geometry.fine_steps

    @property
    def delta(self) -> float:
        return self.geometry.delta

    @property
    def rank(self) -> int:
        return 0 if self.factor is None else self.factor.shape[1]


def make_noise_plan(geometry: GridGeometry, q: int, mode: str, H: float | None = None,
                    factorization: str = "pivoted") -> NoisePlan:
    if mode not in (INCREMENTS, FAMILY):
        raise ValueError(f"mode must be {INCREMENTS!r} or {FAMILY!r}, got {mode!r}")
    if q < 1:
        raise ValueError("q must be >= 1")
    if mode == INCREMENTS:
        return NoisePlan(geometry, int(q), mode, H)
    if H is None:
        raise ConfigurationError("kernel family needs H")
    N = geometry.fine_steps
    if N == 0:
        return NoisePlan(geometry, int(q), mode, H, np.zeros((0, 0)), 0.0)
    F, jitter = family_factor(float(H), geometry.delta, N, factorization)
    return NoisePlan(geometry, int(q), mode, float(H), F, jitter)


@dataclass
class NoiseRealization:
    """One path's noise. Arrays may carry extra leading (batch) axes."""

    mode: str
    delta: float
    increments: np.ndarray | None = None  # (..., N, q)
    z: np.ndarray | None = None  # (..., N, q, r)
    factor: np.ndarray | None = None  # (N, r)

    @property
    def N(self) -> int:
        arr = self.increments if self.mode == INCREMENTS else self.z
        return arr.shape[-2] if self.mode == INCREMENTS else arr.shape[-3]

    @property
    def q(self) -> int:
        return self.increments.shape[-1] if self.mode == INCREMENTS else self.z.shape[-2]

    def family_row(self, j: int) -> np.ndarray:
        """I[j][j+1..N], shape (..., N - j, q)."""
        if self.mode != FAMILY:
            raise ConfigurationError("not a kernel-family realization")
        F = self.factor[: self.N - j]
        return np.einsum("ar,...cr->...ac", F, self.z[..., j, :, :])

    def family_dense(self) -> np.ndarray:
        """All I[j][k] as an (..., N, N + 1, q) array, zero for k <= j. Small N only."""
        N = self.N
        lead = self.z.shape[:-3]
        out = np.zeros(lead + (N, N + 1, self.q))
        for j in range(N):
            out[..., j, j + 1:, :] = self.family_row(j)
        return out


def sample_increments(plan: NoisePlan, stream: np.random.Generator) -> NoiseRealization:
    if plan.mode != INCREMENTS:
        raise ConfigurationError("plan is not in increments mode")
    dW = math.sqrt(plan.delta) * stream.standard_normal((plan.N, plan.q))
    return NoiseRealization(INCREMENTS, plan.delta, increments=dW)


def sample_kernel_family(plan: NoisePlan, stream: np.random.Generator) -> NoiseRealization:
    if plan.mode != FAMILY or plan.factor is None:
        raise ConfigurationError("kernel family needs a family-mode plan with a factor")
    z = stream.standard_normal((plan.N, plan.q, plan.rank))
    return NoiseRealization(FAMILY, plan.delta, z=z, factor=plan.factor)


def coarsen_increments(fine, m: int) -> np.ndarray:
    """Block sums of m consecutive fine increments, added in ascending order.

    Accepts a realization or an array whose last two axes are (N, q).
    """
    dW = fine.increments if isinstance(fine, NoiseRealization) else np.asarray(fine, dtype=float)
    N = dW.shape[-2]
    if m < 1 or N % m:
        raise ValueError(f"{N} fine steps are not divisible by m={m}")
    blocks = dW.reshape(dW.shape[:-2] + (N // m, m, dW.shape[-1]))
    out = blocks[..., 0, :].copy()
    for i in range(1, m):
        out += blocks[..., i, :]
    return out


def draw_batch(plan: NoisePlan, seed, labels_prefix: tuple, paths) -> NoiseRealization:
    """Stacked realizations for the given path indices, one stream per path."""
    draws = []
    for p in paths:
        rng = derive_stream(seed, *labels_prefix, int(p))
        if plan.mode == INCREMENTS:
            draws.append(rng.standard_normal((plan.N, plan.q)))
        else:
            draws.append(rng.standard_normal((plan.N, plan.q, plan.rank)))
    if plan.mode == INCREMENTS:
        shape = (0, plan.N, plan.q)
        arr = np.stack(draws) if draws else np.zeros(shape)
        return NoiseRealization(INCREMENTS, plan.delta, increments=math.sqrt(plan.delta) * arr)
    shape = (0, plan.N, plan.q, plan.rank)
    arr = np.stack(draws) if draws else np.zeros(shape)
    return NoiseRealization(FAMILY, plan.delta, z=arr, factor=plan.factor)
