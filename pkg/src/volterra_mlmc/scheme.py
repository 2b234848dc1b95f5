"""Euler schemes for stochastic Volterra equations and their coupled pairs.

All simulators work on batches of paths (leading axis P) and fold one grid
step at a time: after the state at step j is known, its drift and noise
contributions are added to the running sums of every later grid point. Sums
are compensated (Kahan) and always run in ascending j.

In ``variant`` mode a single loop over fine intervals serves every grid that
is coarser by an integer factor. Each grid point receives, from fine interval
i, the term ``b * w + sum_c sigma_c * I_c`` evaluated with the frozen state of
the grid interval containing i. When the coefficients are constant the fine
and coarse sums at a shared time are therefore the same floating point
operations in the same order, and the coupled difference is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .kernel import GridGeometry, KernelParams, int_k_weights, k_eval, limit_noise_coeff
from .models import ModelSpec
from .noise import (
    FAMILY,
    INCREMENTS,
    ConfigurationError,
    NoiseRealization,
    Purpose,
    coarsen_increments,
    derive_stream,
    draw_batch,
    make_noise_plan,
)
from .parallel import run_chunked

__all__ = [
    "LEFTPOINT",
    "VARIANT",
    "PathGrid",
    "CoupledPair",
    "euler_leftpoint",
    "euler_variant",
    "simulate_grids",
    "simulate_coupled_pair",
    "simulate_pair_terminals",
    "normalized_error",
    "simulate_limit_u",
    "family_increments",
]

LEFTPOINT = "leftpoint"
VARIANT = "variant"
MODES = (LEFTPOINT, VARIANT)


@dataclass
class PathGrid:
    rate: int  # grid steps per unit time
    states: np.ndarray  # (..., N + 1, d)

    @property
    def steps(self) -> int:
        return self.states.shape[-2] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) / self.rate

    @property
    def terminal(self) -> np.ndarray:
        return self.states[..., -1, :]


@dataclass
class CoupledPair:
    fine: PathGrid
    coarse: PathGrid
    mode: str
    H: float
    n: int
    m: int
    noise_id: tuple

    def shared(self) -> tuple[np.ndarray, np.ndarray]:
        """Fine and coarse states at the coarse grid times."""
        return self.fine.states[..., :: self.m, :], self.coarse.states


class _Compensated:
    """Running sums with Kahan compensation, shape (P, N + 1, d)."""

    def __init__(self, P: int, N: int, d: int):
        self.acc = np.zeros((P, N + 1, d))
        self.comp = np.zeros((P, N + 1, d))

    def add(self, start: int, contrib: np.ndarray) -> None:
        acc = self.acc[:, start:]
        comp = self.comp[:, start:]
        y = contrib - comp
        t = acc + y
        comp[...] = (t - acc) - y
        acc[...] = t


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _fold_leftpoint(model: ModelSpec, rate: int, dW: np.ndarray) -> np.ndarray:
    """Left-point scheme at step 1/rate; dW has shape (P, N, q)."""
    P, N, q = dW.shape
    d = model.d
    dt = 1.0 / rate
    x0 = model.x0
    kw = np.asarray(k_eval(KernelParams(model.H), dt * np.arange(1, N + 1)), dtype=float)
    sums = _Compensated(P, N, d)
    for j in range(N):
        X = x0 + sums.acc[:, j]
        s = model.sigma(X)
        inc = model.b(X) * dt
        for c in range(q):
            inc = inc + s[:, :, c] * dW[:, j, c, None]
        sums.add(j + 1, kw[None, : N - j, None] * inc[:, None, :])
    return x0 + sums.acc


def _fold_variant(model: ModelSpec, noise: NoiseRealization, factors) -> dict:
    """Exact-kernel scheme on every grid coarser than the noise grid by a factor in ``factors``."""
    z, F = noise.z, noise.factor
    P, N, q, _ = z.shape
    d = model.d
    x0 = model.x0
    w = int_k_weights(KernelParams(model.H), noise.delta, N)
    grids = {}
    for mc in factors:
        if N % mc:
            raise ValueError(f"{N} fine steps are not divisible by {mc}")
        grids[mc] = {"sums": _Compensated(P, N // mc, d), "b": None, "s": None}
    for i in range(N):
        I = np.einsum("ar,pcr->pac", F[: N - i], z[:, i])  # (P, N - i, q)
        for mc, g in grids.items():
            Nc = N // mc
            j = i // mc
            if j >= Nc:
                continue
            sums = g["sums"]
            if i % mc == 0:
                X = x0 + sums.acc[:, j]
                g["b"], g["s"] = model.b(X), model.sigma(X)
            idx = np.arange(j + 1, Nc + 1) * mc - i - 1
            contrib = g["b"][:, None, :] * w[idx][None, :, None]
            for c in range(q):
                contrib = contrib + g["s"][:, None, :, c] * I[:, idx, c][:, :, None]
            sums.add(j + 1, contrib)
    return {mc: x0 + g["sums"].acc for mc, g in grids.items()}


def family_increments(noise: NoiseRealization) -> np.ndarray:
    """Plain increments recovered from a family at H = 1/2, where I[j][k] = dW_j for all k."""
    if noise.mode != FAMILY:
        raise ConfigurationError("not a kernel-family realization")
    return np.einsum("r,...jcr->...jc", noise.factor[0], noise.z)


def _batched(arr: np.ndarray, core_ndim: int):
    if arr.ndim == core_ndim:
        return arr[None], True
    return arr, False


def euler_leftpoint(model: ModelSpec, n: int, noise: NoiseRealization) -> PathGrid:
    """Left-point Euler scheme at step 1/n driven by Brownian increments."""
    if noise.mode != INCREMENTS:
        raise ConfigurationError("left-point scheme needs increments")
    N = int(math.floor(n * model.T + 1e-9))
    if noise.N != N or not math.isclose(noise.delta, 1.0 / n, rel_tol=1e-12):
        raise ValueError("noise does not match the grid")
    dW, single = _batched(noise.increments, 2)
    states = _fold_leftpoint(model, n, dW)
    return PathGrid(n, states[0] if single else states)


def euler_variant(model: ModelSpec, n: int, noise: NoiseRealization) -> PathGrid:
    """Exact-kernel Euler scheme at step 1/n, driven by a family on the same or a finer grid."""
    if noise.mode != FAMILY or noise.factor is None:
        raise ConfigurationError("variant scheme needs a kernel family")
    ratio = 1.0 / (n * noise.delta)
    mf = int(round(ratio))
    if mf < 1 or abs(ratio - mf) > 1e-9 or noise.N % mf:
        raise ValueError("noise grid does not refine the scheme grid")
    if noise.N != int(math.floor(n * mf * model.T + 1e-9)):
        raise ValueError("noise does not cover the horizon")
    z, single = _batched(noise.z, 3)
    states = _fold_variant(model, NoiseRealization(FAMILY, noise.delta, z=z, factor=noise.factor), [mf])[mf]
    return PathGrid(n, states[0] if single else states)


def _geometry(model: ModelSpec, n: int, m: int) -> GridGeometry:
    geo = GridGeometry(n, m, model.T)
    if abs(n * model.T - round(n * model.T)) > 1e-9:
        raise ValueError("n * T must be an integer")
    return geo


def simulate_grids(model: ModelSpec, fine_rate: int, factors, mode: str, seed, labels: tuple,
                   paths, factorization: str = "pivoted") -> dict:
    """States on the grids at rates fine_rate / f for f in ``factors``, all on one noise draw per path.

    Returns ``{f: array (P, N/f + 1, d)}``. Path p uses the stream ``labels + (p,)``.
    """
    _check_mode(mode)
    geo = _geometry(model, fine_rate, 1)
    plan = make_noise_plan(geo, model.q, INCREMENTS if mode == LEFTPOINT else FAMILY,
                           model.H, factorization)
    noise = draw_batch(plan, seed, tuple(labels), paths)
    if mode == VARIANT:
        return _fold_variant(model, noise, list(factors))
    out = {}
    for f in factors:
        if plan.N % f:
            raise ValueError(f"{plan.N} fine steps are not divisible by {f}")
        dW = noise.increments if f == 1 else coarsen_increments(noise.increments, f)
        out[f] = _fold_leftpoint(model, fine_rate // f, dW)
    return out


def simulate_coupled_pair(model: ModelSpec, n: int, m: int, mode: str, seed,
                          labels: tuple = (Purpose.PAIR, 0), path: int = 0,
                          factorization: str = "pivoted") -> CoupledPair:
    """One fine (step 1/(mn)) and coarse (step 1/n) trajectory on a shared noise draw."""
    if m < 1:
        raise ValueError("m must be >= 1")
    _geometry(model, n, m)
    grids = simulate_grids(model, m * n, [1, m], mode, seed, labels, [path], factorization)
    fine = PathGrid(m * n, grids[1][0])
    coarse = PathGrid(n, grids[m][0])
    return CoupledPair(fine, coarse, mode, model.H, n, m, tuple(labels) + (path,))


def _pair_chunk(model, n, m, mode, seed, labels, factorization, start, stop):
    grids = simulate_grids(model, m * n, [1, m], mode, seed, labels, range(start, stop), factorization)
    return np.stack([grids[1][:, -1], grids[m][:, -1]])


def simulate_pair_terminals(model: ModelSpec, n: int, m: int, mode: str, seed, labels: tuple,
                            n_paths: int, workers: int = 1, chunk: int = 256,
                            factorization: str = "pivoted"):
    """Terminal fine and coarse values of ``n_paths`` independent coupled pairs, each (P, d)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    _geometry(model, n, m)
    fn = partial(_pair_chunk, model, n, m, mode, seed, tuple(labels), factorization)
    parts = run_chunked(fn, n_paths, workers=workers, chunk=chunk)
    if not parts:
        return np.zeros((0, model.d)), np.zeros((0, model.d))
    both = np.concatenate(parts, axis=1)
    return both[0], both[1]


def normalized_error(pair, H: float | None = None, n: int | None = None) -> np.ndarray:
    """n^H (X^{mn}_T - X^n_T) for a CoupledPair, or for a (fine_T, coarse_T) tuple given n."""
    if isinstance(pair, CoupledPair):
        H = pair.H if H is None else H
        return pair.n ** H * (pair.fine.terminal - pair.coarse.terminal)
    fine_T, coarse_T = pair
    return n ** H * (np.asarray(fine_T) - np.asarray(coarse_T))


def _limit_chunk(model, n_ref, m, seed, labels, start, stop):
    P = stop - start
    d, q = model.d, model.q
    N = int(math.floor(n_ref * model.T + 1e-9))
    dt = 1.0 / n_ref
    sq = math.sqrt(dt)
    dW = np.zeros((P, N, q))
    dB = np.zeros((P, N, q * q))
    for k, p in enumerate(range(start, stop)):
        dW[k] = sq * _stream(seed, labels, Purpose.LIMIT_W, p).standard_normal((N, q))
        dB[k] = sq * _stream(seed, labels, Purpose.LIMIT_B, p).standard_normal((N, q * q))
    coeff = limit_noise_coeff(m, model.H)
    kw = np.asarray(k_eval(KernelParams(model.H), dt * np.arange(1, N + 1)), dtype=float)
    x0 = model.x0
    # K = 1 at H = 1/2: a single running sum replaces the per-point sums.
    brownian = KernelParams(model.H).is_brownian
    xs = _Compensated(P, 0 if brownian else N, d)
    us = _Compensated(P, 0 if brownian else N, d)
    for j in range(N):
        X = x0 + xs.acc[:, 0 if brownian else j]
        U = us.acc[:, 0 if brownian else j]
        s = model.sigma(X)
        gs = model.grad_sigma(X)
        incX = model.b(X) * dt
        incU = np.einsum("pik,pk->pi", model.grad_b(X), U) * dt
        for c in range(q):
            incX = incX + s[:, :, c] * dW[:, j, c, None]
            incU = incU + np.einsum("pik,pk->pi", gs[:, :, c, :], U) * dW[:, j, c, None]
        if coeff:
            for l in range(q):
                for c in range(q):
                    forcing = np.einsum("pik,pk->pi", gs[:, :, c, :], s[:, :, l])
                    incU = incU + coeff * forcing * dB[:, j, l * q + c, None]
        if brownian:
            xs.add(0, incX[:, None, :])
            us.add(0, incU[:, None, :])
            continue
        w = kw[None, : N - j, None]
        xs.add(j + 1, w * incX[:, None, :])
        us.add(j + 1, w * incU[:, None, :])
    return np.stack([x0 + xs.acc[:, -1], us.acc[:, -1]])


def _stream(seed, labels, purpose, path):
    return derive_stream(seed, *labels, purpose, path)


def simulate_limit_u(model: ModelSpec, n_ref: int, m: int, seed, labels: tuple = (),
                     n_paths: int = 1, workers: int = 1, chunk: int = 256):
    """Samples of (X_T, U_T) for the limiting linear equation of the normalized coupling error.

    X and U are advanced together by the left-point scheme at step 1/n_ref;
    B is an independent q*q-dimensional Brownian motion. Returns two (P, d) arrays.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if abs(n_ref * model.T - round(n_ref * model.T)) > 1e-9:
        raise ValueError("n_ref * T must be an integer")
    fn = partial(_limit_chunk, model, n_ref, m, seed, tuple(labels))
    parts = run_chunked(fn, n_paths, workers=workers, chunk=chunk)
    if not parts:
        return np.zeros((0, model.d)), np.zeros((0, model.d))
    both = np.concatenate(parts, axis=1)
    return both[0], both[1]
