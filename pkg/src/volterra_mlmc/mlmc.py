"""Multilevel Monte Carlo with coupled Euler pairs.

Level 0 samples f(X^1_T) on the one-step-per-unit grid. Level l >= 1 samples
f(X^{m^l}_T) - f(X^{m^(l-1)}_T) from pairs driven by the same noise. Every
sample has its own stream labelled (purpose, replication, level, path), so
levels and replications are independent and any worker count gives the same
numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec
from .noise import Purpose
from .scheme import LEFTPOINT, MODES, VARIANT, simulate_pair_terminals

__all__ = [
    "LevelAllocation",
    "LevelEstimate",
    "MlmcEstimate",
    "VarianceReport",
    "integer_log",
    "allocate_levels",
    "estimate_level",
    "mlmc_estimate",
    "variance_report",
]

# Relative slack so that values that are integers up to rounding are not bumped by ceil.
_CEIL_SLACK = 1e-12


def _ceil(x: float) -> int:
    return max(1, math.ceil(x * (1.0 - _CEIL_SLACK)))


def integer_log(n: int, m: int) -> int:
    """L with m**L == n; raises if n is not an integer power of m."""
    if m < 2:
        raise ValueError("m must be >= 2")
    if n < 1:
        raise ValueError("n must be >= 1")
    L, p = 0, 1
    while p < n:
        p *= m
        L += 1
    if p != n:
        raise ValueError(f"n={n} is not an integer power of m={m}")
    return L


@dataclass(frozen=True)
class LevelAllocation:
    n: int
    m: int
    alpha: float
    H: float
    T: float
    L: int
    a_seq: tuple
    N0: int
    N: tuple  # N_1..N_L

    def samples(self, level: int) -> int:
        return self.N0 if level == 0 else self.N[level - 1]

    def steps(self, level: int) -> int:
        """Grid steps simulated per sample at a level (fine plus coarse)."""
        if level == 0:
            return int(round(self.T))
        return int(round((self.m**level + self.m ** (level - 1)) * self.T))


def allocate_levels(n: int, m: int, alpha: float, H: float, a_seq=None, T: float = 1.0) -> LevelAllocation:
    L = integer_log(n, m)
    if L < 1:
        raise ValueError("need at least one correction level (n >= m)")
    if not 0.5 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [1/2, 1]")
    if not 0 < H <= 0.5:
        raise ValueError("H must lie in (0, 1/2]")
    a = tuple(float(x) for x in (a_seq if a_seq is not None else [1.0] * (L + 1)))
    if len(a) != L + 1 or min(a) <= 0:
        raise ValueError(f"a_seq needs {L + 1} positive entries")
    total = math.fsum(a[1:])
    scale = float(n) ** (2 * alpha) * total
    N = tuple(_ceil(scale / (m ** (2 * (l - 1) * H) * a[l])) for l in range(1, L + 1))
    N0 = _ceil(scale * (m - 1) * T / a[0])
    return LevelAllocation(n, m, float(alpha), float(H), float(T), L, a, N0, N)


def power_sequence(L: int, gamma: float) -> tuple:
    """a_0 = 1 and a_l = l**gamma for l >= 1."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    return (1.0,) + tuple(float(l) ** gamma for l in range(1, L + 1))


@dataclass
class LevelEstimate:
    level: int
    samples: int
    total: float
    mean: float
    variance: float
    cost: int
    values: np.ndarray | None = field(default=None, repr=False)


@dataclass
class MlmcEstimate:
    Q: float
    levels: list
    total_cost: int
    factor_cost: int
    config: dict

    def recompute(self) -> float:
        Q = 0.0
        for lv in self.levels:
            Q += lv.total / lv.samples
        return Q


def _summarize(level: int, Z: np.ndarray, cost: int, keep: bool) -> LevelEstimate:
    N = Z.shape[0]
    total = math.fsum(Z.tolist())
    mean = total / N if N else 0.0
    var = float(np.var(Z, ddof=1)) if N > 1 else 0.0
    if N > 1 and np.all(Z == Z[0]):
        var = 0.0
    return LevelEstimate(level, N, total, mean, var, cost, Z.copy() if keep else None)


def estimate_level(model: ModelSpec, f, level: int, m: int, samples: int, mode: str, seed,
                   replication: int = 0, workers: int = 1, keep_values: bool = False,
                   chunk: int = 256) -> LevelEstimate:
    """Mean and variance of the level-l correction (or of f(X^1_T) when level == 0)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if level < 0 or samples < 1:
        raise ValueError("level must be >= 0 and samples >= 1")
    if level == 0:
        labels = (Purpose.LEVEL0, replication, 0)
        fine_T, _ = simulate_pair_terminals(model, 1, 1, mode, seed, labels, samples, workers, chunk)
        Z = np.asarray(f(fine_T), dtype=float)
        steps = int(round(model.T))
    else:
        n = m ** (level - 1)
        labels = (Purpose.PAIR, replication, level)
        fine_T, coarse_T = simulate_pair_terminals(model, n, m, mode, seed, labels, samples, workers, chunk)
        Z = np.asarray(f(fine_T), dtype=float) - np.asarray(f(coarse_T), dtype=float)
        steps = int(round((m * n + n) * model.T))
    return _summarize(level, Z, samples * steps, keep_values)


def _factor_cost(alloc: LevelAllocation, mode: str) -> int:
    """Flop-style count for building the family factors, N^2 r per fine grid size."""
    if mode != VARIANT:
        return 0
    from .noise import family_factor

    cost = 0
    for level in range(1, alloc.L + 1):
        N = int(round(alloc.m**level * alloc.T))
        F, _ = family_factor(float(alloc.H), 1.0 / alloc.m**level, N)
        cost += N * N * F.shape[1]
    return cost


def mlmc_estimate(model: ModelSpec, f, n: int, m: int, alpha: float, mode: str, seed,
                  a_seq=None, replication: int = 0, workers: int = 1,
                  keep_values: bool = False) -> MlmcEstimate:
    alloc = allocate_levels(n, m, alpha, model.H, a_seq, model.T)
    levels = [
        estimate_level(model, f, l, m, alloc.samples(l), mode, seed, replication, workers, keep_values)
        for l in range(alloc.L + 1)
    ]
    Q = 0.0
    for lv in levels:
        Q += lv.total / lv.samples
    config = {
        "model": model.name, "f": getattr(f, "name", "custom"), "H": model.H, "m": m, "n": n,
        "alpha": alpha, "mode": mode, "seed": int(getattr(seed, "master_seed", seed)),
        "replication": replication,
    }
    return MlmcEstimate(Q, levels, sum(lv.cost for lv in levels), _factor_cost(alloc, mode), config)


@dataclass
class VarianceReport:
    var_Q: float
    slope: float
    intercept: float
    predicted_slope: float
    levels: tuple
    variances: tuple


def variance_report(levels, H: float, m: int) -> VarianceReport:
    """Estimated Var(Q_n) and the log-variance slope over correction levels against -2H log m."""
    usable = [lv for lv in levels if lv.level >= 1 and lv.variance > 0]
    if len(usable) < 3:
        raise ValueError("need at least 3 correction levels with positive variance")
    ell = np.array([lv.level for lv in usable], dtype=float)
    logv = np.log([lv.variance for lv in usable])
    A = np.vstack([ell, np.ones_like(ell)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, logv, rcond=None)
    var_Q = math.fsum(lv.variance / lv.samples for lv in levels)
    return VarianceReport(var_Q, float(slope), float(intercept), -2 * H * math.log(m),
                          tuple(int(x) for x in ell), tuple(lv.variance for lv in usable))
