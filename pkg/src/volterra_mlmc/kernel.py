"""Fractional power kernel K(u) = u^(H-1/2) / Gamma(H+1/2) and the constants built on it.

Everything here is a pure function of its arguments. Gamma values come from
``math.gamma`` (correctly rounded libm, well inside 1e-13 relative).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import roots_jacobi, roots_legendre

__all__ = [
    "KernelParams",
    "GridGeometry",
    "k_eval",
    "int_k",
    "int_k2_tail",
    "mu",
    "mu_sq_integral",
    "mu_sq_integral_quadrature",
    "g_m_h",
    "limit_noise_coeff",
    "remark_constants",
    "cov_entry",
    "cov_matrix",
    "cholesky_with_jitter",
    "pivoted_cholesky",
]

GAUSS_JACOBI_NODES = 64
GAUSS_LEGENDRE_NODES = 32


@dataclass(frozen=True)
class KernelParams:
    """Hurst index ``H`` with the Gamma constants derived from it."""

    H: float
    gamma_half: float = field(init=False)
    G: float = field(init=False)

    def __post_init__(self):
        H = float(self.H)
        if not (0.0 < H <= 0.5):
            raise ValueError(f"H must lie in (0, 1/2], got {self.H!r}")
        object.__setattr__(self, "H", H)
        gh = math.gamma(H + 0.5)
        object.__setattr__(self, "gamma_half", gh)
        object.__setattr__(self, "G", gh * gh)

    @property
    def exponent(self) -> float:
        return self.H - 0.5

    @property
    def is_brownian(self) -> bool:
        return self.H == 0.5


@dataclass(frozen=True)
class GridGeometry:
    """Nested grids: coarse step 1/n, fine step 1/(m n) on [0, T]."""

    n: int
    m: int = 1
    T: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"m must be an integer >= 1, got {self.m!r}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "T", float(self.T))

    @property
    def fine_rate(self) -> int:
        return self.n * self.m

    @property
    def delta(self) -> float:
        """Fine step 1/(m n)."""
        return 1.0 / self.fine_rate

    @property
    def fine_steps(self) -> int:
        # floor(mn T); a tiny guard absorbs representation error in T
        return int(math.floor(self.fine_rate * self.T + 1e-9))

    @property
    def coarse_steps(self) -> int:
        return int(math.floor(self.n * self.T + 1e-9))

    def floor_offsets(self, s: float) -> tuple[float, float, float]:
        """(s - [ns]/n, s - [mns]/(mn), [mns]/(mn) - [ns]/n)."""
        n, mn = self.n, self.fine_rate
        coarse = math.floor(n * s) / n
        fine = math.floor(mn * s) / mn
        return s - coarse, s - fine, fine - coarse


def _as_params(params) -> KernelParams:
    return params if isinstance(params, KernelParams) else KernelParams(params)


def k_eval(params, u):
    """Kernel value K(u); accepts scalars or arrays, all entries must be > 0."""
    p = _as_params(params)
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0):
        raise ValueError("kernel is singular at u <= 0")
    if p.is_brownian:
        out = np.ones_like(u_arr)
    else:
        out = u_arr**p.exponent / p.gamma_half
    return float(out) if out.ndim == 0 else out


def int_k(params, t: float, a: float, b: float) -> float:
    """Exact value of the integral of K(t - s) over s in [a, b]."""
    p = _as_params(params)
    if a > b or b > t:
        raise ValueError(f"need a <= b <= t, got a={a}, b={b}, t={t}")
    if a == b:
        return 0.0
    e = p.H + 0.5
    return ((t - a) ** e - (t - b) ** e) / (e * p.gamma_half)


def int_k_weights(params, delta: float, count: int) -> np.ndarray:
    """w[a-1] = integral of K(a*delta - s) over one step s in [0, delta], a = 1..count.

    Stationary drift weights of the exact-kernel scheme.
    """
    p = _as_params(params)
    a = np.arange(1, count + 1, dtype=float)
    e = p.H + 0.5
    if p.is_brownian:
        return np.full(count, delta)
    return ((a * delta) ** e - ((a - 1) * delta) ** e) / (e * p.gamma_half)


def int_k2_tail(params, delta: float) -> float:
    """Integral of K(r)^2 over r in [0, delta] = delta^(2H) / (2 H G)."""
    p = _as_params(params)
    if not delta > 0:
        raise ValueError("delta must be positive")
    return delta ** (2 * p.H) / (2 * p.H * p.G)


def mu(params, r, y):
    """(r + y)^(H-1/2) - r^(H-1/2), computed without cancellation for large r."""
    p = _as_params(params)
    r_arr = np.asarray(r, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr <= 0):
        raise ValueError("y must be positive")
    if p.is_brownian:
        out = np.zeros(np.broadcast(r_arr, y_arr).shape)
    else:
        if np.any(r_arr <= 0):
            raise ValueError("mu(r, y) needs r > 0 when H < 1/2")
        a = p.exponent
        out = r_arr**a * np.expm1(a * np.log1p(y_arr / r_arr))
    return float(out) if np.ndim(out) == 0 else out


def mu_sq_integral(params) -> float:
    """Integral of mu(r, 1)^2 over (0, inf), from the closed Gamma identity."""
    p = _as_params(params)
    if p.is_brownian:
        return 0.0
    H = p.H
    rhs = p.G / (math.gamma(2 * H) * math.sin(math.pi * H))
    return (rhs - 1.0) / (2 * H)


def _mu_sq_tail(H: float, R: float, terms: int = 12) -> float:
    """Integral of mu(r,1)^2 over (R, inf) by termwise integration of the large-r series."""
    a = H - 0.5
    # mu(r,1) = r^a * sum_k c_k r^-k with binomial coefficients c_k
    c = [0.0] * (terms + 1)
    coef = 1.0
    for k in range(1, terms + 1):
        coef *= (a - k + 1) / k
        c[k] = coef
    total = 0.0
    for j in range(2, 2 * terms + 1):
        s = sum(c[k] * c[j - k] for k in range(max(1, j - terms), min(terms, j - 1) + 1))
        total += s * R ** (2 * H - j) / (j - 2 * H)
    return total


def mu_sq_integral_quadrature(params, R: float | None = None) -> float:
    """Quadrature value of the same integral, independent of the Gamma identity.

    [0, 1] is mapped by r = u^(1/(2H)), which removes the r^(2H-1) endpoint
    singularity; [1, R] is split geometrically; beyond R the decaying
    large-r series is integrated term by term (|tail| <= a^2 R^(2H-2)/(2-2H)).
    """
    p = _as_params(params)
    if p.is_brownian:
        return 0.0
    H = p.H
    a = p.exponent
    if R is None:
        # tail bound a^2 R^(2H-2)/(2-2H) < 1e-12
        R = max(1e3, (a * a / (2 - 2 * H) / 1e-12) ** (1 / (2 - 2 * H)))
    inv = 1.0 / (2 * H)

    def head(u):
        if u == 0.0:
            return 0.0
        r = u**inv
        # mu^2 dr with dr = inv * u^(inv - 1) du; r^(2a) * u^(inv-1) = u^0
        lead = (1.0 + r) ** a
        return inv * (1.0 - lead * r ** (-a)) ** 2

    total, _ = integrate.quad(head, 0.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)
    edges = np.geomspace(1.0, R, int(math.ceil(math.log10(R))) * 2 + 1)

    def body(r):
        return float(mu(p, r, 1.0)) ** 2

    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(body, lo, hi, epsabs=1e-16, epsrel=1e-13, limit=200)
        total += val
    return total + _mu_sq_tail(H, R)


def g_m_h(m: int, H: float) -> float:
    """sum_{j<m} j^(2H) / m^(2H+1)."""
    if int(m) != m or m < 1:
        raise ValueError(f"m must be an integer >= 1, got {m!r}")
    m = int(m)
    return math.fsum(j ** (2 * H) for j in range(1, m)) / m ** (2 * H + 1)


def limit_noise_coeff(m: int, H: float) -> float:
    """Coefficient of the independent Brownian forcing in the limiting error equation."""
    g = g_m_h(m, H)
    return math.sqrt(g / (math.gamma(2 * H + 1) * math.sin(math.pi * H)))


def remark_constants(m: int, H: float) -> tuple[float, float, float]:
    """(int_0^1 g, g_m, int_0^1 g(r/m) dr) for g(x) = x^(2H)."""
    gm = g_m_h(m, H)
    return 1.0 / (2 * H + 1), gm, 1.0 / ((2 * H + 1) * m ** (2 * H))


@lru_cache(maxsize=16)
def _jacobi_rule(alpha: float, n: int):
    return roots_jacobi(n, alpha, 0.0)


@lru_cache(maxsize=4)
def _legendre_rule(n: int):
    return roots_legendre(n)


def _check_index(a, b, delta):
    if a < 1 or b < 1:
        raise ValueError("covariance indices start at 1")
    if not delta > 0:
        raise ValueError("delta must be positive")


def cov_entry(params, a: int, b: int, delta: float) -> float:
    """C_{a,b} = integral over s in [0, delta] of K(a delta - s) K(b delta - s)."""
    p = _as_params(params)
    _check_index(a, b, delta)
    if p.is_brownian:
        return float(delta)
    if a == 1 and b == 1:
        return int_k2_tail(p, delta)
    if a > b:
        a, b = b, a
    if a == 1:
        x, w = _jacobi_rule(p.exponent, GAUSS_JACOBI_NODES)
        s = 0.5 * delta * (1.0 + x)
        scale = (0.5 * delta) ** (p.H + 0.5) / p.gamma_half
        return float(scale * np.dot(w, k_eval(p, b * delta - s)))
    x, w = _legendre_rule(GAUSS_LEGENDRE_NODES)
    s = 0.5 * delta * (1.0 + x)
    vals = k_eval(p, a * delta - s) * k_eval(p, b * delta - s)
    return float(0.5 * delta * np.dot(w, vals))


def cov_matrix(params, N: int, delta: float) -> np.ndarray:
    """The N x N matrix (C_{a,b}), same quadrature rules as :func:`cov_entry`."""
    p = _as_params(params)
    if N < 1:
        return np.zeros((0, 0))
    if p.is_brownian:
        return np.full((N, N), float(delta))
    C = np.empty((N, N))
    C[0, 0] = int_k2_tail(p, delta)
    if N == 1:
        return C
    lags = np.arange(2, N + 1, dtype=float)
    xj, wj = _jacobi_rule(p.exponent, GAUSS_JACOBI_NODES)
    sj = 0.5 * delta * (1.0 + xj)
    scale = (0.5 * delta) ** (p.H + 0.5) / p.gamma_half
    first = scale * (k_eval(p, lags[:, None] * delta - sj[None, :]) @ wj)
    C[0, 1:] = first
    C[1:, 0] = first
    xl, wl = _legendre_rule(GAUSS_LEGENDRE_NODES)
    sl = 0.5 * delta * (1.0 + xl)
    Kmat = k_eval(p, lags[:, None] * delta - sl[None, :])
    C[1:, 1:] = (Kmat * (0.5 * delta * wl)) @ Kmat.T
    # the matmul is symmetric only up to rounding
    C[1:, 1:] = 0.5 * (C[1:, 1:] + C[1:, 1:].T)
    return C


def cholesky_with_jitter(C: np.ndarray, eps: float = 1e-12, retries: int = 3, growth: float = 100.0):
    """Lower Cholesky factor of C, adding eps*max(diag)*I on failure.

    Returns ``(L, jitter)`` where jitter is the absolute diagonal shift used
    (0.0 when none was needed). Raises ``np.linalg.LinAlgError`` if every
    retry fails.
    """
    C = np.asarray(C, dtype=float)
    try:
        return np.linalg.cholesky(C), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.max(np.diag(C))) if C.size else 0.0
    for _ in range(retries):
        jitter = eps * scale
        try:
            return np.linalg.cholesky(C + jitter * np.eye(len(C))), jitter
        except np.linalg.LinAlgError:
            eps *= growth
    raise np.linalg.LinAlgError("covariance not positive definite even with jitter")


def pivoted_cholesky(C: np.ndarray, rel_tol: float = 1e-13, max_rank: int | None = None) -> np.ndarray:
    """Rank-revealing pivoted Cholesky: returns F (N x r) with F F^T ~= C.

    Stops once the largest residual diagonal entry drops below
    ``rel_tol * max(diag(C))``; every entry of C - F F^T is then bounded by
    that threshold (residual is PSD).
    """
    C = np.asarray(C, dtype=float)
    N = len(C)
    if N == 0:
        return np.zeros((0, 0))
    max_rank = N if max_rank is None else min(max_rank, N)
    d = np.diag(C).copy()
    stop = rel_tol * float(d.max())
    F = np.zeros((N, max_rank))
    r = 0
    while r < max_rank:
        piv = int(np.argmax(d))
        if d[piv] <= stop:
            break
        col = C[:, piv] - F[:, :r] @ F[piv, :r]
        F[:, r] = col / math.sqrt(d[piv])
        d -= F[:, r] ** 2
        d[piv] = 0.0
        r += 1
    return np.ascontiguousarray(F[:, :r])
