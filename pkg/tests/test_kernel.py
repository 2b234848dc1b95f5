import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volterra_mlmc.kernel import (
    GridGeometry,
    KernelParams,
    cholesky_with_jitter,
    cov_entry,
    cov_matrix,
    g_m_h,
    int_k,
    int_k2_tail,
    int_k_weights,
    k_eval,
    limit_noise_coeff,
    mu,
    mu_sq_integral,
    mu_sq_integral_quadrature,
    pivoted_cholesky,
    remark_constants,
)

# Frozen from 30-digit mpmath evaluations of the defining integrals and sums.
ORACLE = {
    "k_quarter_1": 0.816048939098262981,
    "k_quarter_4": 0.577033738616469689,
    "int_k_quarter": 1.08806525213101730810,
    "int_k2_tail_quarter_half": 0.94177554044374894532,
    "mu_quarter_1": -0.159103584746285457,
    "mu_quarter_100": -0.000785665115580756757,
    "mu_sq_quarter": 0.39628046947118441488,
    "g_3_quarter": 0.46461561670578393241,
    "coeff_2_quarter": 0.751125544464942483,
    "remark_3_quarter_third": 0.384900179459750509,
    "cov_11_quarter": 0.66593587100340052391,
    "cov_12_quarter": 0.817739732339191095648,
}

hurst = st.floats(min_value=0.05, max_value=0.5)


class TestKernelParams:
    def test_gamma_constants(self):
        p = KernelParams(0.25)
        assert p.gamma_half == pytest.approx(math.gamma(0.75), rel=1e-15)
        assert p.G == pytest.approx(math.gamma(0.75) ** 2, rel=1e-15)

    @pytest.mark.parametrize("H", [0.0, -0.1, 0.51, 1.0])
    def test_rejects_out_of_range(self, H):
        with pytest.raises(ValueError):
            KernelParams(H)

    @given(st.floats(min_value=1e-6, max_value=50.0))
    def test_brownian_kernel_is_one(self, u):
        assert k_eval(KernelParams(0.5), u) == 1.0


class TestGeometry:
    def test_nested_grids(self):
        g = GridGeometry(8, 3, 1.0)
        fine = {j for j in range(g.fine_steps + 1)}
        assert {3 * k for k in range(g.coarse_steps + 1)} <= fine
        assert g.delta == pytest.approx(1 / 24)

    @given(st.integers(1, 64), st.integers(1, 6), st.floats(0.0, 1.0, exclude_max=True))
    def test_floor_offsets(self, n, m, s):
        a, b, c = GridGeometry(n, m).floor_offsets(s)
        assert 0 <= a < 1 / n + 1e-15
        assert 0 <= b < 1 / (m * n) + 1e-15
        assert -1e-15 <= c < 1 / n

    @pytest.mark.parametrize("bad", [dict(n=0), dict(n=2, m=0), dict(n=2, T=0.0), dict(n=1.5)])
    def test_rejects_bad_geometry(self, bad):
        with pytest.raises(ValueError):
            GridGeometry(**bad)


class TestKernelValues:
    def test_k_eval(self):
        assert k_eval(0.5, 0.37) == 1.0
        assert k_eval(0.25, 1.0) == pytest.approx(ORACLE["k_quarter_1"], rel=1e-14)
        assert k_eval(0.25, 4.0) == pytest.approx(ORACLE["k_quarter_4"], rel=1e-14)

    def test_k_eval_singular(self):
        with pytest.raises(ValueError):
            k_eval(0.25, 0.0)

    def test_int_k(self):
        assert int_k(0.5, 1.0, 0.0, 1.0) == 1.0
        assert int_k(0.25, 0.7, 0.3, 0.3) == 0.0
        assert int_k(0.25, 1.0, 0.0, 1.0) == pytest.approx(ORACLE["int_k_quarter"], rel=1e-14)
        with pytest.raises(ValueError):
            int_k(0.25, 0.5, 0.0, 1.0)

    def test_int_k2_tail(self):
        assert int_k2_tail(0.5, 1.0) == 1.0
        assert int_k2_tail(0.25, 0.5) == pytest.approx(ORACLE["int_k2_tail_quarter_half"], rel=1e-14)
        assert int_k2_tail(0.25, 1e-300) < 1e-140

    def test_mu(self):
        assert mu(0.5, 3.0, 1.0) == 0.0
        assert mu(0.25, 1.0, 1.0) == pytest.approx(ORACLE["mu_quarter_1"], rel=1e-14)
        assert mu(0.25, 100.0, 1.0) == pytest.approx(ORACLE["mu_quarter_100"], rel=1e-12)

    def test_mu_sq_integral(self):
        assert mu_sq_integral(0.5) == 0.0
        assert mu_sq_integral(0.25) == pytest.approx(ORACLE["mu_sq_quarter"], rel=1e-13)

    @pytest.mark.parametrize("H", [0.1, 0.25, 0.4, 0.5])
    def test_mu_sq_quadrature_matches_identity(self, H):
        assert abs(mu_sq_integral_quadrature(H) - mu_sq_integral(H)) < 1e-8

    def test_constants_table(self):
        assert g_m_h(2, 0.5) == pytest.approx(0.25, abs=1e-15)
        assert g_m_h(1, 0.25) == 0.0
        assert g_m_h(2, 0.25) == pytest.approx(2**-1.5, rel=1e-15)
        assert limit_noise_coeff(2, 0.5) == pytest.approx(0.5, rel=1e-14)
        assert limit_noise_coeff(1, 0.25) == 0.0
        assert limit_noise_coeff(2, 0.25) == pytest.approx(ORACLE["coeff_2_quarter"], rel=1e-14)
        assert remark_constants(2, 0.5) == pytest.approx((0.5, 0.25, 0.25), abs=1e-15)
        assert remark_constants(1, 0.25) == pytest.approx((2 / 3, 0.0, 2 / 3), abs=1e-15)
        r = remark_constants(3, 0.25)
        assert r[1] == pytest.approx(ORACLE["g_3_quarter"], rel=1e-14)
        assert r[2] == pytest.approx(ORACLE["remark_3_quarter_third"], rel=1e-14)

    def test_cov_entry(self):
        assert cov_entry(0.5, 5, 9, 0.1) == pytest.approx(0.1, rel=1e-15)
        assert cov_entry(0.25, 1, 1, 0.25) == pytest.approx(ORACLE["cov_11_quarter"], rel=1e-13)
        assert cov_entry(0.25, 1, 2, 1.0) == pytest.approx(ORACLE["cov_12_quarter"], abs=1e-10)
        with pytest.raises(ValueError):
            cov_entry(0.25, 0, 1, 0.1)


class TestKernelProperties:
    @given(hurst, st.floats(0.01, 2.0), st.floats(0.01, 2.0))
    def test_kernel_positive_decreasing(self, H, u, v):
        lo, hi = sorted((u, v))
        assert k_eval(H, lo) >= k_eval(H, hi) > 0

    @given(hurst, st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_int_k_additive(self, H, a, b, c):
        a, b, c = sorted((a, b, c))
        t = c + 0.1
        whole = int_k(H, t, a, c)
        assert whole == pytest.approx(int_k(H, t, a, b) + int_k(H, t, b, c), rel=1e-12, abs=1e-14)

    @given(hurst, st.floats(1e-3, 1.0), st.integers(1, 50))
    def test_weights_telescope(self, H, delta, count):
        w = int_k_weights(H, delta, count)
        assert math.fsum(w) == pytest.approx(int_k(H, count * delta, 0.0, count * delta), rel=1e-12)

    @given(hurst, st.floats(1e-3, 1.0))
    def test_cov_diagonal_is_tail(self, H, delta):
        assert cov_entry(H, 1, 1, delta) == pytest.approx(int_k2_tail(H, delta), rel=1e-14)

    @given(st.integers(1, 8), hurst)
    def test_g_m_between_zero_and_limit(self, m, H):
        g = g_m_h(m, H)
        assert 0 <= g <= 1 / (2 * H + 1)

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([0.1, 0.25, 0.4]), st.integers(4, 40), st.floats(1e-3, 0.5))
    def test_cov_matrix_psd_and_consistent(self, H, N, delta):
        C = cov_matrix(H, N, delta)
        assert np.allclose(C, C.T, rtol=0, atol=0)
        assert np.min(np.linalg.eigvalsh(C)) > -1e-12 * C[0, 0]
        assert C[0, 2] == pytest.approx(cov_entry(H, 1, 3, delta), rel=1e-12)
        assert C[2, 3] == pytest.approx(cov_entry(H, 3, 4, delta), rel=1e-12)


class TestFactorizations:
    def test_cholesky_exact(self):
        C = cov_matrix(0.25, 30, 1 / 30)
        L, jitter = cholesky_with_jitter(C)
        assert np.allclose(L @ L.T, C + jitter * np.eye(30), rtol=1e-8, atol=0)

    def test_cholesky_jitter_on_singular(self):
        C = np.ones((4, 4))
        L, jitter = cholesky_with_jitter(C)
        assert jitter > 0
        assert np.allclose(L @ L.T, C + jitter * np.eye(4), rtol=1e-8)

    def test_cholesky_gives_up(self):
        with pytest.raises(np.linalg.LinAlgError):
            cholesky_with_jitter(-np.eye(3))

    @pytest.mark.parametrize("H", [0.1, 0.25, 0.5])
    def test_pivoted_low_rank(self, H):
        C = cov_matrix(H, 256, 1 / 256)
        F = pivoted_cholesky(C)
        assert F.shape[1] <= 12
        assert np.max(np.abs(F @ F.T - C)) <= 1e-12 * C[0, 0]
        if H == 0.5:
            assert F.shape[1] == 1


class TestSpecInvariants:
    # Reference Gamma values, 20 significant digits.
    GAMMA = {0.75: 1.2254167024651776451, 1.5: 0.88622692545275801365, 0.5: 1.7724538509055160273}

    def test_gamma_table(self):
        for x, ref in self.GAMMA.items():
            assert math.gamma(x) == pytest.approx(ref, rel=1e-13)
        assert KernelParams(0.25).gamma_half == pytest.approx(self.GAMMA[0.75], rel=1e-13)
        assert math.sqrt(math.pi) == pytest.approx(self.GAMMA[0.5], rel=1e-15)

    @given(st.integers(1, 10_000), hurst)
    def test_g_m_sandwich(self, m, H):
        g = g_m_h(m, H)
        e = 2 * H + 1
        # integral comparison on [0, m-1] and [1, m]
        lo = (m - 1) ** e / (e * m**e)
        hi = (m**e - 1) / (e * m**e)
        assert lo * (1 - 1e-12) <= g <= hi * (1 + 1e-12) + 1e-15
        assert abs(g - 1 / e) <= 1 / m + 1e-12

    @pytest.mark.parametrize("H", [0.05 * k for k in range(1, 11)])
    def test_mishura_residual(self, H):
        p = KernelParams(H)
        rhs = p.G / (math.gamma(2 * H) * math.sin(math.pi * H))
        assert abs(2 * H * mu_sq_integral_quadrature(H) + 1 - rhs) < 1e-8

    @given(st.integers(1, 12), hurst)
    def test_remark_scaling(self, m, H):
        a, _, c = remark_constants(m, H)
        assert c * m ** (2 * H) == pytest.approx(a, rel=4e-16)

    @pytest.mark.parametrize("H", [0.1, 0.3, 0.5])
    def test_cholesky_large(self, H):
        C = cov_matrix(H, 1024, 1 / 1024)
        L, jitter = cholesky_with_jitter(C)
        assert jitter <= 1e-10 * np.max(np.diag(C))
        assert np.all(np.isfinite(L))
