"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line in RESULTS; conftest prints them after the run.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from volterra_mlmc.analysis import (
    clt_experiment,
    limit_decay_ok,
    limit_dist_experiment,
    rate_regression,
    strong_errors,
    verify_kernel_lemmas,
    verify_limit_theorems,
)
from volterra_mlmc.cli import ExperimentConfig, make_functional, make_model, run
from volterra_mlmc.kernel import (
    GridGeometry,
    g_m_h,
    limit_noise_coeff,
    mu_sq_integral,
    mu_sq_integral_quadrature,
    remark_constants,
)
from volterra_mlmc.mlmc import estimate_level, mlmc_estimate, variance_report
from volterra_mlmc.models import ConstantSigmaModel, LinearFunctional, TrigModel
from volterra_mlmc.noise import FAMILY, INCREMENTS, NoiseRealization, Purpose, draw_batch, make_noise_plan
from volterra_mlmc.scheme import VARIANT, euler_leftpoint, euler_variant, family_increments, \
    simulate_pair_terminals

SEED = 20240601
RESULTS = {}
N_LEMMA = [2**k for k in range(3, 15)]


def record(key: int, ok: bool, detail: str) -> None:
    RESULTS[key] = (bool(ok), detail)


def test_c01_constants():
    start = time.perf_counter()
    errs = [
        abs(g_m_h(2, 0.5) - 0.25),
        abs(limit_noise_coeff(2, 0.5) - 0.5),
        abs(g_m_h(1, 0.25)),
        abs(g_m_h(1, 0.5)),
    ]
    for m in (1, 2, 3, 5):
        for H in (0.1, 0.25, 0.5):
            a, _, scaled = remark_constants(m, H)
            errs.append(abs(scaled * (2 * H + 1) * m ** (2 * H) - 1.0))
            errs.append(abs(a * (2 * H + 1) - 1.0))
    elapsed = time.perf_counter() - start
    ok = max(errs) < 1e-12 and elapsed < 1.0
    record(1, ok, f"max error {max(errs):.2e}, {elapsed:.3f} s")
    assert ok


def test_c02_mu_identity():
    start = time.perf_counter()
    res = {H: abs(mu_sq_integral_quadrature(H) - mu_sq_integral(H)) for H in (0.1, 0.25, 0.4, 0.5)}
    elapsed = time.perf_counter() - start
    ok = max(res.values()) < 1e-8 and elapsed < 10
    record(2, ok, "residuals " + ", ".join(f"H={H}: {r:.1e}" for H, r in res.items()) + f"; {elapsed:.2f} s")
    assert ok


def test_c03_scheme_equivalence():
    start = time.perf_counter()
    model = TrigModel()
    plan = make_noise_plan(GridGeometry(64), 1, FAMILY, 0.5)
    fam = draw_batch(plan, SEED, (Purpose.SCHEME,), range(100))
    variant = euler_variant(model, 64, fam).states
    incs = NoiseRealization(INCREMENTS, fam.delta, increments=family_increments(fam))
    left = euler_leftpoint(model, 64, incs).states
    rel = float(np.max(np.abs(variant - left) / np.maximum(np.abs(left), 1e-300)))
    elapsed = time.perf_counter() - start
    ok = rel <= 1e-10 and elapsed < 10
    record(3, ok, f"max relative difference {rel:.1e}, {elapsed:.2f} s")
    assert ok


def test_c04_exact_coupling_null():
    start = time.perf_counter()
    diffs, variances = [], []
    for H in (0.2, 0.5):
        model = ConstantSigmaModel(H=H, beta0=0.3, s0=0.7)
        for n, m in ((1, 2), (4, 2), (8, 3), (5, 4)):
            f, c = simulate_pair_terminals(model, n, m, VARIANT, SEED, (Purpose.PAIR, 0, n), 200)
            diffs.append(float(np.max(np.abs(f - c))))
        est = mlmc_estimate(model, LinearFunctional(), 16, 2, 1.0, VARIANT, SEED)
        variances += [lv.variance for lv in est.levels[1:]] + [abs(lv.mean) for lv in est.levels[1:]]
    elapsed = time.perf_counter() - start
    ok = max(diffs) == 0.0 and max(variances) == 0.0 and elapsed < 10
    record(4, ok, f"max |fine - coarse| {max(diffs)}, max correction variance {max(variances)}, {elapsed:.2f} s")
    assert ok


@pytest.mark.parametrize("H", [0.25, 0.5])
def test_c05_strong_rate(H):
    errs = strong_errors(TrigModel(H=H), [8, 16, 32, 64, 128], 2000, SEED, ref_factor=8)
    slope = rate_regression(errs).slope
    ok = abs(slope + H) <= 0.15
    prev = RESULTS.get(5, (True, ""))
    record(5, prev[0] and ok, (prev[1] + "; " if prev[1] else "") + f"H={H}: slope {slope:.3f} vs {-H}")
    assert ok


@pytest.mark.parametrize("H", [0.25, 0.5])
def test_c06_level_variance(H):
    model = TrigModel(H=H)
    f = LinearFunctional()
    levels = [estimate_level(model, f, l, 2, 10_000, VARIANT, SEED) for l in range(1, 6)]
    rep = variance_report(levels, H, 2)
    ok = abs(rep.slope - rep.predicted_slope) <= 0.25 * abs(rep.predicted_slope)
    prev = RESULTS.get(6, (True, ""))
    record(6, prev[0] and ok, (prev[1] + "; " if prev[1] else "")
           + f"H={H}: slope {rep.slope:.3f} vs {rep.predicted_slope:.3f}")
    assert ok


def test_c07_limit_distribution():
    res = limit_dist_experiment(TrigModel(), 128, 2, 5000, SEED)
    row = res["rows"][0]
    ok = row["ks"] < 0.06 and 0.8 <= row["var_ratio"] <= 1.25
    record(7, ok, f"KS {row['ks']:.4f}, variance ratio {row['var_ratio']:.3f} (n_ref {res['n_ref']})")
    assert ok


def test_c08_clt_shape():
    cfg = ExperimentConfig.from_mapping("clt", {})
    model = make_model(cfg)
    f = make_functional(cfg, model.d)
    out = clt_experiment(model, f, [16], 2, 1.0, 500, cfg.seed, u_samples=10_000)[0]
    rep = out["report"]
    ok = (abs(rep.skewness) < 0.25 and abs(rep.excess_kurtosis) < 0.6 and rep.ks < 0.08
          and 0.5 <= out["var_ratio"] <= 2.0)
    record(8, ok, f"skew {rep.skewness:.3f}, excess kurtosis {rep.excess_kurtosis:.3f}, KS {rep.ks:.4f}, "
                  f"variance ratio {out['var_ratio']:.3f} ({cfg.model_params})")
    assert ok


PROBES = [(0.3, 0.7), (0.1, 0.9)]


def _lemma_rows():
    rows = []
    for H in (0.25, 0.5):
        rows += [dict(r, H=H) for r in verify_kernel_lemmas(H, 2, N_LEMMA, PROBES)]
    return rows


@pytest.mark.xfail(strict=True, reason="at probe (0.1, 0.9) seven quantities are exactly 0 at n=8, "
                                       "so 'below 10% of the n=8 value' cannot hold; see the decisions ledger")
def test_c09_lemma_decay():
    start = time.perf_counter()
    rows = _lemma_rows()
    elapsed = time.perf_counter() - start
    failed = [f"H={r['H']} ({r['v']},{r['s']}) {r['item']}" for r in rows if not r["passed"]]
    ok = not failed and elapsed < 60
    record(9, ok, f"{len(rows) - len(failed)}/{len(rows)} quantities pass, {elapsed:.2f} s"
                  + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok


def test_c09_failures_are_zero_at_first_resolution():
    rows = _lemma_rows()
    assert all(r["passed"] for r in rows if r["v"] == 0.3)
    failed = [r for r in rows if not r["passed"]]
    assert {(r["H"], r["item"]) for r in failed} == {
        (0.25, "est1_ii"), (0.25, "est1_iii"), (0.25, "est1_iv"), (0.25, "A_n"), (0.25, "A_mn"),
        (0.25, "E"), (0.5, "est1_iv")}
    for r in failed:
        assert r["values"][0] == 0.0 and r["bounded"] and (r["v"], r["s"]) == (0.1, 0.9)


def test_c10_riemann_suite():
    start = time.perf_counter()
    n_list = [2**k for k in range(2, 17)]
    worst, bad = 0.0, []
    for H in (0.25, 0.5):
        for m in (1, 2, 3):
            for t in (1.0, 0.7):
                for k in ("constant", "cosine"):
                    rows = verify_limit_theorems(H, m, t, n_list, k)
                    at = next(r for r in rows if r["n"] == 2**12)
                    worst = max(worst, at["first_dev"], at["second_dev"])
                    for key in ("first_dev", "second_dev"):
                        if not limit_decay_ok(rows, key):
                            bad.append((H, m, t, k, key))
    elapsed = time.perf_counter() - start
    ok = not bad and worst < 1e-2 and elapsed < 60
    record(10, ok, f"24 cases, worst deviation at n=2^12 {worst:.2e}, non-decaying {bad or 'none'}, {elapsed:.2f} s")
    assert ok


DETERMINISM_RUNS = [
    ["constants", "--H", "0.5", "--m", "2"],
    ["verify", "--H", "0.25"],
    ["variance", "--H", "0.25", "--n", "32", "--paths", "10000"],
    ["limit-dist", "--H", "0.5", "--n", "128", "--paths", "5000"],
    ["mlmc", "--H", "0.5", "--n", "16", "--reps", "3"],
]


def test_c11_determinism(tmp_path, capsys):
    same = []
    for argv in DETERMINISM_RUNS:
        outs = []
        for workers in (1, 8):
            assert run(argv + ["--workers", str(workers), "--out", str(tmp_path / f"w{workers}")]) == 0
            outdir = Path(capsys.readouterr().out.strip())
            outs.append({p.name: p.read_bytes() for p in sorted(outdir.glob("*.csv"))})
        same.append(bool(outs[0]) and outs[0] == outs[1])
    ok = all(same)
    record(11, ok, f"{sum(same)}/{len(same)} subcommand runs byte-identical across 1 and 8 workers")
    assert ok
