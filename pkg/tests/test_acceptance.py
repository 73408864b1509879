"""Acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts the criterion.  Runtime budgets are part of the criteria and
are measured on the machine running the suite.
"""

import math
import time

import numpy as np
import pytest

from snlslab import cli
from snlslab.config import SimConfig, parse_config
from snlslab.density import resolvent_phi, small_ball_probe
from snlslab.dynamics import (
    exact_plane_wave,
    galerkin_convergence_study,
    integrate_deterministic,
    local_existence_time,
    picard_local_solve,
)
from snlslab.fluctdiss import FluctuationDissipation, ito_mass_balance
from snlslab.io import read_json, sha256_file
from snlslab.measures import (
    invariance_test,
    krylov_bogoliubov_sample,
    rejection_slope,
    scaled_measure_run,
    scaling_fit,
    sigma_levels,
    stationary_report,
)
from snlslab.noise import EnsembleNoise, GrowthPair, NoiseSpec, ou_exact_step, ou_moments, random_field
from snlslab.spectral import build_basis

pytestmark = pytest.mark.acceptance

RESULTS = {}
REF = SimConfig()  # d=1, N=8, p=7, s=2, eps=0.1, alpha=0.5, dt=1e-3


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


@pytest.fixture(scope="module")
def stationary():
    """Krylov-Bogoliubov measure of the reference configuration, burn-in 20/alpha."""
    with Timer() as tm:
        m = krylov_bogoliubov_sample(REF, burn_in=20 / REF.alpha, count=2048)
        rep = stationary_report(m, REF)
    return m, rep, tm.seconds


def test_c01_plane_wave():
    b = build_basis(1, 8)
    with Timer() as tm:
        u0 = exact_plane_wave(b, [2], 0.5, 7, 0.0)
        traj = integrate_deterministic(u0, None, 1e-4, 1.0, p=7, stride=10000)
    exact = exact_plane_wave(b, [2], 0.5, 7, 1.0).coeffs
    err = np.linalg.norm(traj.coeffs[-1] - exact) / np.linalg.norm(exact)
    ok = record(1, err <= 1e-6 and tm.seconds < 10, f"relative L2 error {err:.2e}, {tm.seconds:.1f}s")
    assert ok


def test_c02_picard_contraction():
    b = build_basis(1, 64)
    T = 1 / (2 ** 7 * 1.0 ** 6)
    worst, ball = 0.0, True
    with Timer() as tm:
        for seed in range(5):
            u0 = random_field(b, REF.s, 1.0, seed)
            info = picard_local_solve(u0, None, T, p=7, s=REF.s).info
            worst = max(worst, info["max_contraction"])
            ball &= info["ball_ok"]
    ok = record(2, worst <= 0.5 and ball and tm.seconds < 30,
                f"worst factor {worst:.3g}, sup norm within 2||u0||_s: {ball}, {tm.seconds:.1f}s")
    assert ok


def test_c03_galerkin_rate():
    s, r = REF.s, 1.0
    b = build_basis(1, 128, full_shell=False)
    with Timer() as tm:
        u0 = random_field(b, s, 1.0, 0, excess=0.51)
        T = local_existence_time(1.0, 7)
        res = galerkin_convergence_study(u0, s, r, [8, 16, 32, 64], T, p=7, dt=T / 64)
    dev = res["relative_deviation"]
    ok = record(3, dev <= 0.25 and tm.seconds < 300,
                f"slope {res['slope']:.3f} vs {res['expected_slope']:.3f} "
                f"(deviation {100 * dev:.1f}%), {tm.seconds:.1f}s")
    assert ok


def test_c04_ou_moments():
    b = build_basis(1, 8)
    spec = NoiseSpec.default(b, REF.s)
    paths, dt, alpha = 10 ** 4, 0.05, REF.alpha
    worst = 0.0
    with Timer() as tm:
        noise = EnsembleNoise(REF.seed, range(paths), b.n_modes)
        z = np.zeros((paths, b.n_modes), complex)
        checks = {10: "transient t=0.5", 800: "stationary t=40"}
        for n in range(1, 801):
            z = ou_exact_step(z, dt, alpha, REF.s, spec, noise)
            if n in checks:
                e2 = np.abs(z) ** 2
                exact = ou_moments(spec, alpha, REF.s, n * dt)
                if n == 800:
                    # the closed-form stationary value a^2 / (1 + lambda)^{s-1}
                    exact = spec.amplitudes ** 2 / (1 + b.eigenvalues) ** (REF.s - 1)
                z_score = np.abs(e2.mean(0) - exact) / (e2.std(0) / math.sqrt(paths))
                worst = max(worst, float(z_score.max()))
    ok = record(4, worst <= 3 and tm.seconds < 120,
                f"largest deviation {worst:.2f} sigma over {b.n_modes} modes x 2 times, {tm.seconds:.1f}s")
    assert ok


def test_c05_ito_mass_balance():
    with Timer() as tm:
        eng = FluctuationDissipation(REF)
        run = eng.run(np.zeros((512, eng.basis.n_modes)), 1000, REF.seed, series_every=100)
        res = ito_mass_balance(run, 1.0, level=0.99)
    ok = record(5, res["pass"] and tm.seconds < 600,
                f"residual {res['residual']:.2e}, 99% CI [{res['ci'][0]:.2e}, {res['ci'][1]:.2e}], "
                f"forcing {res['forcing']:.3f}, {tm.seconds:.1f}s")
    assert ok


def test_c06_stationary_identity(stationary):
    m, rep, sec = stationary
    ok = record(6, rep["relative_error"] <= 0.1 and sec < 900,
                f"E calM {rep['mean_calM']:.4f} vs A0N/2 {rep['target_calM']:.4f} "
                f"({100 * rep['relative_error']:.1f}%), {sec:.0f}s")
    assert ok


def test_c07_tail_bound(stationary):
    m, rep, _ = stationary
    t = rep["tail"]
    ad = rep["tail_adaptive"]
    detail = (f"tail {['%.2g' % v for v in t['tail']]} at R=1,2,4,8; slope {t['slope']:.3g}; "
              f"degenerate {t['degenerate']} (max ||u||^2 = {rep['max_mass_norm_sq']:.3f}); "
              f"quantile radii slope {ad['slope']:.2f}")
    ok = record(7, t["pass"], detail)
    assert ok


def test_c08_invariance_trend():
    ks, extra = [], []
    with Timer() as tm:
        for a in (0.5, 0.25, 0.1):
            c = REF.replace(alpha=a)
            m = krylov_bogoliubov_sample(c, count=2048, n_chains=256)
            res = invariance_test(m, 1.0, c)
            ks.append(res["max_ks"])
            obs = res["observables"]
            extra.append(max(obs[k]["ks"] for k in ("M", "E", f"norm_{c.s_minus:g}")))
    decreasing = all(b < a for a, b in zip(ks, ks[1:]))
    ok = record(8, decreasing and tm.seconds < 1800,
                f"max KS {['%.4f' % v for v in ks]} at alpha 0.5, 0.25, 0.1 "
                f"(M, E, norm only: {['%.5f' % v for v in extra]}), {tm.seconds:.0f}s")
    assert ok


def test_c09_sigma_ensemble():
    cfg = REF.replace(xi="loglog")
    growth = GrowthPair("loglog")
    levels = [1, 2, 3, 4, 5]
    with Timer() as tm:
        m, _ = scaled_measure_run(cfg, None, 32.0, growth, count=4096)
        certs = sigma_levels(m.snapshots, levels, 3, cfg.s_minus, growth, cfg, basis=m.basis)
    rejected = [int((~c.passed).sum()) for c in certs.values()]
    fit = rejection_slope(levels, rejected, len(m))
    env = max(float(c.envelope_ratio[c.passed].max()) for c in certs.values() if c.passed.any())
    ok = (not fit["degenerate"]) and fit["slope_upper"] <= -1.5 and env <= 2 and tm.seconds < 1200
    record(9, ok, f"rejected {rejected} of {len(m)}; slope {fit['slope']:.2f}, 95% upper bound "
                  f"{fit['slope_upper']:.2f}; max envelope ratio {env:.3f}, {tm.seconds:.0f}s")
    assert ok


def test_c10_resolvent():
    def bump(y):
        inside = np.abs(y) < 1
        out = np.zeros_like(y)
        out[inside] = np.exp(-1 / (1 - y[inside] ** 2))
        return out

    x = np.linspace(-3, 3, 16001)
    with Timer() as tm:
        res = [resolvent_phi(bump, lam, x).residual() for lam in (0.1, 1.0, 10.0)]
    ok = record(10, max(res) <= 1e-6 and tm.seconds < 5,
                f"relative residuals {['%.2e' % r for r in res]}, {tm.seconds:.2f}s")
    assert ok


def test_c11_small_ball(stationary):
    m, _, _ = stationary
    res = small_ball_probe(m, np.geomspace(0.01, 1.0, 25))
    ok = record(11, res["pass"] and not res["inconclusive"],
                f"C = {res['C']:.3g}, max prob/(C delta) = {res['max_ratio']:.2f} (slack 1.0)")
    assert ok


def test_c12_scaling():
    lams = [1.0, 2.0, 4.0]
    rows = []
    with Timer() as tm:
        for Lam in lams:
            rows.append(scaled_measure_run(REF, None, Lam, count=2048)[1])
    fit = scaling_fit(lams, [r["mean_calM"] for r in rows])
    stars = [r["probe"]["n_star"] for r in rows]
    large = all(n > 0 for n in stars) and all(b >= a for a, b in zip(stars, stars[1:]))
    ok = fit["r_squared"] >= 0.99 and large and tm.seconds < 1800
    record(12, ok, f"E calM {['%.3f' % r['mean_calM'] for r in rows]}, R^2 {fit['r_squared']:.4f}, "
                   f"slope {fit['slope']:.3f}; largest n with mass {[round(v, 3) for v in stars]}, {tm.seconds:.0f}s")
    assert ok


def test_c13_determinism(tmp_path):
    ec = parse_config("[model]\nN = 8\n[run]\ndt = 0.01\n"
                      "[sample]\ncount = 64\nchains = 16\nburn_in = 2\nstride = 0.5\n", {})
    cli.run("sample", ec, tmp_path / "first")
    status = cli.replay(tmp_path / "first" / "manifest.json", tmp_path / "second")
    packs = sorted(p.name for p in (tmp_path / "first").glob("*.pack"))
    same = all(sha256_file(tmp_path / "first" / p) == sha256_file(tmp_path / "second" / p) for p in packs)
    ok = status == cli.EXIT_OK and same and read_json(tmp_path / "second" / "replay.json")["identical"]
    record(13, ok, f"{len(packs)} pack(s) byte-identical after replay: {same}")
    assert ok
