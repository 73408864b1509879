import numpy as np
import pytest
from hypothesis import given, strategies as st

from snlslab.config import SimConfig
from snlslab.fluctdiss import (
    CHI_DERIVATIVE_BOUNDS,
    FluctuationDissipation,
    bootstrap_mean_ci,
    chi_R,
    dissipation_E,
    dissipation_M,
    fit_cross_constant,
    ito_energy_balance,
    ito_mass_balance,
    sde_step,
)
from snlslab.noise import GrowthPair, NoiseSpec, RngStream, random_field
from snlslab.spectral import build_basis


def small_cfg(**kw):
    base = dict(N=4, alpha=0.5, dt=1e-3)
    base.update(kw)
    return SimConfig(**base)


class TestStep:
    def test_zero_alpha_is_hamiltonian(self):
        eng = FluctuationDissipation(small_cfg(alpha=0.0))
        c = random_field(eng.basis, 2.0, 0.5, 0).coeffs
        assert np.array_equal(eng.step(c, 1e-3, np.ones(c.shape + (2,))), eng.ham.step(c, 1e-3))

    def test_linear_damping_exact(self):
        cfg = small_cfg(nonlinear=False)
        eng = FluctuationDissipation(cfg)
        c = random_field(eng.basis, 2.0, 0.5, 1).coeffs
        w, _ = eng.weight(c)
        out = eng.step(c, 0.01)
        lam = eng.basis.eigenvalues
        expect = c * np.exp(-1j * (1 + lam) * 0.01) * np.exp(-0.5 * ((1 + lam) + w) * 0.01)
        assert np.allclose(out, expect, atol=1e-15)

    def test_sde_step_matches_engine(self):
        cfg = small_cfg()
        eng = FluctuationDissipation(cfg)
        u = random_field(eng.basis, 2.0, 0.5, 2)
        z = RngStream(0, 0).normals((eng.basis.n_modes, 2))
        got = sde_step(u, 1e-3, cfg, eng.spec, eng.growth, RngStream(0, 0)).coeffs
        assert np.allclose(got, eng.step(u.coeffs.copy(), 1e-3, z))

    def test_spec_basis_mismatch(self):
        with pytest.raises(ValueError):
            FluctuationDissipation(small_cfg(), NoiseSpec.default(build_basis(1, 8), 2.0),
                                   basis=build_basis(1, 4))

    def test_calM_matches_rate(self):
        cfg = small_cfg()
        eng = FluctuationDissipation(cfg)
        u = random_field(eng.basis, 2.0, 0.7, 3)
        rate = dissipation_M(u, cfg.s, cfg.eps, eng.growth)
        assert eng.calM(u.coeffs[None])[0] == pytest.approx(rate)

    def test_calE_matches_rate(self):
        cfg = small_cfg()
        eng = FluctuationDissipation(cfg)
        u = random_field(eng.basis, 2.0, 0.7, 3)
        rate = dissipation_E(u, cfg.s, cfg.eps, eng.growth, cfg.p)
        assert eng.calE(u.coeffs[None])[0] == pytest.approx(rate.value)


class TestRun:
    def test_thread_invariance(self):
        eng = FluctuationDissipation(small_cfg())
        C0 = np.zeros((300, eng.basis.n_modes), complex)
        a = eng.run(C0, 20, seed=4, threads=1)
        b = FluctuationDissipation(small_cfg()).run(C0, 20, seed=4, threads=2)
        assert np.array_equal(a.final, b.final)
        assert np.array_equal(a.int_calM, b.int_calM)

    def test_path_depends_only_on_index(self):
        eng = FluctuationDissipation(small_cfg())
        C0 = np.zeros((4, eng.basis.n_modes), complex)
        full = eng.run(C0, 30, seed=1, indices=[5, 6, 7, 8])
        one = eng.run(C0[:1], 30, seed=1, indices=[7])
        # same noise; batched products may differ in the last bits
        assert np.allclose(full.final[2], one.final[0], rtol=1e-12, atol=1e-15)

    def test_snapshots_and_series(self):
        eng = FluctuationDissipation(small_cfg())
        run = eng.run(np.zeros((2, eng.basis.n_modes)), 10, seed=0, snapshot_steps=(0, 5, 10),
                      series_every=5)
        assert run.snapshots.shape == (2, 3, eng.basis.n_modes)
        assert np.allclose(run.times, [0, 0.005, 0.01])
        assert np.all(run.snapshots[:, 0] == 0)
        assert run.time_index(0.01) == 2
        with pytest.raises(ValueError):
            run.time_index(0.003)


class TestBalances:
    def test_mass_balance(self):
        cfg = small_cfg()
        eng = FluctuationDissipation(cfg)
        run = eng.run(np.zeros((400, eng.basis.n_modes)), 200, seed=3)
        res = ito_mass_balance(run, 0.2)
        assert res["pass"]
        assert res["forcing"] == pytest.approx(0.5 * eng.spec.A(0) * 0.2 / 2)

    def test_mass_balance_needs_paths(self):
        eng = FluctuationDissipation(small_cfg())
        run = eng.run(np.zeros((10, eng.basis.n_modes)), 5, seed=0)
        with pytest.raises(ValueError):
            ito_mass_balance(run, 0.005)

    def test_energy_balance(self):
        cfg = small_cfg()
        eng = FluctuationDissipation(cfg)
        C0 = np.stack([random_field(eng.basis, 2.0, 0.5, k).coeffs for k in range(300)])
        run = eng.run(C0, 200, seed=2, track_energy=True)
        res = ito_energy_balance(run, 0.2)
        assert res["exact_pass"]
        with pytest.raises(ValueError):
            ito_energy_balance(eng.run(C0, 2, seed=0), 0.002)


class TestCutoff:
    @given(x=st.floats(0, 10), R=st.floats(0.1, 5))
    def test_range_and_support(self, x, R):
        v = float(chi_R(x, R))
        assert 0.0 <= v <= 1.0
        if x <= R:
            assert v == 1.0
        if x >= 2 * R:
            assert v == 0.0

    @given(x=st.floats(0, 3), y=st.floats(0, 3))
    def test_nonincreasing(self, x, y):
        lo, hi = sorted((x, y))
        assert chi_R(lo, 1.0) >= chi_R(hi, 1.0)

    def test_derivatives_by_differences(self):
        x = np.linspace(2.1, 3.9, 37)
        h = 1e-5
        d1 = (chi_R(x + h, 2.0) - chi_R(x - h, 2.0)) / (2 * h)
        d2 = (chi_R(x + h, 2.0) - 2 * chi_R(x, 2.0) + chi_R(x - h, 2.0)) / h ** 2
        assert np.allclose(chi_R(x, 2.0, 1), d1, atol=1e-7)
        assert np.allclose(chi_R(x, 2.0, 2), d2, atol=1e-3)

    @given(R=st.floats(0.05, 20), m=st.sampled_from([1, 2]))
    def test_derivative_scaling(self, R, m):
        x = np.linspace(0, 3 * R, 3001)
        assert np.max(np.abs(chi_R(x, R, m))) <= CHI_DERIVATIVE_BOUNDS[m - 1] * R ** -m * (1 + 1e-9)

    def test_derivative_bounds(self):
        # independent high-precision differentiation gives 2 and 9.84100
        assert CHI_DERIVATIVE_BOUNDS[0] == pytest.approx(2.0, rel=1e-9)
        assert CHI_DERIVATIVE_BOUNDS[1] == pytest.approx(9.84100, rel=1e-5)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            chi_R(1.0, 0.0)
        with pytest.raises(ValueError):
            chi_R(1.5, 1.0, 3)


def test_cross_constant_lower_bound():
    b = build_basis(1, 8)
    fields = [random_field(b, 2.0, n, k) for k, n in enumerate((0.2, 0.5, 1.0))]
    C_s = fit_cross_constant(fields, 2.0, 0.1, 7.0)
    g = GrowthPair("log1p")
    for u in fields:
        e = dissipation_E(u, 2.0, 0.1, g, 7.0)
        assert e.lower_bound(C_s) <= e.value + 1e-12


def test_bootstrap_ci():
    lo, hi = bootstrap_mean_ci(np.full(5, 2.0))
    assert lo == hi == 2.0
    vals = np.random.default_rng(0).normal(size=400)
    lo, hi = bootstrap_mean_ci(vals, 0.99)
    assert lo < vals.mean() < hi
