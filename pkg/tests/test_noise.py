import numpy as np
import pytest
from hypothesis import given, strategies as st

from snlslab.noise import (
    LOG_SATURATION,
    EnsembleNoise,
    GrowthPair,
    NoiseSpec,
    RngStream,
    noise_increment,
    ou_exact_step,
    ou_moments,
    random_field,
)
from snlslab.spectral import build_basis


class TestGrowthPair:
    @pytest.mark.parametrize("name", ["log1p", "loglog", "identity"])
    @given(x=st.floats(0, 50))
    def test_inverse(self, name, x):
        g = GrowthPair(name)
        assert g.xi_inv(g.xi(x)) == pytest.approx(x, rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("name", ["log1p", "loglog"])
    @given(x=st.floats(0, 1e6), y=st.floats(0, 1e6))
    def test_concave_increasing(self, name, x, y):
        g = GrowthPair(name)
        lo, hi = sorted((x, y))
        assert g.xi(lo) <= g.xi(hi)
        # midpoint concavity
        assert g.xi((lo + hi) / 2) >= (g.xi(lo) + g.xi(hi)) / 2 - 1e-12

    def test_rho_is_three_inverse(self):
        g = GrowthPair("log1p")
        assert g.rho(2.0) == pytest.approx(3 * np.expm1(2.0))

    def test_weight_saturates(self):
        w, sat = GrowthPair("log1p").weight(np.array([0.0, 1.0, 10.0]))
        assert not sat[0] and not sat[1] and sat[2]
        assert w[2] == pytest.approx(np.exp(LOG_SATURATION))

    def test_C_identity_closed_form(self):
        # sup x^p exp(-3x) = (p/3)^p e^{-p}
        p = 2.0
        assert GrowthPair("identity").C(p) == pytest.approx((p / 3) ** p * np.exp(-p), rel=1e-9)

    def test_unknown(self):
        with pytest.raises(ValueError):
            GrowthPair("sqrt")


class TestNoiseSpec:
    def test_default_law(self):
        b = build_basis(1, 4)
        spec = NoiseSpec.default(b, 2.0)
        assert np.allclose(spec.amplitudes, (1 + b.eigenvalues) ** -1.5)

    def test_A_counts_two_channels(self):
        b = build_basis(1, 2)
        spec = NoiseSpec(b, np.array([1.0, 0.5, 0.5]))
        assert spec.A(0) == pytest.approx(2 * (1 + 0.25 + 0.25))
        assert spec.A(1) == pytest.approx(2 * (0.25 + 0.25))

    def test_A_full_closed_form(self):
        # d=1, a_k = (1 + k^2)^{-1}: sum_k a_k^2 = (pi coth(pi) + pi^2 csch^2(pi)) / 2
        spec = NoiseSpec.default(build_basis(1, 8), 1.0)
        exact = (np.pi / np.tanh(np.pi) + np.pi ** 2 / np.sinh(np.pi) ** 2) / 2
        assert spec.A_full(0) == pytest.approx(2 * exact, rel=1e-9)

    def test_A_full_dominates_truncation(self):
        spec = NoiseSpec.default(build_basis(2, 12), 2.0)
        assert spec.A_full(0) > spec.A(0)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            NoiseSpec(build_basis(1, 2), np.array([1.0, -1.0, 0.0]))

    def test_transfer(self):
        spec = NoiseSpec.default(build_basis(1, 2), 2.0)
        big = spec.on(build_basis(1, 8))
        assert np.allclose(big.amplitudes[:3], spec.amplitudes)
        with pytest.raises(ValueError):
            NoiseSpec(build_basis(1, 2), np.ones(3)).on(build_basis(1, 4))


class TestStreams:
    def test_deterministic(self):
        a = RngStream(3, 7).normals(16)
        b = RngStream(3, 7).normals(16)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, RngStream(3, 8).normals(16))

    def test_ensemble_independent_of_batch(self):
        full = EnsembleNoise(1, range(4), 3, chunk=5)
        part = EnsembleNoise(1, [2], 3, chunk=5)
        for _ in range(12):
            assert np.array_equal(full.next()[2], part.next()[0])

    def test_ensemble_chunk_invariant(self):
        a = EnsembleNoise(1, [0], 3, chunk=4)
        b = EnsembleNoise(1, [0], 3, chunk=4)
        assert np.array_equal(np.stack([a.next() for _ in range(9)]),
                              np.stack([b.next() for _ in range(9)]))


class TestIncrements:
    def test_variance(self):
        b = build_basis(1, 4)
        spec = NoiseSpec.default(b, 2.0)
        rng = np.random.default_rng(0)
        dt = 0.01
        draws = np.stack([noise_increment(b, spec, dt, rng).coeffs for _ in range(20000)])
        var = np.mean(np.abs(draws) ** 2, axis=0)
        expect = 2 * spec.amplitudes ** 2 * dt
        se = expect * np.sqrt(1 / 20000)
        assert np.all(np.abs(var - expect) < 4 * se)

    def test_rejects_bad_dt(self):
        b = build_basis(1, 2)
        with pytest.raises(ValueError):
            noise_increment(b, NoiseSpec.default(b, 2.0), 0.0, np.random.default_rng())

    def test_random_field_norm(self):
        b = build_basis(2, 20)
        u = random_field(b, 2.0, norm=1.5, seed=4)
        assert b.norm(u.coeffs, 2.0) == pytest.approx(1.5)
        assert np.array_equal(u.coeffs, random_field(b, 2.0, norm=1.5, seed=4).coeffs)


class TestOrnsteinUhlenbeck:
    def test_moments_limits(self):
        b = build_basis(1, 4)
        spec = NoiseSpec.default(b, 2.0)
        m0 = ou_moments(spec, 0.5, 2.0, 0.0)
        minf = ou_moments(spec, 0.5, 2.0, 1e6)
        assert np.allclose(m0, 0)
        assert np.allclose(minf, spec.amplitudes ** 2 / (1 + b.eigenvalues))

    def test_exact_step_matches_moments(self):
        b = build_basis(1, 4)
        spec = NoiseSpec.default(b, 2.0)
        paths, dt, n, alpha, s = 4000, 0.05, 10, 0.5, 2.0
        z = np.zeros((paths, b.n_modes), complex)
        z0 = np.full(b.n_modes, 0.3 + 0.1j)
        z = z + z0
        noise = EnsembleNoise(5, range(paths), b.n_modes)
        for _ in range(n):
            z = ou_exact_step(z, dt, alpha, s, spec, noise)
        emp = np.abs(z) ** 2
        exact = ou_moments(spec, alpha, s, n * dt, z0)
        se = emp.std(axis=0) / np.sqrt(paths)
        assert np.all(np.abs(emp.mean(axis=0) - exact) < 3.5 * se)

    def test_requires_damping(self):
        b = build_basis(1, 2)
        with pytest.raises(ValueError):
            ou_exact_step(np.zeros((1, 3), complex), 0.1, 0.0, 2.0, NoiseSpec.default(b, 2.0),
                          EnsembleNoise(0, [0], 3))
