import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from snlslab.spectral import (Collocation, SpectralField, build_basis, critical_exponent, energy, inner,
                              linear_propagator, lp_norm, mass, nonlinearity, project, required_grid_size,
                              sobolev_norm)

from conftest import random_coeffs


def field(basis, seed=0, decay=3.0):
    return SpectralField(basis, random_coeffs(basis.n_modes, seed, decay, basis.eigenvalues))


class TestBasis:
    def test_first_eigenvalues_d1(self):
        b = build_basis(1, 6)
        assert b.eigenvalues[:7].tolist() == [0, 1, 1, 4, 4, 9, 9]

    def test_unit_shell_d3(self):
        b = build_basis(3, 1)
        assert b.n_modes == 7
        unit = b.wavevectors[b.eigenvalues == 1]
        assert len(unit) == 6
        assert sorted(map(tuple, np.abs(unit).tolist())) == sorted([(1, 0, 0), (0, 1, 0), (0, 0, 1)] * 2)

    def test_count_up_to_nine_d3(self):
        # brute-force enumeration over [-3, 3]^3 gives 123
        b = build_basis(3, 122)
        assert np.count_nonzero(b.eigenvalues <= 9) == 123

    def test_zero_mode_first_and_sorted(self):
        for d in (1, 2, 3):
            b = build_basis(d, 20)
            assert np.all(b.wavevectors[0] == 0) and b.eigenvalues[0] == 0
            assert np.all(np.diff(b.eigenvalues) >= 0)

    def test_tie_break_lexicographic(self):
        b = build_basis(2, 30)
        for lo, hi in b.shells:
            ks = [tuple(k) for k in b.wavevectors[lo:hi]]
            assert ks == sorted(ks)

    def test_ordering_is_pure_function_of_d(self):
        a, b = build_basis(3, 40), build_basis(3, 40)
        assert np.array_equal(a.wavevectors, b.wavevectors)

    def test_full_shell_completes_last_shell(self):
        b = build_basis(2, 2)
        assert b.n_modes == 5
        assert build_basis(2, 2, full_shell=False).n_modes == 3

    def test_index_cutoff_brute_force(self):
        b = build_basis(2, 12)
        ks = [k for k in itertools.product(range(-3, 4), repeat=2) if k[0] ** 2 + k[1] ** 2 <= 4]
        assert b.n_modes == len(ks) == 13

    def test_weyl_bounds_d3(self):
        b = build_basis(3, 500)
        m = np.arange(1, b.n_modes)
        r = b.eigenvalues[1:] / m ** (2 / 3)
        assert 0.1 < r.min() and r.max() <= 1.0

    def test_unsupported_dimension(self):
        with pytest.raises(ValueError):
            build_basis(4, 3)
        with pytest.raises(ValueError):
            build_basis(1, 0)


class TestNorms:
    def test_zero_mode_norm(self):
        b = build_basis(1, 4)
        c = np.zeros(b.n_modes, complex)
        c[0] = 1
        u = SpectralField(b, c)
        for s in (-1.0, 0.0, 2.5):
            assert sobolev_norm(u, s) == 1.0

    def test_unit_shell_norm(self):
        b = build_basis(1, 4)
        c = np.zeros(b.n_modes, complex)
        c[1] = 1
        assert sobolev_norm(SpectralField(b, c), 2.0) == pytest.approx(2.0, rel=1e-15)

    @given(st.integers(0, 10_000), st.floats(-2, 3), st.floats(0, 2))
    def test_embedding(self, seed, s, gap):
        b = build_basis(2, 20)
        u = field(b, seed)
        assert sobolev_norm(u, s) <= sobolev_norm(u, s + gap) * (1 + 1e-14)

    @given(st.integers(0, 10_000))
    def test_inner_product_properties(self, seed):
        b = build_basis(1, 10)
        u = field(b, seed)
        assert abs(inner(u, u * 1j)) <= 1e-14 * sobolev_norm(u, 0) ** 2
        assert inner(u, u) == pytest.approx(sobolev_norm(u, 0) ** 2, rel=1e-14)

    def test_orthogonal_modes(self):
        b = build_basis(1, 4)
        e1, e2 = np.zeros(b.n_modes, complex), np.zeros(b.n_modes, complex)
        e1[1], e2[2] = 1, 1
        assert inner(SpectralField(b, e1), SpectralField(b, e2)) == 0

    def test_inner_basis_mismatch(self):
        with pytest.raises(ValueError):
            inner(SpectralField.zeros(build_basis(1, 4)), SpectralField.zeros(build_basis(1, 6)))


class TestProjection:
    def test_zero_mode_unchanged(self):
        b = build_basis(1, 8)
        c = np.zeros(b.n_modes, complex)
        c[0] = 2 - 1j
        u = SpectralField(b, c)
        assert np.array_equal(project(u, 1).coeffs, c)

    def test_unit_coefficients_first_shells(self):
        b = build_basis(1, 10)
        u = SpectralField(b, np.ones(b.n_modes, complex))
        out = project(u, 1)
        assert np.array_equal(out.coeffs, (b.eigenvalues <= 1).astype(complex))

    @given(st.integers(0, 10_000), st.integers(1, 20), st.floats(-1, 3))
    def test_idempotent_and_contractive(self, seed, N, s):
        b = build_basis(2, 24)
        u = field(b, seed)
        pu = project(u, N)
        assert np.array_equal(project(pu, N).coeffs, pu.coeffs)
        assert sobolev_norm(pu, s) <= sobolev_norm(u, s)

    def test_too_large_cutoff(self):
        with pytest.raises(ValueError):
            project(SpectralField.zeros(build_basis(1, 4)), 10)


class TestCollocation:
    @pytest.mark.parametrize("d,N", [(1, 16), (2, 20), (3, 18)])
    def test_round_trip_parseval(self, d, N):
        b = build_basis(d, N)
        u = field(b, 3)
        grid = b.collocation(required_grid_size(b, 7))
        back = grid.from_grid(grid.to_grid(u.coeffs))
        assert np.linalg.norm(back - u.coeffs) <= 1e-12 * np.linalg.norm(u.coeffs)
        l2 = grid.integrate(np.abs(grid.to_grid(u.coeffs)) ** 2)
        assert l2 == pytest.approx(sobolev_norm(u, 0) ** 2, rel=1e-12)

    def test_dense_and_fft_paths_agree(self):
        b = build_basis(1, 16)
        u = field(b, 5)
        dense = Collocation(b, 64)
        fft = Collocation(b, 64)
        fft.dense = False
        assert np.allclose(dense.to_grid(u.coeffs), fft.to_grid(u.coeffs), atol=1e-13)

    def test_constant_mass(self):
        b = build_basis(3, 6)
        u = SpectralField.from_grid(b, np.ones((8, 8, 8)))
        assert mass(u) == pytest.approx(0.5 * (2 * np.pi) ** 3, rel=1e-13)

    def test_zero_field(self):
        u = SpectralField.zeros(build_basis(2, 5))
        assert mass(u) == 0 and energy(u, 7) == 0

    def test_constant_energy_closed_form(self):
        b = build_basis(1, 8)
        c = np.zeros(b.n_modes, complex)
        c[0] = 0.3 * math.sqrt(2 * math.pi)
        # pi c^2 + 2 pi c^8 / 8 for the constant function c = 0.3
        assert energy(SpectralField(b, c), 7) == pytest.approx(0.2827948687965819, rel=1e-13)

    def test_lp_norm_constant(self):
        b = build_basis(1, 4)
        c = np.zeros(b.n_modes, complex)
        c[0] = 0.5 * math.sqrt(2 * math.pi)
        u = SpectralField(b, c)
        assert lp_norm(u, 4) == pytest.approx(0.5 * (2 * math.pi) ** 0.25, rel=1e-13)
        assert lp_norm(u, np.inf) == pytest.approx(0.5, rel=1e-13)
        with pytest.raises(ValueError):
            lp_norm(u, 1)


class TestNonlinearity:
    def test_constant_field(self):
        b = build_basis(1, 8)
        c = np.zeros(b.n_modes, complex)
        c[0] = (0.4 + 0.3j) * math.sqrt(2 * math.pi)
        out = nonlinearity(SpectralField(b, c), 7).coeffs
        expect = abs(0.4 + 0.3j) ** 6 * (0.4 + 0.3j) * math.sqrt(2 * math.pi)
        assert out[0] == pytest.approx(expect, rel=1e-13)
        assert np.all(np.abs(out[1:]) < 1e-15)

    def test_plane_wave_maps_to_itself(self):
        b = build_basis(1, 12)
        c = np.zeros(b.n_modes, complex)
        c[b.index_of([2])] = 0.7
        out = nonlinearity(SpectralField(b, c), 7).coeffs.copy()
        exact = (2 * np.pi) ** -3 * 0.7 ** 7
        assert out[b.index_of([2])] == pytest.approx(exact, rel=1e-12)
        out[b.index_of([2])] = 0
        assert np.abs(out).max() < 1e-15

    @pytest.mark.parametrize("d,N", [(1, 10), (2, 12)])
    def test_matches_refined_quadrature(self, d, N):
        b = build_basis(d, N)
        u = field(b, 11) * 0.3
        out = nonlinearity(u, 7).coeffs
        # direct quadrature on a 4x finer grid with explicit exponentials
        M = 4 * required_grid_size(b, 7)
        axes = [2 * np.pi * np.arange(M) / M] * d
        X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
        E = np.exp(1j * X @ b.wavevectors.T) / (2 * np.pi) ** (d / 2)
        g = E @ u.coeffs
        ref = (np.conj(E).T @ (np.abs(g) ** 6 * g)) * (2 * np.pi / M) ** d
        assert np.linalg.norm(out - ref) <= 1e-10 * np.linalg.norm(ref)

    def test_grid_too_small(self):
        b = build_basis(1, 8)
        with pytest.raises(ValueError):
            nonlinearity(field(b), 7, grid_size=8)

    def test_projection_argument(self):
        b = build_basis(1, 12)
        u = field(b) * 0.2
        out = nonlinearity(u, 7, N=4).coeffs
        full = nonlinearity(u, 7).coeffs
        assert np.all(out[5:] == 0)
        assert np.allclose(out[:5], full[:5], atol=0)


class TestPropagator:
    def test_identity_at_zero(self):
        b = build_basis(1, 8)
        u = field(b)
        assert np.array_equal(linear_propagator(u, 0.0).coeffs, u.coeffs)

    @given(st.integers(0, 1000), st.floats(-50, 50), st.floats(-2, 3))
    def test_isometry_and_group(self, seed, t, s):
        b = build_basis(2, 15)
        u = field(b, seed)
        v = linear_propagator(u, t)
        assert sobolev_norm(v, s) == pytest.approx(sobolev_norm(u, s), rel=1e-12)
        back = linear_propagator(v, -t)
        assert np.max(np.abs(back.coeffs - u.coeffs)) <= 1e-14 * max(1, np.max(np.abs(u.coeffs)))


class TestCriticalExponent:
    def test_values(self):
        assert critical_exponent(5, 3) == 1
        assert critical_exponent(7, 3) == pytest.approx(7 / 6, abs=1e-15)
        assert critical_exponent(3, 3) == 0.5

    def test_invalid(self):
        with pytest.raises(ValueError):
            critical_exponent(1, 3)
