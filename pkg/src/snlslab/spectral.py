"""Fourier representation of fields on the d-torus.

Fields are stored as complex coefficients on an ordered set of Fourier modes
with the orthonormal basis ``e_k(x) = (2 pi)^{-d/2} exp(i k.x)``.  Array-level
routines accept a trailing mode axis so that batches of fields of shape
``(..., n_modes)`` are processed in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

__all__ = [
    "ModeBasis",
    "SpectralField",
    "Collocation",
    "build_basis",
    "project",
    "sobolev_norm",
    "inner",
    "mass",
    "energy",
    "lp_norm",
    "nonlinearity",
    "linear_propagator",
    "critical_exponent",
    "required_grid_size",
]

# Dense transform matrices are used below this many (modes x grid points).
_DENSE_LIMIT = 1 << 17


def _lattice(d: int, radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    grids = np.meshgrid(*([r] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _order(wavevectors: np.ndarray) -> np.ndarray:
    lam = np.sum(wavevectors.astype(np.int64) ** 2, axis=1)
    # np.lexsort sorts by the last key first
    keys = tuple(wavevectors[:, j] for j in range(wavevectors.shape[1] - 1, -1, -1))
    return np.lexsort(keys + (lam,))


@dataclass(frozen=True, eq=False)
class ModeBasis:
    """Ordered Fourier modes of the d-torus.

    Attributes
    ----------
    d : int
        Spatial dimension.
    wavevectors : ndarray of int, shape (n_modes, d)
    eigenvalues : ndarray, shape (n_modes,)
        ``|k|^2`` for each mode, nondecreasing.
    shells : tuple of (int, int)
        Half-open index ranges of equal eigenvalue.
    """

    d: int
    wavevectors: np.ndarray
    eigenvalues: np.ndarray
    shells: tuple
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_wavevectors(cls, wavevectors) -> "ModeBasis":
        """Build a basis from an explicit ordered list of frequencies.

        The order is kept as given, which allows alternative tie-breaking
        inside a shell.  Eigenvalues must still be nondecreasing.
        """
        k = np.asarray(wavevectors, dtype=np.int64)
        if k.ndim != 2 or k.shape[1] not in (1, 2, 3):
            raise ValueError("wavevectors must have shape (n_modes, d) with d in {1, 2, 3}")
        if len({tuple(row) for row in k}) != len(k):
            raise ValueError("duplicate wavevectors")
        lam = np.sum(k ** 2, axis=1).astype(float)
        if np.any(np.diff(lam) < 0):
            raise ValueError("eigenvalues must be nondecreasing along the ordering")
        edges = np.flatnonzero(np.diff(lam)) + 1
        bounds = np.concatenate([[0], edges, [len(lam)]])
        shells = tuple((int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))
        k.setflags(write=False)
        lam.setflags(write=False)
        return cls(d=k.shape[1], wavevectors=k, eigenvalues=lam, shells=shells)

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    @property
    def N(self) -> int:
        """Largest mode index, so that indices run over ``0..N``."""
        return self.n_modes - 1

    @property
    def kmax(self) -> int:
        return int(np.max(np.abs(self.wavevectors)))

    def weights(self, sigma: float) -> np.ndarray:
        """Sobolev weights ``(1 + lambda)^sigma``."""
        key = ("w", float(sigma))
        w = self._cache.get(key)
        if w is None:
            w = (1.0 + self.eigenvalues) ** sigma
            self._cache[key] = w
        return w

    def norm(self, c, sigma: float = 0.0):
        """H^sigma norm along the last axis of a coefficient array."""
        c = np.asarray(c)
        sq = c.real ** 2 + c.imag ** 2
        if sigma == 0:
            return np.sqrt(np.sum(sq, axis=-1))
        return np.sqrt(np.sum(self.weights(sigma) * sq, axis=-1))

    def prefix(self, N: int) -> "ModeBasis":
        """Sub-basis made of modes ``0..N``."""
        if not 0 <= N <= self.N:
            raise ValueError(f"cutoff {N} outside 0..{self.N}")
        return ModeBasis.from_wavevectors(self.wavevectors[: N + 1])

    def cutoff(self, N: int, full_shell: bool = True) -> int:
        """Last index kept by ``P_N``; with ``full_shell`` the shell of mode N is completed."""
        if not 0 <= N <= self.N:
            raise ValueError(f"cutoff {N} outside 0..{self.N}")
        if not full_shell:
            return int(N)
        return int(np.searchsorted(self.eigenvalues, self.eigenvalues[N], side="right")) - 1

    def index_of(self, k) -> int:
        """Position of a wavevector in the ordering."""
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        hits = np.flatnonzero(np.all(self.wavevectors == k, axis=1))
        if len(hits) == 0:
            raise KeyError(f"wavevector {tuple(k)} not in basis")
        return int(hits[0])

    def same_as(self, other: "ModeBasis") -> bool:
        return self is other or (
            self.d == other.d and np.array_equal(self.wavevectors, other.wavevectors)
        )

    def collocation(self, size: int) -> "Collocation":
        key = ("grid", int(size))
        grid = self._cache.get(key)
        if grid is None:
            grid = Collocation(self, int(size))
            self._cache[key] = grid
        return grid


def build_basis(d: int, N: int, full_shell: bool = True) -> ModeBasis:
    """Ordered basis of modes with index ``0..N``.

    Modes are sorted by ``|k|^2`` with ties broken lexicographically on k.
    With ``full_shell`` the cutoff is raised so that the last eigenvalue
    shell is complete.
    """
    if d not in (1, 2, 3):
        raise ValueError(f"unsupported dimension d={d}")
    if int(N) != N or N < 1:
        raise ValueError("N must be an integer >= 1")
    N = int(N)
    radius = 1
    while True:
        pts = _lattice(d, radius)
        lam = np.sum(pts ** 2, axis=1)
        # every k with |k| <= radius lies in the cube, so shells up to
        # radius^2 are complete
        inside = pts[lam <= radius ** 2]
        if len(inside) > N + 1:
            break
        radius *= 2
    inside = inside[_order(inside)]
    lam = np.sum(inside ** 2, axis=1)
    stop = N + 1
    if full_shell:
        stop = int(np.searchsorted(lam, lam[N], side="right"))
    return ModeBasis.from_wavevectors(inside[:stop])


def critical_exponent(p: float, d: int) -> float:
    """Scaling-critical regularity ``d/2 - 2/(p-1)``."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    return d / 2 - 2 / (p - 1)


def required_grid_size(basis: ModeBasis, p: float | None = None, oversampling: float | None = None) -> int:
    """Points per dimension of the collocation grid.

    With ``oversampling=None`` the grid is large enough that, for odd integer
    p, both the projected nonlinearity and the ``L^{p+1}`` quadrature are free
    of aliasing, and never smaller than twice the mode range.
    """
    K = basis.kmax
    span = 2 * K + 1
    if oversampling is None:
        need = 2 * span
        if p is not None:
            need = max(need, math.ceil((p + 1) * K) + 1)
    else:
        if oversampling < 1:
            raise ValueError("oversampling must be >= 1")
        need = math.ceil(oversampling * span)
    return sfft.next_fast_len(need)


class Collocation:
    """Uniform physical grid attached to a basis.

    ``to_grid`` evaluates fields at the grid points and ``from_grid`` returns
    the coefficients of the trigonometric interpolant restricted to the basis
    (that is, P_N of the interpolant).
    """

    def __init__(self, basis: ModeBasis, size: int):
        if size < 2 * basis.kmax + 1:
            raise ValueError(
                f"grid of {size} points cannot resolve |k| <= {basis.kmax}"
            )
        self.basis = basis
        self.size = size
        d = basis.d
        self.n_points = size ** d
        self.cell = (2 * np.pi / size) ** d
        self._norm = (2 * np.pi) ** (-d / 2)
        self._index = tuple((basis.wavevectors % size).T)
        self.dense = basis.n_modes * self.n_points <= _DENSE_LIMIT
        if self.dense:
            x = 2 * np.pi * np.arange(size) / size
            pts = np.stack(
                [g.ravel() for g in np.meshgrid(*([x] * d), indexing="ij")], axis=1
            )
            phase = basis.wavevectors @ pts.T
            self._fg = self._norm * np.exp(1j * phase)
            self._fb = np.ascontiguousarray(self._fg.conj().T) * self.cell

    def points(self) -> np.ndarray:
        x = 2 * np.pi * np.arange(self.size) / self.size
        grids = np.meshgrid(*([x] * self.basis.d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def to_grid(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=complex)
        if self.dense:
            return c @ self._fg
        lead = c.shape[:-1]
        shape = lead + (self.size,) * self.basis.d
        full = np.zeros(shape, dtype=complex)
        full[(Ellipsis,) + self._index] = c
        axes = tuple(range(-self.basis.d, 0))
        g = sfft.ifftn(full, axes=axes, norm="forward") * self._norm
        return g.reshape(lead + (self.n_points,))

    def from_grid(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=complex)
        if self.dense:
            return g @ self._fb
        lead = g.shape[:-1]
        g = g.reshape(lead + (self.size,) * self.basis.d)
        axes = tuple(range(-self.basis.d, 0))
        full = sfft.fftn(g, axes=axes)
        return full[(Ellipsis,) + self._index] * (self.cell * self._norm)

    def integrate(self, values) -> np.ndarray:
        """Trapezoidal (spectrally accurate) integral over the torus."""
        return np.sum(values, axis=-1) * self.cell


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Coefficients of a field on a :class:`ModeBasis`."""

    basis: ModeBasis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.shape != (self.basis.n_modes,):
            raise ValueError(
                f"expected {self.basis.n_modes} coefficients, got shape {c.shape}"
            )
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, basis: ModeBasis) -> "SpectralField":
        return cls(basis, np.zeros(basis.n_modes, dtype=complex))

    @classmethod
    def from_grid(cls, basis: ModeBasis, values, size: int | None = None) -> "SpectralField":
        """Project point values given on a uniform grid of ``size`` points per axis."""
        values = np.asarray(values)
        if size is None:
            size = round(values.size ** (1 / basis.d))
        return cls(basis, basis.collocation(size).from_grid(values.reshape(-1)))

    def with_coeffs(self, c) -> "SpectralField":
        return SpectralField(self.basis, c)

    def norm(self, sigma: float = 0.0) -> float:
        return float(self.basis.norm(self.coeffs, sigma))

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_same(self, other)
        return self.with_coeffs(self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_same(self, other)
        return self.with_coeffs(self.coeffs - other.coeffs)

    def __mul__(self, scalar) -> "SpectralField":
        return self.with_coeffs(self.coeffs * scalar)

    __rmul__ = __mul__


def _check_same(u: SpectralField, v: SpectralField):
    if not u.basis.same_as(v.basis):
        raise ValueError("fields live on different bases")


def project(u: SpectralField, N: int, full_shell: bool = True) -> SpectralField:
    """Zero every coefficient beyond the cutoff ``N``.

    With ``full_shell`` the whole eigenvalue shell of mode ``N`` is kept.
    """
    if N > u.basis.N:
        raise ValueError(f"cutoff {N} exceeds basis cutoff {u.basis.N}")
    c = u.coeffs.copy()
    c[u.basis.cutoff(N, full_shell) + 1:] = 0
    return u.with_coeffs(c)


def sobolev_norm(u: SpectralField, sigma: float) -> float:
    return u.norm(sigma)


def inner(u: SpectralField, v: SpectralField) -> float:
    """Real inner product ``Re sum u_m conj(v_m)``."""
    _check_same(u, v)
    return float(np.real(np.vdot(v.coeffs, u.coeffs)))


def mass(u: SpectralField) -> float:
    return 0.5 * u.norm(0.0) ** 2


def _grid_for(basis: ModeBasis, p, grid_size, oversampling) -> Collocation:
    need = required_grid_size(basis, p, oversampling)
    if grid_size is None:
        grid_size = need
    elif grid_size < need:
        raise ValueError(
            f"grid of {grid_size} points per axis is below the {need} required"
        )
    return basis.collocation(grid_size)


def energy(u: SpectralField, p: float, grid_size: int | None = None, oversampling: float | None = None) -> float:
    """``1/2 ||u||_1^2 + 1/(p+1) int |u|^{p+1}`` with the integral by collocation."""
    grid = _grid_for(u.basis, p, grid_size, oversampling)
    g = grid.to_grid(u.coeffs)
    pot = grid.integrate(np.abs(g) ** (p + 1)) / (p + 1)
    return float(0.5 * u.norm(1.0) ** 2 + pot)


def lp_norm(u: SpectralField, q: float, grid_size: int | None = None, oversampling: float | None = None) -> float:
    """``L^q`` norm on the torus, ``q`` in ``[2, inf]``."""
    if not q >= 2:
        raise ValueError("q must lie in [2, inf]")
    if q == 2:
        return u.norm(0.0)
    p = None if np.isinf(q) else q - 1
    grid = _grid_for(u.basis, p, grid_size, oversampling)
    a = np.abs(grid.to_grid(u.coeffs))
    if np.isinf(q):
        return float(a.max())
    return float(grid.integrate(a ** q) ** (1 / q))


def nonlinearity(u: SpectralField, p: float, N: int | None = None, grid_size: int | None = None, oversampling: float | None = None) -> SpectralField:
    """``P_N(|u|^{p-1} u)`` evaluated on the collocation grid."""
    grid = _grid_for(u.basis, p, grid_size, oversampling)
    g = grid.to_grid(u.coeffs)
    out = u.with_coeffs(grid.from_grid(np.abs(g) ** (p - 1) * g))
    return out if N is None else project(out, N)


def linear_propagator(u: SpectralField, t: float) -> SpectralField:
    """Free group ``exp(-it(1 - Delta))`` applied coefficient-wise."""
    return u.with_coeffs(u.coeffs * np.exp(-1j * t * (1.0 + u.basis.eigenvalues)))
