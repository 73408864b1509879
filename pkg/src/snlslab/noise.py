"""Noise amplitudes, growth functions, random streams and the exact OU step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .spectral import ModeBasis, SpectralField

__all__ = [
    "GrowthPair",
    "NoiseSpec",
    "RngStream",
    "EnsembleNoise",
    "noise_increment",
    "ou_exact_step",
    "ou_moments",
    "LOG_SATURATION",
    "random_field",
]

# stream index reserved for random initial data
INIT_STREAM = 1 << 31

# exp(rho) is capped at exp(LOG_SATURATION)
LOG_SATURATION = 700.0


def _expm1_expm1(y):
    with np.errstate(over="ignore"):
        return np.expm1(np.expm1(y))


_GROWTH = {
    "log1p": (np.log1p, np.expm1),
    "loglog": (lambda x: np.log1p(np.log1p(x)), _expm1_expm1),
    "identity": (lambda x: np.asarray(x, float) * 1.0, lambda y: np.asarray(y, float) * 1.0),
}


class GrowthPair:
    """Concave growth function ``xi`` and the damping exponent ``rho = 3 xi^{-1}``.

    Parameters
    ----------
    name : {"log1p", "loglog", "identity"}
        ``loglog`` is ``log1p(log1p(x))``.
    """

    def __init__(self, name: str = "log1p"):
        if name not in _GROWTH:
            raise ValueError(f"unknown growth function {name!r}")
        self.name = name
        self._xi, self._inv = _GROWTH[name]
        self._C = {}

    def __repr__(self):
        return f"GrowthPair({self.name!r})"

    def xi(self, x):
        return self._xi(np.asarray(x, float))

    def xi_inv(self, y):
        with np.errstate(over="ignore"):
            return self._inv(np.asarray(y, float))

    def rho(self, x):
        return 3.0 * self.xi_inv(x)

    def weight(self, x):
        """``exp(rho(x))`` saturated at ``exp(700)``, with the saturation flags."""
        r = self.rho(x)
        sat = ~(r <= LOG_SATURATION)
        return np.exp(np.minimum(r, LOG_SATURATION)), sat

    def C(self, p: float) -> float:
        """``sup_{x >= 0} x^p exp(-rho(x))``, found numerically in ``log x``."""
        p = float(p)
        if p not in self._C:
            def neg(t):
                return -(p * t - self.rho(np.exp(t)))
            t = np.linspace(-30.0, 12.0, 8401)
            with np.errstate(over="ignore", invalid="ignore"):
                vals = -neg(t)
            k = int(np.nanargmax(vals))
            lo, hi = t[max(k - 1, 0)], t[min(k + 1, len(t) - 1)]
            res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                           options={"xatol": 1e-12})
            self._C[p] = float(np.exp(max(-res.fun, vals[k])))
        return self._C[p]


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Real nonnegative amplitudes ``a_m`` on a basis.

    Each complex mode carries two real Brownian channels of amplitude
    ``a_m``, so a mode counts twice in the constants ``A_{sigma,N}``.
    ``law`` maps eigenvalues to amplitudes and is needed for full-lattice sums.
    """

    basis: ModeBasis
    amplitudes: np.ndarray
    law: object = field(default=None, repr=False)

    def __post_init__(self):
        a = np.array(self.amplitudes, float)
        if a.shape != (self.basis.n_modes,):
            raise ValueError("one amplitude per mode is required")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("amplitudes must be finite and nonnegative")
        a.setflags(write=False)
        object.__setattr__(self, "amplitudes", a)

    @classmethod
    def default(cls, basis: ModeBasis, s: float, scale: float = 1.0, decay: float | None = None) -> "NoiseSpec":
        """Amplitudes ``scale (1 + lambda)^{-decay}``, decay ``(s + 1)/2`` by default."""
        q = (s + 1) / 2 if decay is None else decay

        def law(lam):
            return scale * (1.0 + np.asarray(lam, float)) ** (-q)
        return cls(basis, law(basis.eigenvalues), law)

    @classmethod
    def from_law(cls, basis: ModeBasis, law) -> "NoiseSpec":
        return cls(basis, law(basis.eigenvalues), law)

    @classmethod
    def zero(cls, basis: ModeBasis) -> "NoiseSpec":
        return cls.from_law(basis, lambda lam: np.zeros_like(np.asarray(lam, float)))

    def scaled(self, factor: float) -> "NoiseSpec":
        law = None if self.law is None else (lambda lam, f=factor, g=self.law: f * g(lam))
        return NoiseSpec(self.basis, self.amplitudes * factor, law)

    def on(self, basis: ModeBasis) -> "NoiseSpec":
        """Same law on another basis."""
        if self.law is None:
            raise ValueError("no amplitude law to transfer")
        return NoiseSpec.from_law(basis, self.law)

    @staticmethod
    def _lam_power(lam, sigma):
        lam = np.asarray(lam, float)
        if sigma == 0:
            return np.ones_like(lam)
        with np.errstate(divide="ignore"):
            return np.where(lam == 0, 0.0, lam ** sigma)

    def A(self, sigma: float = 0.0) -> float:
        """``A_{sigma,N} = 2 sum_k a_k^2 lambda_k^sigma`` over the basis."""
        lam = self.basis.eigenvalues
        return float(2 * np.sum(self.amplitudes ** 2 * self._lam_power(lam, sigma)))

    def A_full(self, sigma: float = 0.0, radius: int | None = None) -> float:
        """Full lattice sum: direct sum inside ``radius`` plus an integral tail."""
        if self.law is None:
            raise ValueError("full sums need an amplitude law")
        d = self.basis.d
        if radius is None:
            radius = {1: 4000, 2: 300, 3: 60}[d]
        r = np.arange(-radius, radius + 1)
        sq = np.zeros((1,), np.int64)
        for _ in range(d):
            sq = (sq[:, None] + (r ** 2)[None, :]).ravel()
        sq = sq[sq <= radius ** 2].astype(float)
        terms = self.law(sq) ** 2 * self._lam_power(sq, sigma)
        inside = 2 * float(np.sum(terms))
        area = {1: lambda q: 2.0, 2: lambda q: 2 * np.pi * q, 3: lambda q: 4 * np.pi * q * q}[d]

        def density(q):
            return area(q) * self.law(q * q) ** 2 * self._lam_power(q * q, sigma)
        tail, _ = integrate.quad(density, radius + 0.5, np.inf, limit=200)
        return inside + 2 * tail


@dataclass
class RngStream:
    """Counter-based Philox stream keyed by ``(seed, index)``."""

    seed: int
    index: int
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.index),))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def normals(self, shape):
        return self.generator.standard_normal(shape)

    @property
    def counter(self) -> int:
        return int(self.generator.bit_generator.state["state"]["counter"][0])


class EnsembleNoise:
    """Per-path Gaussian increments, one :class:`RngStream` per path.

    Draws are made per path in blocks of ``chunk`` steps, so the normals a
    path receives do not depend on which other paths share the batch.
    """

    def __init__(self, seed: int, indices, n_modes: int, chunk: int = 256):
        self.streams = [RngStream(seed, int(i)) for i in indices]
        self.n_modes = n_modes
        self.chunk = chunk
        self._buf = None
        self._pos = chunk

    def __len__(self):
        return len(self.streams)

    def next(self) -> np.ndarray:
        """Standard normals of shape ``(paths, n_modes, 2)`` for one step."""
        if self._pos >= self.chunk:
            self._buf = np.stack([s.normals((self.chunk, self.n_modes, 2)) for s in self.streams])
            self._pos = 0
        out = self._buf[:, self._pos]
        self._pos += 1
        return out


def _normals(rng, shape):
    if isinstance(rng, RngStream):
        return rng.normals(shape)
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    raise TypeError("rng must be an RngStream or numpy Generator")


def random_field(basis: ModeBasis, s: float, norm: float = 1.0, seed: int = 0,
                 excess: float = 0.51, index: int = INIT_STREAM) -> SpectralField:
    """Complex Gaussian coefficients with decay ``(1 + lambda)^{-(s + excess)/2}``.

    The result is rescaled so that ``||u||_s = norm``.
    """
    z = RngStream(seed, index).normals((basis.n_modes, 2))
    c = (z[:, 0] + 1j * z[:, 1]) * (1 + basis.eigenvalues) ** (-(s + excess) / 2)
    nrm = basis.norm(c, s)
    return SpectralField(basis, c * (norm / nrm) if norm > 0 else c * 0)


def noise_increment(basis: ModeBasis, spec: NoiseSpec, dt: float, rng) -> SpectralField:
    """Increment ``sum_m a_m (dB1_m + i dB2_m) e_m`` over a step ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = _normals(rng, (basis.n_modes, 2))
    return SpectralField(basis, spec.amplitudes * np.sqrt(dt) * (z[:, 0] + 1j * z[:, 1]))


def ou_moments(spec: NoiseSpec, alpha: float, s: float, t, z0=None):
    """Exact ``E|z_m(t)|^2`` per mode for the linear damped equation.

    Returns an array of shape ``(len(t), n_modes)`` (or ``(n_modes,)``).
    """
    lam = spec.basis.eigenvalues
    g = (1.0 + lam) ** (s - 1)
    t = np.asarray(t, float)
    tt = t[..., None]
    stat = spec.amplitudes ** 2 / g
    out = stat * (-np.expm1(-2 * alpha * g * tt))
    if z0 is not None:
        out = out + np.abs(z0) ** 2 * np.exp(-2 * alpha * g * tt)
    return out


def ou_exact_step(z, dt: float, alpha: float, s: float, spec: NoiseSpec, rng):
    """Exact step of ``dz = [-i(1+lambda) - alpha (1+lambda)^{s-1}] z dt + sqrt(alpha) a dW``.

    ``z`` may be a :class:`SpectralField` (``rng`` an RngStream or Generator)
    or a coefficient array of shape ``(paths, n_modes)`` with ``rng`` an
    :class:`EnsembleNoise`.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = spec.basis.eigenvalues
    g = (1.0 + lam) ** (s - 1)
    factor = np.exp((-1j * (1.0 + lam) - alpha * g) * dt)
    # complex variance a^2 (1 - exp(-2 alpha g dt)) / g, half per channel
    sd = np.sqrt(spec.amplitudes ** 2 * (-np.expm1(-2 * alpha * g * dt)) / g / 2)
    if isinstance(z, SpectralField):
        w = _normals(rng, (spec.basis.n_modes, 2))
        return z.with_coeffs(z.coeffs * factor + sd * (w[:, 0] + 1j * w[:, 1]))
    w = rng.next() if isinstance(rng, EnsembleNoise) else _normals(rng, np.shape(z) + (2,))
    return z * factor + sd * (w[..., 0] + 1j * w[..., 1])
