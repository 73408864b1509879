"""Laws of conserved quantities, quadratic variations, resolvents and small balls."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fluctdiss import bootstrap_mean_ci
from .measures import EmpiricalMeasure
from .noise import NoiseSpec
from .spectral import SpectralField, required_grid_size

__all__ = [
    "ObservableDistribution",
    "NonStationaryError",
    "distribution_of",
    "density_bound",
    "refinement_study",
    "quadratic_variation",
    "ResolventPhi",
    "resolvent_phi",
    "stationarity_generator_check",
    "small_ball_probe",
]

ATOM_MASS = 1e-3


class NonStationaryError(RuntimeError):
    """The sampled window shows a significant drift of the mean mass."""


def _silverman(values, weights):
    mean = np.dot(weights, values)
    sd = np.sqrt(max(np.dot(weights, (values - mean) ** 2), 0.0))
    q75, q25 = np.quantile(values, [0.75, 0.25]) if len(values) > 1 else (0.0, 0.0)
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    n_eff = 1.0 / np.sum(weights ** 2)
    return 0.9 * spread * n_eff ** -0.2 if spread > 0 else 0.0


@dataclass
class ObservableDistribution:
    """Weighted sample of a scalar observable with its histogram.

    Attributes
    ----------
    tag : str
    values, weights : ndarray
    edges : ndarray
        Strictly increasing bin edges.
    masses : ndarray
        Probability per bin, summing to one.
    bandwidth : float
        Silverman rule bandwidth for the kernel estimate.
    atoms : list of (value, mass)
        Values carrying mass above ``ATOM_MASS`` through repetition.
    """

    tag: str
    values: np.ndarray
    weights: np.ndarray
    edges: np.ndarray
    masses: np.ndarray
    bandwidth: float
    atoms: list = field(default_factory=list)

    def __post_init__(self):
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if abs(self.masses.sum() - 1.0) > 1e-12:
            raise ValueError("histogram masses must sum to one")

    @property
    def density(self) -> np.ndarray:
        return self.masses / np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def refined(self, factor: int = 2) -> "ObservableDistribution":
        """Same sample on bins split into ``factor`` equal parts."""
        e = self.edges
        fine = np.concatenate([np.linspace(a, b, factor + 1)[:-1] for a, b in zip(e[:-1], e[1:])] + [e[-1:]])
        return _histogram(self.tag, self.values, self.weights, fine, self.bandwidth, self.atoms)

    def kde(self, x, factor: float = 1.0) -> np.ndarray:
        """Gaussian kernel density at ``x`` with bandwidth scaled by ``factor``."""
        h = self.bandwidth * factor
        if h <= 0:
            raise ValueError("zero bandwidth: the sample is degenerate")
        z = (np.asarray(x, float)[..., None] - self.values) / h
        return np.exp(-0.5 * z * z) @ self.weights / (h * np.sqrt(2 * np.pi))


def _histogram(tag, values, weights, edges, bandwidth, atoms):
    masses, _ = np.histogram(values, bins=edges, weights=weights)
    masses = masses / masses.sum()
    return ObservableDistribution(tag, values, weights, np.asarray(edges, float), masses, bandwidth, atoms)


def _atoms(values, weights):
    if len(values) == 1:
        return [(float(values[0]), float(weights[0]))]
    uniq, inv, counts = np.unique(values, return_inverse=True, return_counts=True)
    mass = np.bincount(inv, weights=weights)
    keep = (counts > 1) & (mass > ATOM_MASS)
    return [(float(v), float(w)) for v, w in zip(uniq[keep], mass[keep])]


def distribution_of(m: EmpiricalMeasure, F="mass", p: float | None = None, bins="auto") -> ObservableDistribution:
    """Law of ``F`` under ``m``; ``F`` is ``"mass"``, ``"energy"`` or a callable."""
    if callable(F):
        tag, fn = getattr(F, "__name__", "custom"), F
    elif F in ("mass", "M"):
        tag, fn = "M", lambda C: 0.5 * m.basis.norm(C, 0.0) ** 2
    elif F in ("energy", "E"):
        if p is None:
            raise ValueError("the energy needs the exponent p")
        grid = m.basis.collocation(required_grid_size(m.basis, p))

        def fn(C):
            g = np.abs(grid.to_grid(C))
            return 0.5 * m.basis.norm(C, 1.0) ** 2 + grid.integrate(g ** (p + 1)) / (p + 1)
        tag = "E"
    else:
        raise ValueError(f"unknown observable {F!r}")
    values = np.asarray(fn(m.snapshots), float)
    edges = np.histogram_bin_edges(values, bins=bins)
    return _histogram(tag, values, m.weights, edges, _silverman(values, m.weights), _atoms(values, m.weights))


def density_bound(dist: ObservableDistribution, a: float = 0.0) -> float:
    """Largest histogram density on bins lying in ``|x| > a``."""
    away = (dist.edges[:-1] >= a) | (dist.edges[1:] <= -a)
    return float(dist.density[away].max()) if np.any(away) else 0.0


def refinement_study(dist: ObservableDistribution, a: float = 0.0, levels=(1, 2, 4)) -> dict:
    """Density bound away from ``[-a, a]`` under bin refinement and bandwidth changes."""
    hist = {int(k): density_bound(dist.refined(k) if k > 1 else dist, a) for k in levels}
    out = {"a": a, "histogram": hist}
    if dist.bandwidth > 0:
        x = np.linspace(dist.edges[0], dist.edges[-1], 512)
        x = x[np.abs(x) > a]
        out["kde"] = {f: float(dist.kde(x, f).max()) if len(x) else 0.0 for f in (0.5, 1.0, 2.0)}
    vals = list(hist.values())
    out["ratio_max_min"] = float(max(vals) / min(vals)) if min(vals) > 0 else float("inf")
    return out


def quadratic_variation(u, F: str, spec: NoiseSpec, p: float | None = None, variant: str = "full"):
    """Noise quadratic variation of ``M`` or ``E`` at ``u``.

    ``Q_F = sum_m a_m^2 (F'(u; e_m)^2 + F'(u; i e_m)^2)``, both real channels
    included.  For ``E`` the derivative is ``(-Delta u + u + |u|^{p-1} u, h)``;
    ``variant="printed"`` drops the ``+u`` term.  ``u`` is a field or a
    coefficient matrix (one value per row).
    """
    C = u.coeffs if isinstance(u, SpectralField) else np.asarray(u, complex)
    a2 = spec.amplitudes ** 2
    if F in ("M", "mass"):
        G = C
    elif F in ("E", "energy"):
        if p is None:
            raise ValueError("Q_E needs the exponent p")
        if variant not in ("full", "printed"):
            raise ValueError("variant is 'full' or 'printed'")
        b = spec.basis
        grid = b.collocation(required_grid_size(b, p))
        g = grid.to_grid(C)
        nl = grid.from_grid(np.abs(g) ** (p - 1) * g)
        shift = 1.0 if variant == "full" else 0.0
        G = (b.eigenvalues + shift) * C + nl
    else:
        raise ValueError(f"unknown functional {F!r}")
    q = np.sum(a2 * np.abs(G) ** 2, axis=-1)
    return float(q) if np.ndim(q) == 0 else q


class ResolventPhi:
    """``Phi(x) = (2 lam)^{-1/2} int g(y) exp(-|x-y| sqrt(2 lam)) dy``.

    ``g`` is replaced by its piecewise linear interpolant on the sample grid,
    for which the one-sided convolutions ``L`` (from the left) and ``R``
    (from the right) are integrated exactly.  Then ``Phi = (L + R)/k``,
    ``Phi' = R - L`` and ``Phi'' = k (L + R) - 2 g`` with ``k = sqrt(2 lam)``.
    """

    def __init__(self, x, g, lam: float, g_exact=None):
        x = np.asarray(x, float)
        g = np.asarray(g, float)
        if lam <= 0:
            raise ValueError("lambda must be positive")
        if x.ndim != 1 or x.shape != g.shape or len(x) < 5 or np.any(np.diff(x) <= 0):
            raise ValueError("need an increasing grid with matching samples")
        self.x, self.g, self.lam = x, g, float(lam)
        self.k = np.sqrt(2 * lam)
        self.g_exact = g_exact
        self._L, self._R = self._sweep()

    def _cell(self, g0, slope, tau):
        # int_0^tau (g0 + slope v) exp(-k (tau - v)) dv
        k = self.k
        e = -np.expm1(-k * tau)
        return g0 * e / k + slope * (tau / k - e / k ** 2)

    def _sweep(self):
        x, g, k = self.x, self.g, self.k
        h = np.diff(x)
        s = np.diff(g) / h
        decay = np.exp(-k * h)
        inc_L = self._cell(g[:-1], s, h)
        inc_R = self._cell(g[1:], -s, h)
        L = np.zeros(len(x))
        R = np.zeros(len(x))
        for j in range(len(h)):
            L[j + 1] = decay[j] * L[j] + inc_L[j]
        for j in range(len(h) - 1, -1, -1):
            R[j] = decay[j] * R[j + 1] + inc_R[j]
        return L, R

    def _g(self, x):
        return np.interp(x, self.x, self.g, left=0.0, right=0.0)

    def _LR(self, x):
        x = np.asarray(x, float)
        xs, k = self.x, self.k
        j = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
        inside = (x >= xs[0]) & (x <= xs[-1])
        h = xs[j + 1] - xs[j]
        s = (self.g[j + 1] - self.g[j]) / h
        tau = np.clip(x - xs[j], 0, h)
        sig = np.clip(xs[j + 1] - x, 0, h)
        L = np.exp(-k * tau) * self._L[j] + self._cell(self.g[j], s, tau)
        R = np.exp(-k * sig) * self._R[j + 1] + self._cell(self.g[j + 1], -s, sig)
        # closed form outside the sampled window (g vanishes there)
        left = x < xs[0]
        right = x > xs[-1]
        L = np.where(left, 0.0, np.where(right, self._L[-1] * np.exp(-k * (x - xs[-1])), L))
        R = np.where(right, 0.0, np.where(left, self._R[0] * np.exp(-k * (xs[0] - x)), R))
        return np.where(inside | left | right, L, 0.0), R

    def __call__(self, x, derivative: int = 0):
        L, R = self._LR(x)
        if derivative == 0:
            return (L + R) / self.k
        if derivative == 1:
            return R - L
        if derivative == 2:
            return self.k * (L + R) - 2 * self._g(x)
        raise ValueError("derivative must be 0, 1 or 2")

    def residual(self, points=None) -> float:
        """Relative sup residual of ``Phi''/2 + g - lam Phi`` with a five-point second difference.

        The second derivative is taken numerically from ``Phi`` alone with a
        step of half the grid spacing, and ``g`` is the exact function when
        one was given.
        """
        h = 0.5 * float(np.min(np.diff(self.x)))
        if points is None:
            points = np.arange(self.x[0] + 2 * h, self.x[-1] - 2 * h + 1e-15, h)
        x = np.asarray(points, float)
        f = [self(x + m * h) for m in (-2, -1, 0, 1, 2)]
        d2 = (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * h * h)
        g = self.g_exact(x) if self.g_exact is not None else self._g(x)
        scale = float(np.max(np.abs(self.g)))
        if scale == 0:
            return float(np.max(np.abs(0.5 * d2 - self.lam * f[2])))
        return float(np.max(np.abs(0.5 * d2 + g - self.lam * f[2])) / scale)


def resolvent_phi(g, lam: float, x=None, tol: float | None = None) -> ResolventPhi:
    """Build ``Phi_lam`` for ``g`` given as a callable (with ``x``) or as ``(x, values)``.

    With ``tol`` set, a residual above ``tol`` raises ``ValueError`` (grid too coarse).
    """
    if callable(g):
        if x is None:
            raise ValueError("a grid is required for a callable g")
        phi = ResolventPhi(x, g(np.asarray(x, float)), lam, g_exact=g)
    else:
        xs, vals = g
        if np.any(np.asarray(vals) < 0):
            raise ValueError("g must be nonnegative")
        phi = ResolventPhi(xs, vals, lam)
    if tol is not None:
        res = phi.residual()
        if res > tol:
            raise ValueError(f"residual {res:.3g} above {tol:g}: grid too coarse")
    return phi


def _path_slopes(times, Y):
    t = np.asarray(times, float)
    tc = t - t.mean()
    return (Y - Y.mean(axis=1, keepdims=True)) @ tc / np.dot(tc, tc)


def stationarity_generator_check(times, F_values, phi, mass=None, level: float = 0.99,
                                 drift_level: float = 0.999, seed: int = 0) -> dict:
    """Drift of ``E Phi(F(u(t)))`` over a sampling window.

    ``F_values`` has shape ``(paths, times)``.  Each path contributes the
    least-squares slope of ``Phi(F)`` against ``t``; the report carries the
    mean slope with a bootstrap interval and passes iff the interval
    contains 0.  If ``mass`` is given and its mean slope is significant at
    ``drift_level``, :class:`NonStationaryError` is raised.
    """
    F_values = np.atleast_2d(np.asarray(F_values, float))
    if F_values.shape[0] < 2:
        raise ValueError("need at least two paths")
    if mass is not None:
        ms = _path_slopes(times, np.atleast_2d(mass))
        if np.ptp(ms) > 0:
            lo, hi = bootstrap_mean_ci(ms, drift_level, seed=seed)
            if lo > 0 or hi < 0:
                raise NonStationaryError(f"mean mass drifts: slope CI [{lo:.3g}, {hi:.3g}]")
    slopes = _path_slopes(times, phi(F_values))
    mean = float(slopes.mean())
    if np.ptp(slopes) == 0:
        lo = hi = mean
    else:
        lo, hi = bootstrap_mean_ci(slopes, level, seed=seed)
    return {"slope": mean, "ci": [lo, hi], "pass": bool(lo <= 0 <= hi),
            "paths": int(F_values.shape[0]), "window": [float(times[0]), float(times[-1])]}


def small_ball_probe(m: EmpiricalMeasure, deltas=None, slack: float = 1.0) -> dict:
    """Empirical ``mu(||u|| <= delta)`` against a linear envelope through the origin.

    ``C`` is the least-squares slope of probability on ``delta``; the probe
    passes iff every probability is at most ``C delta (1 + slack)``.  All
    zero counts are inconclusive.
    """
    deltas = np.geomspace(0.01, 1.0, 25) if deltas is None else np.asarray(deltas, float)
    if np.any(np.diff(deltas) <= 0) or deltas[0] <= 0:
        raise ValueError("deltas must be positive and increasing")
    nrm = m.basis.norm(m.snapshots, 0.0)
    prob = np.array([m.probability(nrm <= d) for d in deltas])
    degenerate = bool(prob[0] >= 1.0)
    if not np.any(prob > 0):
        return {"deltas": deltas.tolist(), "probability": prob.tolist(), "C": float("nan"),
                "inconclusive": True, "degenerate": degenerate, "pass": False}
    C = float(np.dot(deltas, prob) / np.dot(deltas, deltas))
    env = C * deltas * (1 + slack)
    return {"deltas": deltas.tolist(), "probability": prob.tolist(), "C": C, "slack": slack,
            "envelope": env.tolist(), "max_ratio": float(np.max(prob / (C * deltas))),
            "inconclusive": False, "degenerate": degenerate,
            "pass": bool(np.all(prob <= env + 1e-15))}
