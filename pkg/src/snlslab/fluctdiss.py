"""Damped and forced truncated NLS: stepping, dissipation rates, Itô balances.

The equation advanced here is

    du = i[(Delta - 1)u - P_N(|u|^{p-1}u)] dt
         - alpha [(1 - Delta)^{s-1} + exp(rho(||u||_{s-}))] u dt + sqrt(alpha) d eta_N

with ``eta_N = sum_m a_m (B1_m + i B2_m) e_m``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .config import SimConfig
from .dynamics import BLOWUP_THRESHOLD, BlowUpError, HamiltonianStepper
from .noise import EnsembleNoise, GrowthPair, NoiseSpec, RngStream, _normals
from .spectral import ModeBasis, SpectralField, build_basis

__all__ = [
    "FluctuationDissipation",
    "EnsembleRun",
    "EnergyDissipation",
    "dissipation_M",
    "dissipation_E",
    "fit_cross_constant",
    "sde_step",
    "ito_mass_balance",
    "ito_energy_balance",
    "chi_R",
    "CHI_DERIVATIVE_BOUNDS",
    "bootstrap_mean_ci",
]

# paths are advanced in fixed blocks so results do not depend on --threads
PATH_BLOCK = 256


def bootstrap_mean_ci(values, level: float = 0.99, n_resamples: int = 4999, seed: int = 0):
    """Percentile bootstrap interval for the mean, deterministic in ``seed``."""
    values = np.asarray(values, float)
    if np.ptp(values) == 0:
        v = float(values[0])
        return v, v
    res = stats.bootstrap((values,), np.mean, confidence_level=level,
                          n_resamples=n_resamples, method="percentile",
                          random_state=np.random.default_rng(seed))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


class FluctuationDissipation:
    """Stepper for the damped and forced system on a fixed basis.

    Parameters
    ----------
    cfg : SimConfig
    spec : NoiseSpec, optional
        Defaults to ``NoiseSpec.default`` with the config's decay and scale.
    growth : GrowthPair, optional
        Defaults to ``GrowthPair(cfg.xi)``.
    basis : ModeBasis, optional
    """

    def __init__(self, cfg: SimConfig, spec: NoiseSpec | None = None,
                 growth: GrowthPair | None = None, basis: ModeBasis | None = None):
        if basis is None:
            basis = spec.basis if spec is not None else build_basis(cfg.d, cfg.N, cfg.full_shell)
        if spec is None:
            spec = NoiseSpec.default(basis, cfg.s, cfg.noise_scale, cfg.noise_decay)
        if not spec.basis.same_as(basis):
            raise ValueError("noise spec lives on another basis")
        self.cfg = cfg
        self.basis = basis
        self.spec = spec
        self.growth = growth if growth is not None else GrowthPair(cfg.xi)
        self.ham = HamiltonianStepper(
            basis, cfg.p, cfg.scheme, oversampling=cfg.oversampling,
            nonlinear=cfg.nonlinear, taming_factor=cfg.taming_factor,
            taming_depth=cfg.taming_depth, taming_sigma=cfg.s_minus)
        self.grid = self.ham.grid
        self.D = (1.0 + basis.eigenvalues) ** (cfg.s - 1)
        self.a2 = spec.amplitudes ** 2
        self.saturated = 0

    @property
    def alpha(self) -> float:
        return self.cfg.alpha

    def weight(self, C):
        """Damping weight ``exp(rho(.))`` of each row and saturation flags."""
        x = self.basis.norm(C, self.cfg.s_minus)
        if self.cfg.rho_squared:
            x = x * x
        return self.growth.weight(x)

    def calM(self, C, w=None):
        if w is None:
            w, _ = self.weight(C)
        return self.basis.norm(C, self.cfg.s - 1) ** 2 + w * self.basis.norm(C, 0.0) ** 2

    def step(self, C, dt: float, normals=None, w=None):
        """One step for rows of ``C``; ``normals`` has shape ``C.shape + (2,)``.

        With ``alpha == 0`` this is exactly the Hamiltonian step.
        """
        alpha = self.cfg.alpha
        if alpha > 0 and w is None:
            w, sat = self.weight(C)
            self.saturated += int(np.count_nonzero(sat))
        C = self.ham.step(C, dt)
        if alpha == 0:
            return C
        g = self.D + np.asarray(w)[..., None]
        f = np.exp(-alpha * g * dt)
        C = C * f
        if normals is not None:
            sd = np.sqrt(self.a2 * (-np.expm1(-2 * alpha * g * dt)) / g / 2)
            C = C + sd * (normals[..., 0] + 1j * normals[..., 1])
        return C

    def energy_terms(self, C):
        """Grid quantities per row: nonlinear coefficients and L^q integrals."""
        g = self.grid.to_grid(C)
        a = np.abs(g)
        ap = a ** (self.cfg.p - 1)
        nl = self.grid.from_grid(ap * g)
        return {
            "nl": nl,
            "Lp1": self.grid.integrate(ap * a * a),
            "Lm1": self.grid.integrate(ap),
        }

    def calE(self, C, w=None, terms=None):
        if w is None:
            w, _ = self.weight(C)
        if terms is None:
            terms = self.energy_terms(C)
        b = self.basis
        cross = np.sum(self.D * np.real(C * np.conj(terms["nl"])), axis=-1)
        return b.norm(C, self.cfg.s) ** 2 + cross + w * (b.norm(C, 1.0) ** 2 + terms["Lp1"])

    def energy(self, C, terms=None):
        if terms is None:
            terms = self.energy_terms(C)
        return 0.5 * self.basis.norm(C, 1.0) ** 2 + terms["Lp1"] / (self.cfg.p + 1)

    def run(self, C0, n_steps: int, seed: int, indices=None, dt: float | None = None,
            snapshot_steps=(), series_every: int = 1, track_energy: bool = False,
            threads: int = 1, noise: bool = True) -> "EnsembleRun":
        """Advance an ensemble and record balance integrands.

        Path ``j`` draws its noise from ``RngStream(seed, indices[j])``.
        Running integrals of the dissipation rates use the trapezoidal rule
        on the step grid.  Snapshots are kept at the steps listed in
        ``snapshot_steps``.
        """
        dt = self.cfg.dt if dt is None else dt
        C0 = np.atleast_2d(np.asarray(C0, complex))
        B = len(C0)
        if indices is None:
            indices = np.arange(B)
        indices = np.asarray(indices)
        blocks = [slice(i, min(i + PATH_BLOCK, B)) for i in range(0, B, PATH_BLOCK)]
        args = [(C0[sl], indices[sl]) for sl in blocks]

        def work(a):
            return self._run_block(a[0], n_steps, seed, a[1], dt, snapshot_steps,
                                   series_every, track_energy, noise)
        if threads > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                parts = list(ex.map(work, args))
        else:
            parts = [work(a) for a in args]
        return EnsembleRun.concatenate(parts)

    def _run_block(self, C, n_steps, seed, indices, dt, snapshot_steps, series_every,
                   track_energy, with_noise):
        B = len(C)
        alpha = self.cfg.alpha
        gen = EnsembleNoise(seed, indices, self.basis.n_modes) if (with_noise and alpha > 0) else None
        snap_set = sorted(set(int(s) for s in snapshot_steps))
        snaps = []
        n_rec = n_steps // series_every + 1
        times = np.arange(n_rec) * series_every * dt
        mass = np.empty((B, n_rec))
        int_M = np.zeros((B, n_rec))
        if track_energy:
            energy = np.empty((B, n_rec))
            int_E = np.zeros((B, n_rec))
            int_L = np.zeros((B, n_rec))
        acc_M = np.zeros(B)
        acc_E = np.zeros(B)
        acc_L = np.zeros(B)
        blown = np.zeros(B, bool)
        blow_time = np.full(B, np.nan)
        w, sat = self.weight(C)
        prev_M = self.calM(C, w)
        if track_energy:
            terms = self.energy_terms(C)
            prev_E = self.calE(C, w, terms)
            prev_L = terms["Lm1"]
            energy[:, 0] = self.energy(C, terms)
        mass[:, 0] = 0.5 * self.basis.norm(C, 0.0) ** 2
        if 0 in snap_set:
            snaps.append(C.copy())
        for n in range(1, n_steps + 1):
            self.saturated += int(np.count_nonzero(sat))
            normals = gen.next() if gen is not None else None
            C = self.step(C, dt, normals, w)
            nrm = self.basis.norm(C, 0.0)
            bad = ~(nrm <= BLOWUP_THRESHOLD)
            if np.any(bad & ~blown):
                new = bad & ~blown
                blow_time[new] = n * dt
                blown |= bad
            if np.any(blown):
                C[blown] = 0
            w, sat = self.weight(C)
            cur_M = self.calM(C, w)
            acc_M += 0.5 * dt * (prev_M + cur_M)
            prev_M = cur_M
            if track_energy:
                terms = self.energy_terms(C)
                cur_E = self.calE(C, w, terms)
                acc_E += 0.5 * dt * (prev_E + cur_E)
                acc_L += 0.5 * dt * (prev_L + terms["Lm1"])
                prev_E, prev_L = cur_E, terms["Lm1"]
            if n % series_every == 0:
                k = n // series_every
                mass[:, k] = 0.5 * nrm ** 2
                int_M[:, k] = acc_M
                if track_energy:
                    energy[:, k] = self.energy(C, terms)
                    int_E[:, k] = acc_E
                    int_L[:, k] = acc_L
            if n in snap_set:
                snaps.append(C.copy())
        run = EnsembleRun(
            times=times, mass=mass, int_calM=int_M,
            snapshots=np.stack(snaps, axis=1) if snaps else np.zeros((B, 0, self.basis.n_modes), complex),
            snapshot_times=np.array(snap_set, float) * dt,
            final=C, blown=blown, blow_time=blow_time,
            alpha=alpha, A0=self.spec.A(0), A1=self.spec.A(1), d=self.basis.d, p=self.cfg.p,
            indices=np.asarray(indices),
        )
        if track_energy:
            run.energy, run.int_calE, run.int_Lm1 = energy, int_E, int_L
        return run


@dataclass
class EnsembleRun:
    """Per-path series of an ensemble run, shape ``(paths, samples)``."""

    times: np.ndarray
    mass: np.ndarray
    int_calM: np.ndarray
    snapshots: np.ndarray
    snapshot_times: np.ndarray
    final: np.ndarray
    blown: np.ndarray
    blow_time: np.ndarray
    alpha: float
    A0: float
    A1: float
    d: int
    p: float
    indices: np.ndarray
    energy: np.ndarray | None = None
    int_calE: np.ndarray | None = None
    int_Lm1: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return len(self.mass)

    @staticmethod
    def concatenate(parts) -> "EnsembleRun":
        first = parts[0]
        if len(parts) == 1:
            return first
        cat = lambda name: None if getattr(first, name) is None else np.concatenate([getattr(r, name) for r in parts])
        return EnsembleRun(
            times=first.times, mass=cat("mass"), int_calM=cat("int_calM"),
            snapshots=cat("snapshots"), snapshot_times=first.snapshot_times,
            final=cat("final"), blown=cat("blown"), blow_time=cat("blow_time"),
            alpha=first.alpha, A0=first.A0, A1=first.A1, d=first.d, p=first.p,
            indices=cat("indices"), energy=cat("energy"), int_calE=cat("int_calE"),
            int_Lm1=cat("int_Lm1"))

    def time_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"t={t} is not a recorded time")
        return k


def sde_step(u: SpectralField, dt: float, cfg: SimConfig, spec: NoiseSpec, growth: GrowthPair, rng) -> SpectralField:
    """One step of the damped and forced system for a single field.

    The weight ``exp(rho(||u||_{s-}))`` is frozen at the start of the step.
    Taming events accumulate on the engine and are not raised.
    """
    if cfg.alpha > 0:
        normals = _normals(rng, (u.basis.n_modes, 2))
    else:
        normals = None
    eng = FluctuationDissipation(cfg, spec, growth, u.basis)
    c = eng.step(u.coeffs.copy(), dt, normals)
    if not eng.basis.norm(c, 0.0) <= BLOWUP_THRESHOLD:
        raise BlowUpError(dt, 1, "single step left the admissible range")
    return u.with_coeffs(c)


def dissipation_M(u: SpectralField, s: float, eps: float, growth: GrowthPair,
                  squared: bool = False, return_flag: bool = False):
    """Mass dissipation rate ``||u||_{s-1}^2 + exp(rho(||u||_{s-})) ||u||^2``.

    ``squared=True`` uses ``||u||_{s-}^2`` as the argument of rho.
    """
    b = u.basis
    x = b.norm(u.coeffs, s - eps)
    if squared:
        x = x * x
    w, sat = growth.weight(x)
    val = float(b.norm(u.coeffs, s - 1) ** 2 + w * b.norm(u.coeffs, 0.0) ** 2)
    return (val, bool(sat)) if return_flag else val


@dataclass
class EnergyDissipation:
    """Terms of the energy dissipation rate.

    ``value = norm_s_sq + cross + weight * (norm_1_sq + lp1)``.
    """

    value: float
    norm_s_sq: float
    cross: float
    weight: float
    norm_1_sq: float
    lp1: float
    s_minus_norm: float
    p: float
    saturated: bool = False

    def lower_bound(self, C_s: float) -> float:
        """``||u||_s^2 + (||u||_1^2 + ||u||_{L^{p+1}}^{p+1}) e^rho - C_s ||u||_{s-}^{p+1}``."""
        return (self.norm_s_sq + (self.norm_1_sq + self.lp1) * self.weight
                - C_s * self.s_minus_norm ** (self.p + 1))


def dissipation_E(u: SpectralField, s: float, eps: float, growth: GrowthPair, p: float,
                  grid_size: int | None = None, squared: bool = False) -> EnergyDissipation:
    """Energy dissipation rate ``E'(u; [(1 - Delta)^{s-1} + e^rho] u)``."""
    from .spectral import required_grid_size

    b = u.basis
    grid = b.collocation(grid_size or required_grid_size(b, p))
    c = u.coeffs
    g = grid.to_grid(c)
    a = np.abs(g)
    nl = grid.from_grid(a ** (p - 1) * g)
    D = (1.0 + b.eigenvalues) ** (s - 1)
    cross = float(np.sum(D * np.real(c * np.conj(nl))))
    x = float(b.norm(c, s - eps))
    w, sat = growth.weight(x * x if squared else x)
    w = float(w)
    ns = float(b.norm(c, s) ** 2)
    n1 = float(b.norm(c, 1.0) ** 2)
    lp1 = float(grid.integrate(a ** (p + 1)))
    return EnergyDissipation(ns + cross + w * (n1 + lp1), ns, cross, w, n1, lp1, x, p, bool(sat))


def fit_cross_constant(fields, s: float, eps: float, p: float, growth: GrowthPair | None = None) -> float:
    """Smallest ``C_s`` with ``-cross <= C_s ||u||_{s-}^{p+1}`` on the given fields."""
    growth = growth or GrowthPair("identity")
    best = 0.0
    for u in fields:
        e = dissipation_E(u, s, eps, growth, p)
        if e.s_minus_norm > 0:
            best = max(best, -e.cross / e.s_minus_norm ** (p + 1))
    return best


def _check_runs(runs: EnsembleRun, minimum: int = 100):
    if runs.n_paths < minimum:
        raise ValueError(f"need at least {minimum} trajectories, got {runs.n_paths}")
    if np.any(runs.blown):
        raise BlowUpError(float(np.nanmin(runs.blow_time)), -1, "trajectory blew up in the ensemble")


def ito_mass_balance(runs: EnsembleRun, t: float, level: float = 0.99, seed: int = 0) -> dict:
    """Residual ``M(t) + alpha int calM - M(0) - alpha A_{0,N} t / 2`` with a bootstrap CI."""
    _check_runs(runs)
    k = runs.time_index(t)
    t = float(runs.times[k])
    per_path = (runs.mass[:, k] + runs.alpha * runs.int_calM[:, k] - runs.mass[:, 0]
                - runs.alpha * runs.A0 * t / 2)
    lo, hi = bootstrap_mean_ci(per_path, level, seed=seed)
    return {
        "t": t,
        "residual": float(per_path.mean()),
        "ci": [lo, hi],
        "level": level,
        "forcing": runs.alpha * runs.A0 * t / 2,
        "n_paths": runs.n_paths,
        "pass": bool(lo <= 0.0 <= hi),
    }


def ito_energy_balance(runs: EnsembleRun, t: float, level: float = 0.99, seed: int = 0) -> dict:
    """Energy balance against two right-hand sides.

    ``exact`` is the full Itô drift of the energy,
    ``(alpha/2)[(A_0 + A_1) t + (p+1)/2 A_0 (2 pi)^{-d} int ||u||_{L^{p-1}}^{p-1}]``,
    for which the residual should vanish in mean.  ``stated`` is the
    one-sided bound ``(alpha/2)[A_1 t + A_0 (2 pi)^{-d} int ||u||_{L^{p-1}}^{p-1}]``
    whose margin is reported.
    """
    _check_runs(runs)
    if runs.energy is None:
        raise ValueError("run was made without track_energy")
    k = runs.time_index(t)
    t = float(runs.times[k])
    a, A0, A1, p = runs.alpha, runs.A0, runs.A1, runs.p
    vol = (2 * np.pi) ** (-runs.d)
    lhs = runs.energy[:, k] + a * runs.int_calE[:, k] - runs.energy[:, 0]
    exact = 0.5 * a * ((A0 + A1) * t + 0.5 * (p + 1) * A0 * vol * runs.int_Lm1[:, k])
    stated = 0.5 * a * (A1 * t + A0 * vol * runs.int_Lm1[:, k])
    res = lhs - exact
    lo, hi = bootstrap_mean_ci(res, level, seed=seed)
    margin = stated - lhs
    mlo, mhi = bootstrap_mean_ci(margin, level, seed=seed + 1)
    return {
        "t": t,
        "exact_residual": float(res.mean()),
        "exact_ci": [lo, hi],
        "exact_pass": bool(lo <= 0.0 <= hi),
        "stated_margin": float(margin.mean()),
        "stated_margin_ci": [mlo, mhi],
        "stated_holds": bool(mhi >= 0.0),
        "n_paths": runs.n_paths,
    }


def _bump(t):
    t = np.asarray(t, float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def _bump_d(t, m):
    # derivatives of exp(-1/t): f' = f/t^2, f'' = f (1 - 2t)/t^4
    t = np.asarray(t, float)
    f = _bump(t)
    out = np.zeros_like(t)
    pos = t > 0
    tp = t[pos]
    if m == 1:
        out[pos] = f[pos] / tp ** 2
    else:
        out[pos] = f[pos] * (1 - 2 * tp) / tp ** 4
    return out


def chi_R(x, R: float, derivative: int = 0):
    """Smooth cutoff equal to 1 on ``[0, R]`` and 0 on ``[2R, inf)``.

    The transition is ``1 - f(t)/(f(t) + f(1 - t))`` with
    ``f(t) = exp(-1/t)`` and ``t = x/R - 1``.  ``derivative`` in {0, 1, 2}.
    """
    if R <= 0:
        raise ValueError("R must be positive")
    t = np.asarray(x, float) / R - 1.0
    tc = np.clip(t, 0.0, 1.0)
    A, B = _bump(tc), _bump(1 - tc)
    D = A + B
    if derivative == 0:
        return 1.0 - A / D
    A1, B1 = _bump_d(tc, 1), -_bump_d(1 - tc, 1)
    num = A1 * B - A * B1
    inside = (t > 0) & (t < 1)
    if derivative == 1:
        out = -num / D ** 2 / R
    elif derivative == 2:
        A2, B2 = _bump_d(tc, 2), _bump_d(1 - tc, 2)
        num1 = A2 * B - A * B2
        out = -(num1 / D ** 2 - 2 * num * (A1 + B1) / D ** 3) / R ** 2
    else:
        raise ValueError("derivative must be 0, 1 or 2")
    return np.where(inside, out, 0.0)


def _chi_bounds():
    x = np.linspace(1.0, 2.0, 200001)
    return tuple(float(np.max(np.abs(chi_R(x, 1.0, m)))) for m in (1, 2))


# sup |chi^{(m)}| of the unit cutoff, m = 1, 2
CHI_DERIVATIVE_BOUNDS = _chi_bounds()
