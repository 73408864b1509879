"""Empirical measures: stationary sampling, sweeps, invariance and ensembles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .config import SimConfig
from .dynamics import BlowUpError, HamiltonianStepper, flow_batch
from .fluctdiss import FluctuationDissipation, chi_R, bootstrap_mean_ci
from .noise import EnsembleNoise, GrowthPair, NoiseSpec, RngStream
from .spectral import ModeBasis, SpectralField, build_basis

__all__ = [
    "EmpiricalMeasure",
    "SigmaCertificate",
    "krylov_bogoliubov_sample",
    "stationary_report",
    "tail_criterion",
    "inviscid_sweep",
    "coupling_study",
    "observable_functions",
    "invariance_test",
    "sigma_membership",
    "membership_shift",
    "sigma_levels",
    "rejection_slope",
    "restrict",
    "restriction_check",
    "scaled_measure_run",
    "scaling_fit",
    "large_data_probe",
    "cumulative_measure",
]


@dataclass(eq=False)
class EmpiricalMeasure:
    """Weighted snapshot ensemble.

    Attributes
    ----------
    basis : ModeBasis
    snapshots : ndarray, shape (n, n_modes)
    weights : ndarray, shape (n,)
        Nonnegative, summing to one.
    provenance : dict
        Parameters from which the measure can be regenerated.
    groups : ndarray of int, optional
        Chain label of each snapshot, used for block bootstrap intervals.
    valid : bool
        False when a trajectory blew up while the measure was built.
    """

    basis: ModeBasis
    snapshots: np.ndarray
    weights: np.ndarray
    provenance: dict = field(default_factory=dict)
    groups: np.ndarray | None = None
    valid: bool = True

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.snapshots, complex))
        w = np.asarray(self.weights, float)
        if S.shape[1] != self.basis.n_modes:
            raise ValueError("snapshots do not match the basis")
        if w.shape != (len(S),):
            raise ValueError("one weight per snapshot is required")
        if len(S) == 0:
            raise ValueError("a measure needs at least one snapshot")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        self.snapshots, self.weights = S, w
        if self.groups is not None:
            self.groups = np.asarray(self.groups)

    @classmethod
    def uniform(cls, basis, snapshots, provenance=None, groups=None, valid=True):
        n = len(snapshots)
        return cls(basis, snapshots, np.full(n, 1.0 / n), dict(provenance or {}), groups, valid)

    @classmethod
    def dirac(cls, basis, point=None) -> "EmpiricalMeasure":
        c = np.zeros((1, basis.n_modes), complex) if point is None else np.atleast_2d(point)
        return cls.uniform(basis, c, {"kind": "dirac"})

    def __len__(self):
        return len(self.weights)

    def values(self, f) -> np.ndarray:
        return np.asarray(f(self.snapshots), float)

    def expectation(self, f) -> float:
        return float(np.dot(self.weights, self.values(f)))

    def probability(self, mask) -> float:
        return float(np.sum(self.weights[np.asarray(mask, bool)]))

    def resample(self, n: int, seed: int = 0) -> np.ndarray:
        """Indices of ``n`` draws from the measure."""
        rng = RngStream(seed, 0).generator
        return rng.choice(len(self), size=n, p=self.weights)

    def pushforward(self, fn, label: str = "pushforward") -> "EmpiricalMeasure":
        """Image measure under ``fn`` applied to the snapshot matrix."""
        prov = {"parent": self.provenance, "operation": label}
        return EmpiricalMeasure(self.basis, fn(self.snapshots.copy()), self.weights.copy(),
                                prov, self.groups, self.valid)


def _engine(cfg, spec, growth, basis=None):
    return FluctuationDissipation(cfg, spec, growth, basis)


def krylov_bogoliubov_sample(cfg: SimConfig, spec: NoiseSpec | None = None,
                             growth: GrowthPair | None = None, burn_in: float | None = None,
                             stride: float | None = None, count: int = 2048,
                             n_chains: int | None = None, seed: int | None = None,
                             stream_offset: int = 0, threads: int = 1) -> EmpiricalMeasure:
    """Snapshots of chains started at 0, taken every ``stride`` after ``burn_in``.

    Defaults: ``burn_in = 10/alpha``, ``stride = 1/alpha``, up to 512
    chains.  Each chain contributes ``ceil(count / n_chains)`` snapshots;
    chain ``j`` uses the random stream ``(seed, stream_offset + j)``.
    """
    if not cfg.alpha > 0:
        raise ValueError("sampling needs alpha > 0")
    burn_in = 10.0 / cfg.alpha if burn_in is None else burn_in
    stride = 1.0 / cfg.alpha if stride is None else stride
    if burn_in < 0 or stride <= 0:
        raise ValueError("burn_in must be >= 0 and stride > 0")
    seed = cfg.seed if seed is None else seed
    n_chains = min(count, 512) if n_chains is None else n_chains
    per = math.ceil(count / n_chains)
    eng = _engine(cfg, spec, growth)
    b_steps = int(round(burn_in / cfg.dt))
    s_steps = max(1, int(round(stride / cfg.dt)))
    snap = [b_steps + k * s_steps for k in range(per)]
    C0 = np.zeros((n_chains, eng.basis.n_modes), complex)
    idx = stream_offset + np.arange(n_chains)
    run = eng.run(C0, snap[-1], seed, idx, snapshot_steps=snap,
                  series_every=max(1, snap[-1]), threads=threads)
    S = run.snapshots.reshape(-1, eng.basis.n_modes)
    groups = np.repeat(idx, per)
    prov = {
        "kind": "krylov-bogoliubov",
        "alpha": cfg.alpha, "N": eng.basis.N, "d": cfg.d, "p": cfg.p, "s": cfg.s,
        "eps": cfg.eps, "dt": cfg.dt, "xi": eng.growth.name,
        "burn_in": burn_in, "stride": stride, "seed": seed,
        "streams": [int(idx[0]), int(idx[-1])], "per_chain": per,
        "noise_A0N": eng.spec.A(0), "steps": snap[-1],
        "blown_chains": int(np.count_nonzero(run.blown)),
        "tamed": eng.ham.tamed, "saturated": eng.saturated,
    }
    return EmpiricalMeasure.uniform(eng.basis, S, prov, groups, valid=not np.any(run.blown))


def _group_ci(values, weights, groups, level=0.99, seed=0, n_resamples=2000):
    """Bootstrap interval of a weighted mean, resampling whole chains."""
    if groups is None:
        return bootstrap_mean_ci(values, level, seed=seed)
    labels, inv = np.unique(groups, return_inverse=True)
    if len(labels) < 2:
        v = float(np.dot(weights, values))
        return v, v
    num = np.bincount(inv, weights=weights * values)
    den = np.bincount(inv, weights=weights)
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(labels), size=(n_resamples, len(labels)))
    est = num[pick].sum(1) / den[pick].sum(1)
    a = (1 - level) / 2
    return float(np.quantile(est, a)), float(np.quantile(est, 1 - a))


def tail_criterion(R_list, tail, slope_max: float = -0.8) -> dict:
    """Decrease and log-log slope of a tail curve.

    The curve passes when it has at least two positive values, never
    increases, and the least-squares slope over its positive values is at
    most ``slope_max``.  An identically zero curve is reported as degenerate.
    """
    R = np.asarray(R_list, float)
    T = np.asarray(tail, float)
    pos = T > 0
    nonincreasing = bool(np.all(np.diff(T) <= 0))
    if pos.sum() >= 2:
        slope = float(np.polyfit(np.log(R[pos]), np.log(T[pos]), 1)[0])
    else:
        slope = float("nan")
    degenerate = not np.any(pos)
    ok = bool(pos.sum() >= 2 and nonincreasing and T[0] > T[-1] and slope <= slope_max)
    return {"R": R.tolist(), "tail": T.tolist(), "slope": slope, "nonincreasing": nonincreasing,
            "positive_points": int(pos.sum()), "degenerate": degenerate, "pass": ok}


def stationary_report(m: EmpiricalMeasure, cfg: SimConfig, spec: NoiseSpec | None = None,
                      growth: GrowthPair | None = None, R_list=(1, 2, 4, 8),
                      level: float = 0.99, seed: int = 0) -> dict:
    """Balance and moment diagnostics of a sampled stationary measure."""
    eng = _engine(cfg, spec, growth, m.basis)
    S, w = m.snapshots, m.weights
    calM = eng.calM(S)
    calE = eng.calE(S)
    expm, sat = eng.growth.weight(m.basis.norm(S, cfg.s_minus))
    sq = m.basis.norm(S, 0.0) ** 2
    mean_M = float(np.dot(w, calM))
    lo, hi = _group_ci(calM, w, m.groups, level, seed)
    target = eng.spec.A(0) / 2
    tail = [float(np.dot(w, calM * (1 - chi_R(sq, R)))) for R in R_list]
    crit = tail_criterion(R_list, tail)
    # a second curve on radii where the samples actually live
    q = np.quantile(sq, [0.5, 0.75, 0.9, 0.97, 0.99]) if len(sq) > 1 else np.array([1.0])
    R_adapt = np.unique(np.maximum(q / 1.5, 1e-12))
    tail_adapt = [float(np.dot(w, calM * (1 - chi_R(sq, R)))) for R in R_adapt]
    fin = np.isfinite(calE)
    return {
        "n": len(m),
        "mean_calM": mean_M,
        "calM_ci": [lo, hi],
        "target_calM": target,
        "relative_error": abs(mean_M - target) / target if target > 0 else float("nan"),
        "target_in_ci": bool(lo <= target <= hi),
        "mean_calE": float(np.dot(w[fin], calE[fin]) / max(w[fin].sum(), 1e-300)),
        "calE_finite": bool(np.all(fin)),
        "exp_moment": float(np.dot(w, expm)),
        "exp_moment_saturated": int(np.count_nonzero(sat)),
        "max_mass_norm_sq": float(sq.max()),
        "tail": crit,
        "tail_adaptive": tail_criterion(R_adapt, tail_adapt, slope_max=-0.8),
    }


def observable_functions(basis: ModeBasis, p: float, r: float, low_modes=(0, 1), grid=None,
                         phases: bool = True, moduli: bool = False) -> dict:
    """Scalar observables on coefficient matrices, keyed by name.

    The default set is mass, energy, ``||u||_r`` and the real and imaginary
    parts of the low modes.  ``moduli`` adds ``abs_c{k}``; ``phases=False``
    drops the real and imaginary parts, whose laws are fixed by the gauge
    symmetry.
    """
    from .spectral import required_grid_size

    grid = grid or basis.collocation(required_grid_size(basis, p))

    def energy(C):
        g = np.abs(grid.to_grid(C))
        return 0.5 * basis.norm(C, 1.0) ** 2 + grid.integrate(g ** (p + 1)) / (p + 1)

    obs = {
        "M": lambda C: 0.5 * basis.norm(C, 0.0) ** 2,
        "E": energy,
        f"norm_{r:g}": lambda C: basis.norm(C, r),
    }
    if moduli:
        for k in low_modes:
            obs[f"abs_c{k}"] = lambda C, k=k: np.abs(C[:, k])
    if not phases:
        return obs
    for k in low_modes:
        obs[f"re_c{k}"] = lambda C, k=k: C[:, k].real
        obs[f"im_c{k}"] = lambda C, k=k: C[:, k].imag
    return obs


def invariance_test(m: EmpiricalMeasure, t: float, cfg: SimConfig, observables=None,
                    r: float | None = None, level: float = 0.01) -> dict:
    """Compare observables of ``m`` with those of its image under the flow at time ``t``.

    Two-sample Kolmogorov-Smirnov statistics with Bonferroni-corrected
    p-values and the first two moments are reported per observable.
    """
    r = cfg.s_minus if r is None else r
    obs = observables or observable_functions(m.basis, cfg.p, r)
    n_steps = int(round(t / cfg.dt))
    if n_steps == 0:
        after = m.snapshots.copy()
    else:
        stepper = HamiltonianStepper(m.basis, cfg.p, cfg.scheme, oversampling=cfg.oversampling,
                                     nonlinear=cfg.nonlinear)
        after, _ = flow_batch(stepper, m.snapshots, cfg.dt, n_steps)
    rows = {}
    for name, f in obs.items():
        a, b = np.asarray(f(m.snapshots), float), np.asarray(f(after), float)
        if np.array_equal(a, b):
            ks, pv = 0.0, 1.0
        else:
            res = stats.ks_2samp(a, b)
            ks, pv = float(res.statistic), float(res.pvalue)
        rows[name] = {
            "ks": ks, "p_value": pv, "p_adjusted": min(1.0, pv * len(obs)),
            "mean_before": float(np.dot(m.weights, a)), "mean_after": float(np.dot(m.weights, b)),
            "var_before": float(np.var(a)), "var_after": float(np.var(b)),
        }
    return {
        "t": t, "n": len(m), "observables": rows,
        "max_ks": max(row["ks"] for row in rows.values()),
        "pass": all(row["p_adjusted"] > level for row in rows.values()),
        "pushed": after,
    }


def inviscid_sweep(cfg: SimConfig, alphas, count: int = 2048, burn_in_factor: float = 10.0,
                   stride_factor: float = 1.0, n_chains: int | None = None,
                   spec: NoiseSpec | None = None, growth: GrowthPair | None = None,
                   seed: int | None = None, threads: int = 1) -> dict:
    """Stationary measures for decreasing ``alpha`` with burn-in ``burn_in_factor/alpha``."""
    alphas = [float(a) for a in alphas]
    if any(b >= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be decreasing")
    measures, rows = [], []
    for a in alphas:
        c = cfg.replace(alpha=a)
        m = krylov_bogoliubov_sample(c, spec, growth, burn_in_factor / a, stride_factor / a,
                                     count, n_chains, seed, threads=threads)
        eng = _engine(c, spec, growth, m.basis)
        obs = observable_functions(m.basis, c.p, c.s_minus)
        row = {"alpha": a, "mean_calM": m.expectation(eng.calM), "target_calM": eng.spec.A(0) / 2,
               "valid": m.valid}
        for name in ("M", "E", f"norm_{c.s_minus:g}"):
            v = m.values(obs[name])
            row[f"mean_{name}"] = float(np.dot(m.weights, v))
            row[f"var_{name}"] = float(np.dot(m.weights, (v - row[f"mean_{name}"]) ** 2))
        measures.append(m)
        rows.append(row)
    keys = [k for k in rows[0] if k.startswith("mean_")]
    jumps = max((max(abs(math.log(r2[k] / r1[k])) for k in keys if r1[k] > 0 and r2[k] > 0)
                 for r1, r2 in zip(rows, rows[1:])), default=0.0)
    return {"alphas": alphas, "measures": measures, "rows": rows,
            "max_log_ratio_adjacent": float(jumps),
            "continuous": bool(jumps < math.log(10))}


def coupling_study(cfg: SimConfig, alphas, T: float, R: float, r_cut: float, n_paths: int = 256,
                   seed: int | None = None, spec: NoiseSpec | None = None,
                   growth: GrowthPair | None = None, u0=None) -> dict:
    """Distance between the undamped flow and the damped-forced solution.

    For each ``alpha`` the same initial data (in the ``H^s`` ball of radius
    ``R``) and the same normals are used.  The event ``S_r`` requires the
    martingale ``sum_m (u, noise increment)`` and the linear damped noise
    ``z`` to stay below ``r_cut sqrt(alpha) T`` on ``[0, T]``.
    """
    seed = cfg.seed if seed is None else seed
    base = _engine(cfg.replace(alpha=0.0), spec, growth)
    basis = base.basis
    if u0 is None:
        gen = RngStream(seed, 1 << 30).generator
        z = gen.standard_normal((n_paths, basis.n_modes, 2))
        C0 = (z[..., 0] + 1j * z[..., 1]) * (1 + basis.eigenvalues) ** (-(cfg.s + 1) / 2)
        C0 *= (R * gen.uniform(size=n_paths) / basis.norm(C0, cfg.s))[:, None]
    else:
        C0 = np.atleast_2d(np.asarray(u0, complex))
        if np.any(basis.norm(C0, cfg.s) > R * (1 + 1e-12)):
            raise ValueError("initial data outside the ball of radius R")
    n_paths = len(C0)
    n_steps = int(round(T / cfg.dt))
    ref, _ = flow_batch(base.ham, C0, cfg.dt, n_steps)
    lam = basis.eigenvalues
    rows = []
    for a in alphas:
        a = float(a)
        if a == 0:
            rows.append({"alpha": 0.0, "mean_error_on_S": 0.0, "prob_S": 1.0, "mean_error": 0.0})
            continue
        eng = _engine(cfg.replace(alpha=a), spec, growth, basis)
        D = eng.D
        noise = EnsembleNoise(seed, np.arange(n_paths), basis.n_modes)
        fz = np.exp((-1j * (1 + lam) - a * D) * cfg.dt)
        sdz = np.sqrt(eng.a2 * (-np.expm1(-2 * a * D * cfg.dt)) / D / 2)
        C = C0.copy()
        zz = np.zeros_like(C)
        mart = np.zeros(n_paths)
        sup_m = np.zeros(n_paths)
        sup_z = np.zeros(n_paths)
        for _ in range(n_steps):
            xi = noise.next()
            w, _ = eng.weight(C)
            g = D + w[:, None]
            sd = np.sqrt(eng.a2 * (-np.expm1(-2 * a * g * cfg.dt)) / g / 2)
            inc = sd * (xi[..., 0] + 1j * xi[..., 1])
            mart += np.sum(np.real(np.conj(C) * inc), axis=1)
            C = eng.ham.step(C, cfg.dt) * np.exp(-a * g * cfg.dt) + inc
            zz = zz * fz + sdz * (xi[..., 0] + 1j * xi[..., 1])
            np.maximum(sup_m, np.abs(mart), out=sup_m)
            np.maximum(sup_z, basis.norm(zz, 0.0), out=sup_z)
        err = basis.norm(ref - C, 0.0)
        on_S = (sup_m <= r_cut * math.sqrt(a) * T) & (sup_z <= r_cut * math.sqrt(a) * T)
        rows.append({"alpha": a, "mean_error_on_S": float(np.mean(err * on_S)),
                     "prob_S": float(on_S.mean()), "mean_error": float(err.mean())})
    vals = [row["mean_error_on_S"] for row in sorted(rows, key=lambda r: -r["alpha"])]
    return {"T": T, "R": R, "r_cut": r_cut, "n_paths": n_paths, "rows": rows,
            "decreasing_in_alpha": bool(all(b <= a for a, b in zip(vals, vals[1:])))}


@dataclass
class SigmaCertificate:
    """Outcome of the slow-growth membership check at one level ``i``."""

    i: float
    r: float
    xi: str
    j_max: int
    N: int
    safety: float
    T: dict
    checkpoints: dict
    passed: np.ndarray
    max_ratio: np.ndarray
    fail_j: np.ndarray
    envelope_ratio: np.ndarray
    blown: np.ndarray

    @property
    def rejected_fraction(self) -> float:
        return float(1 - self.passed.mean())


def sigma_levels(X, levels, j_max: int, r: float, growth: GrowthPair, cfg: SimConfig,
                 safety: float | None = None, basis: ModeBasis | None = None) -> dict:
    """Membership certificates for several levels from a single flow.

    For level ``i`` and ``j = 1..j_max`` the bound ``||phi^t u||_r <= xi(i+j)``
    is checked at every step up to the last checkpoint ``K_j T_j``, with
    ``T_j = safety xi(i+j)^{1-p}`` and ``K_j = ceil(e^j / T_j)``.  This
    includes all checkpoints ``k T_j`` (snapped to the step grid).  The
    envelope ratio ``sup ||u(t)||_r / xi(1 + i + ln(1 + t))`` is recorded on
    ``[0, e^{j_max}]``.
    """
    if j_max > 5:
        raise ValueError("j_max must be at most 5")
    basis = basis or build_basis(cfg.d, cfg.N, cfg.full_shell)
    X = np.atleast_2d(np.asarray(X, complex))
    safety = 1.0 / (2 ** 7 * cfg.local_time_constant) if safety is None else safety
    dt, p = cfg.dt, cfg.p
    levels = [float(i) for i in levels]
    plan = {}
    for i in levels:
        for j in range(1, j_max + 1):
            Tj = safety * float(growth.xi(i + j)) ** (1 - p)
            K = math.ceil(math.exp(j) / Tj - 1e-9)
            plan[(i, j)] = (Tj, K, int(round(K * Tj / dt)))
    n_total = max(v[2] for v in plan.values())
    wanted = {v[2] for v in plan.values()}
    env_steps = int(math.floor(math.exp(j_max) / dt + 1e-9))
    env = {i: np.zeros(len(X)) for i in levels}
    env_xi = {i: growth.xi(1 + i + np.log1p(np.arange(env_steps + 1) * dt)) for i in levels}
    running = np.zeros(len(X))
    saved = {}

    def watch(n, C):
        nr = basis.norm(C, r)
        np.maximum(running, nr, out=running)
        if n <= env_steps:
            for i in levels:
                np.maximum(env[i], nr / env_xi[i][n], out=env[i])
        if n in wanted:
            saved[n] = running.copy()

    stepper = HamiltonianStepper(basis, p, cfg.scheme, oversampling=cfg.oversampling,
                                 nonlinear=cfg.nonlinear)
    _, blown = flow_batch(stepper, X, dt, n_total, callback=watch, on_blowup="mask")
    out = {}
    for i in levels:
        ratios = np.stack([saved[plan[(i, j)][2]] / float(growth.xi(i + j))
                           for j in range(1, j_max + 1)], axis=1)
        over = ratios > 1.0
        passed = ~over.any(axis=1) & ~blown
        fail_j = np.where(over.any(axis=1), over.argmax(axis=1) + 1, 0)
        out[i] = SigmaCertificate(
            i=i, r=r, xi=growth.name, j_max=j_max, N=basis.N, safety=safety,
            T={j: plan[(i, j)][0] for j in range(1, j_max + 1)},
            checkpoints={j: plan[(i, j)][1] for j in range(1, j_max + 1)},
            passed=passed, max_ratio=ratios.max(axis=1), fail_j=fail_j,
            envelope_ratio=env[i], blown=blown)
    return out


def sigma_membership(u0, i: float, j_max: int, r: float, growth: GrowthPair, cfg: SimConfig,
                     safety: float | None = None) -> SigmaCertificate:
    """Certificate for one level; ``u0`` is a field or a coefficient matrix."""
    basis = u0.basis if isinstance(u0, SpectralField) else None
    X = u0.coeffs if isinstance(u0, SpectralField) else u0
    return sigma_levels(X, [i], j_max, r, growth, cfg, safety, basis)[float(i)]


def membership_shift(X, i: float, t: float, j_max: int, r: float, growth: GrowthPair,
                     cfg: SimConfig, max_shift: int = 8, safety: float | None = None,
                     basis: ModeBasis | None = None) -> dict:
    """Smallest integer shift ``i_1`` with ``phi^t u`` a member at level ``i + i_1``.

    Only members at level ``i`` are pushed.  Membership is monotone in the
    level, so the first passing level on ``i, i+1, ..., i+max_shift`` is the
    empirical minimum.  Samples that pass no checked level get ``-1``.

    Returns
    -------
    dict
        ``members`` (mask at level ``i``), ``shift`` (per member) and
        ``i_1`` (largest shift over members, ``-1`` if any member fails all).
    """
    basis = basis or build_basis(cfg.d, cfg.N, cfg.full_shell)
    X = np.atleast_2d(np.asarray(X, complex))
    members = sigma_levels(X, [i], j_max, r, growth, cfg, safety, basis)[float(i)].passed
    Y = X[members]
    shift = np.full(len(Y), -1)
    if len(Y):
        stepper = HamiltonianStepper(basis, cfg.p, cfg.scheme, oversampling=cfg.oversampling,
                                     nonlinear=cfg.nonlinear)
        Y, blown = flow_batch(stepper, Y, cfg.dt, int(round(t / cfg.dt)), on_blowup="mask")
        levels = [float(i + k) for k in range(max_shift + 1)]
        certs = sigma_levels(Y, levels, j_max, r, growth, cfg, safety, basis)
        for k in range(max_shift, -1, -1):
            shift[certs[levels[k]].passed & ~blown] = k
    i_1 = int(shift.max()) if len(shift) and (shift >= 0).all() else (-1 if len(shift) else 0)
    return {"members": members, "shift": shift, "i_1": i_1, "t": float(t)}


def rejection_slope(levels, rejected, n: int, level: float = 0.95) -> dict:
    """Binomial maximum likelihood fit of ``P(reject at i) = exp(a + b (i - i_1))``.

    Zero counts are handled by the likelihood.  Besides the slope ``b`` the
    profile likelihood upper confidence bound on ``b`` is returned; when
    only the first level has rejections the estimate sits at the lower
    search bound and only the upper bound is informative.  With no
    rejections at all the fit is degenerate.
    """
    i = np.asarray(levels, float)
    k = np.asarray(rejected, float)
    if k.sum() == 0:
        return {"slope": float("nan"), "intercept": float("nan"), "slope_upper": float("nan"),
                "degenerate": True, "at_bound": False}
    x = i - i[0]
    lo_b, hi_b = -50.0, 10.0

    def nll(a, b):
        eta = np.minimum(a + b * x, -1e-12)
        return -float(np.sum(k * eta + (n - k) * np.log(-np.expm1(eta))))

    def best_a(b):
        res = optimize.minimize_scalar(lambda a: nll(a, b), bounds=(-60.0, 0.0), method="bounded",
                                       options={"xatol": 1e-10})
        return res.x, res.fun

    prof = optimize.minimize_scalar(lambda b: best_a(b)[1], bounds=(lo_b, hi_b), method="bounded",
                                    options={"xatol": 1e-8})
    b_hat = float(prof.x)
    a_hat, f_hat = best_a(b_hat)
    # a profile at the bound can sit slightly inside it; compare with the bound itself
    a_lo, f_lo = best_a(lo_b)
    if f_lo <= f_hat + 1e-9:
        b_hat, a_hat, f_hat = lo_b, a_lo, f_lo
    cut = f_hat + 0.5 * stats.chi2.ppf(level, 1)
    if best_a(hi_b)[1] <= cut:
        upper = hi_b
    else:
        upper = float(optimize.brentq(lambda b: best_a(b)[1] - cut, b_hat, hi_b, xtol=1e-8))
    return {"slope": b_hat, "intercept": float(a_hat), "slope_upper": upper, "level": level,
            "degenerate": False, "at_bound": bool(b_hat <= lo_b + 1e-6)}


def restrict(m: EmpiricalMeasure, predicate) -> EmpiricalMeasure:
    """Conditional measure on the snapshots selected by ``predicate``.

    ``predicate`` is a boolean mask or a function of the snapshot matrix.
    """
    mask = np.asarray(predicate(m.snapshots) if callable(predicate) else predicate, bool)
    if mask.shape != (len(m),):
        raise ValueError("predicate must give one boolean per snapshot")
    kept = float(m.weights[mask].sum())
    if not mask.any() or kept <= 0:
        raise ValueError("restriction is empty")
    w = m.weights[mask] / kept
    w /= w.sum()
    prov = {"parent": m.provenance, "operation": "restrict", "kept_mass": kept}
    groups = None if m.groups is None else m.groups[mask]
    return EmpiricalMeasure(m.basis, m.snapshots[mask], w, prov, groups, m.valid)


def restriction_check(m: EmpiricalMeasure, mask, f) -> dict:
    """Two-sided comparison of ``m`` and its restriction for ``0 <= f <= 1``.

    ``E_m f - eps <= E_res f <= E_m f / (1 - eps)`` with ``eps`` the removed mass.
    """
    mask = np.asarray(mask, bool)
    vals = m.values(f)
    if np.any(vals < -1e-15) or np.any(vals > 1 + 1e-15):
        raise ValueError("test observable must take values in [0, 1]")
    res = restrict(m, mask)
    eps = 1.0 - float(m.weights[mask].sum())
    em = float(np.dot(m.weights, vals))
    er = float(np.dot(res.weights, vals[mask]))
    lower, upper = em - eps, em / (1 - eps)
    return {"removed_mass": eps, "mean": em, "restricted_mean": er, "lower": lower, "upper": upper,
            "difference": abs(em - er), "pass": bool(lower - 1e-12 <= er <= upper + 1e-12)}


def large_data_probe(m: EmpiricalMeasure, s: float, n_max: int = 50, step: float = 1.0) -> dict:
    """Mass of ``{||u||_s >= n}`` for ``n = step, 2 step, ...`` and the largest ``n`` with positive mass."""
    nrm = m.basis.norm(m.snapshots, s)
    fr, th = [], []
    for k in range(1, n_max + 1):
        q = m.probability(nrm >= k * step)
        if q == 0:
            break
        fr.append(q)
        th.append(k * step)
    return {"thresholds": th, "fractions": fr, "n_star": th[-1] if th else 0.0,
            "step": step, "max_norm": float(nrm.max())}


def scaled_measure_run(cfg: SimConfig, spec: NoiseSpec | None, Lam: float,
                       growth: GrowthPair | None = None, probe_step: float = 0.1,
                       **sampling) -> tuple:
    """Sample with amplitudes multiplied by ``sqrt(Lam / A_0)``.

    ``A_0`` is the full lattice constant of ``spec``.  Returns the measure and
    a report comparing the mean mass dissipation with ``Lam`` and
    ``Lam_N / 2 = A_{0,N}/2`` of the scaled amplitudes.
    """
    if Lam <= 0:
        raise ValueError("Lambda must be positive")
    basis = spec.basis if spec is not None else build_basis(cfg.d, cfg.N, cfg.full_shell)
    spec = spec or NoiseSpec.default(basis, cfg.s, cfg.noise_scale, cfg.noise_decay)
    A0 = spec.A_full(0)
    if A0 <= 0:
        raise ValueError("A_0 must be positive")
    scaled = spec.scaled(math.sqrt(Lam / A0))
    m = krylov_bogoliubov_sample(cfg, scaled, growth, **sampling)
    m.provenance["Lambda"] = Lam
    eng = _engine(cfg, scaled, growth, basis)
    mean = m.expectation(eng.calM)
    lo, hi = _group_ci(eng.calM(m.snapshots), m.weights, m.groups)
    report = {"Lambda": Lam, "A0": A0, "mean_calM": mean, "calM_ci": [lo, hi],
              "target_Lambda": Lam, "target_half_Lambda_N": scaled.A(0) / 2,
              "probe": large_data_probe(m, cfg.s, step=probe_step)}
    return m, report


def scaling_fit(Lams, means) -> dict:
    """Linear fit of mean dissipation against ``Lambda``."""
    res = stats.linregress(np.asarray(Lams, float), np.asarray(means, float))
    return {"slope": float(res.slope), "intercept": float(res.intercept),
            "r_squared": float(res.rvalue ** 2)}


def cumulative_measure(measures, max_n: int | None = None) -> EmpiricalMeasure:
    """Mixture ``sum_n 2^{-n} mu_n`` over ``n = 1..max_n``, renormalized."""
    measures = list(measures)
    max_n = len(measures) if max_n is None else max_n
    if not 1 <= max_n <= len(measures):
        raise ValueError("max_n must be between 1 and the number of measures")
    measures = measures[:max_n]
    basis = measures[0].basis
    if any(not mm.basis.same_as(basis) for mm in measures):
        raise ValueError("measures live on different bases")
    mix = np.array([2.0 ** -(n + 1) for n in range(max_n)])
    mix /= mix.sum()
    S = np.concatenate([mm.snapshots for mm in measures])
    w = np.concatenate([c * mm.weights for c, mm in zip(mix, measures)])
    w /= w.sum()
    comp = np.concatenate([np.full(len(mm), n) for n, mm in enumerate(measures)])
    prov = {"operation": "cumulative", "components": [mm.provenance for mm in measures],
            "mixture_weights": mix.tolist()}
    return EmpiricalMeasure(basis, S, w, prov, comp)
