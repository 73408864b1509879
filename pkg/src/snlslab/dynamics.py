"""Deterministic truncated NLS: steppers, Picard solver and studies.

The truncated equation in gauged form is

    dv/dt = i [ (Delta - 1) v - P_N(|v|^{p-1} v) ]

and the ungauged form drops the ``-1``.  Both are handled through the
``shift`` of the linear part (1 or 0).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, cumulative_trapezoid

from .spectral import (
    ModeBasis,
    SpectralField,
    build_basis,
    required_grid_size,
)

__all__ = [
    "BlowUpError",
    "PicardDivergenceError",
    "HamiltonianStepper",
    "Trajectory",
    "gauge_transform",
    "local_existence_time",
    "picard_local_solve",
    "integrate_deterministic",
    "flow_batch",
    "galerkin_convergence_study",
    "linfty_integral",
    "growth_tracker",
    "exact_plane_wave",
]

BLOWUP_THRESHOLD = 1e8


class BlowUpError(RuntimeError):
    """The discrete solution became non-finite or exceeded the norm threshold."""

    def __init__(self, time: float, step: int, detail: str = "", partial=None):
        super().__init__(f"blow-up at t={time:.6g} (step {step}): {detail}")
        self.time = time
        self.step = step
        self.detail = detail
        self.partial = partial


class PicardDivergenceError(RuntimeError):
    """The Duhamel iteration failed to contract."""

    def __init__(self, message: str, distances):
        super().__init__(message)
        self.distances = list(distances)


class HamiltonianStepper:
    """One-step maps for the truncated NLS on a fixed basis.

    Parameters
    ----------
    basis : ModeBasis
    p : float
        Power of the nonlinearity.
    scheme : {"strang-splitting", "exponential-rk"}
        Strang splitting uses the exact phase rotation ``u exp(-i h |u|^{p-1})``
        on the grid for the nonlinear part.  The exponential scheme is the
        Lawson (integrating factor) fourth order Runge-Kutta method.
    shift : float
        Constant added to ``-Delta`` in the linear part.
    taming_sigma : float
        Sobolev index used to measure growth in the nonlinear substep.
    """

    def __init__(self, basis: ModeBasis, p: float, scheme: str = "strang-splitting",
                 shift: float = 1.0, grid_size: int | None = None,
                 oversampling: float | None = None, nonlinear: bool = True,
                 taming_factor: float = 10.0, taming_depth: int = 8,
                 taming_sigma: float = 0.0):
        if scheme not in ("strang-splitting", "exponential-rk"):
            raise ValueError(f"unknown scheme {scheme!r}")
        need = required_grid_size(basis, p, oversampling)
        if grid_size is None:
            grid_size = need
        elif grid_size < need:
            raise ValueError(f"grid of {grid_size} points is below the {need} required")
        self.basis = basis
        self.p = float(p)
        self.scheme = scheme
        self.shift = float(shift)
        self.grid = basis.collocation(grid_size)
        self.nonlinear = bool(nonlinear)
        self.taming_factor = float(taming_factor)
        self.taming_depth = int(taming_depth)
        self.taming_sigma = float(taming_sigma)
        self.omega = self.shift + basis.eigenvalues
        self._phases = {}
        self.tamed = 0

    def phase(self, h: float) -> np.ndarray:
        ph = self._phases.get(h)
        if ph is None:
            ph = np.exp(-1j * h * self.omega)
            self._phases[h] = ph
        return ph

    def nonlinear_term(self, c) -> np.ndarray:
        """Coefficients of ``P_N(|u|^{p-1} u)``."""
        g = self.grid.to_grid(c)
        return self.grid.from_grid(np.abs(g) ** (self.p - 1) * g)

    def rhs(self, c) -> np.ndarray:
        return -1j * (self.omega * c + (self.nonlinear_term(c) if self.nonlinear else 0))

    def rotate(self, c, h: float, depth: int = 0) -> np.ndarray:
        """Nonlinear substep with recursive halving when growth is excessive."""
        g = self.grid.to_grid(c)
        a = np.abs(g)
        out = self.grid.from_grid(g * np.exp(-1j * h * a ** (self.p - 1)))
        if depth >= self.taming_depth or out.ndim == 0:
            return out
        before = self.basis.norm(c, self.taming_sigma)
        after = self.basis.norm(out, self.taming_sigma)
        with np.errstate(invalid="ignore", divide="ignore"):
            bad = ~(after <= self.taming_factor * np.maximum(before, 1e-300))
        if np.any(bad):
            self.tamed += int(np.count_nonzero(bad))
            sub = c[bad] if out.ndim > 1 else c
            half = self.rotate(self.rotate(sub, h / 2, depth + 1), h / 2, depth + 1)
            if out.ndim > 1:
                out[bad] = half
            else:
                out = half
        return out

    def step(self, c, dt: float) -> np.ndarray:
        if self.scheme == "strang-splitting":
            ph = self.phase(dt / 2)
            c = c * ph
            if self.nonlinear:
                c = self.rotate(c, dt)
            return c * ph
        return self._lawson(c, dt)

    def _lawson(self, c, h):
        e_half = self.phase(h / 2)
        e_full = self.phase(h)
        if not self.nonlinear:
            return c * e_full

        def f(x):
            return -1j * self.nonlinear_term(x)

        k1 = f(c)
        k2 = f(e_half * (c + 0.5 * h * k1))
        k3 = f(e_half * c + 0.5 * h * k2)
        k4 = f(e_full * c + h * e_half * k3)
        return e_full * c + (h / 6) * (e_full * k1 + 2 * e_half * (k2 + k3) + k4)


@dataclass
class Trajectory:
    """Sampled path of a field with per-sample diagnostics."""

    basis: ModeBasis
    times: np.ndarray
    coeffs: np.ndarray
    mass: np.ndarray
    energy: np.ndarray
    norms: dict
    linf: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        for name, arr in [("coeffs", self.coeffs), ("mass", self.mass),
                          ("energy", self.energy), ("linf", self.linf)]:
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries for {n} samples")

    def __len__(self):
        return len(self.times)

    def snapshot(self, i: int) -> SpectralField:
        return SpectralField(self.basis, self.coeffs[i])

    @property
    def snapshots(self):
        return [self.snapshot(i) for i in range(len(self))]

    def to_csv(self, path):
        sigmas = sorted(self.norms)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "M", "E"] + [f"norm_{s:g}" for s in sigmas] + ["linf"])
            for i, t in enumerate(self.times):
                w.writerow([repr(float(t)), repr(float(self.mass[i])), repr(float(self.energy[i]))]
                           + [repr(float(self.norms[s][i])) for s in sigmas]
                           + [repr(float(self.linf[i]))])


def _diagnostics(grid, basis, C, p, sigmas):
    g = grid.to_grid(C)
    a = np.abs(g)
    mass = 0.5 * basis.norm(C, 0.0) ** 2
    energy = 0.5 * basis.norm(C, 1.0) ** 2 + grid.integrate(a ** (p + 1)) / (p + 1)
    norms = {float(s): basis.norm(C, s) for s in sigmas}
    return mass, energy, norms, a.max(axis=-1)


def make_trajectory(basis, grid, times, C, p, sigmas=(0.0, 1.0), info=None) -> Trajectory:
    C = np.asarray(C)
    m, e, nrm, linf = _diagnostics(grid, basis, C, p, sigmas)
    return Trajectory(basis, np.asarray(times, float), C, m, e, nrm, linf, dict(info or {}))


def gauge_transform(u: SpectralField, t: float, direction: int = 1) -> SpectralField:
    """Multiply by ``exp(-i direction t)``.

    ``direction=1`` maps a solution of the ungauged equation to the gauged
    one, ``direction=-1`` inverts it.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    return u.with_coeffs(u.coeffs * np.exp(-1j * direction * t))


def local_existence_time(R: float, p: float, c: float = 1.0) -> float:
    """``1 / (2^7 R^{p-1} c)``."""
    if R <= 0:
        raise ValueError("R must be positive")
    if c < 1:
        raise ValueError("c must be >= 1")
    return 1.0 / (2 ** 7 * R ** (p - 1) * c)


def exact_plane_wave(basis: ModeBasis, k, amplitude: complex, p: float, t: float) -> SpectralField:
    """Closed-form solution ``c exp(i(k.x - omega t))`` of the gauged equation.

    ``omega = 1 + |k|^2 + |c|^{p-1}``.  The spatial profile is the physical
    function ``c exp(i k.x)``, i.e. a single coefficient ``(2 pi)^{d/2} c``.
    """
    k = np.atleast_1d(np.asarray(k))
    idx = basis.index_of(k)
    omega = 1 + float(k @ k) + abs(amplitude) ** (p - 1)
    c = np.zeros(basis.n_modes, complex)
    c[idx] = (2 * np.pi) ** (basis.d / 2) * amplitude * np.exp(-1j * omega * t)
    return SpectralField(basis, c)


def _restrict(u0: SpectralField, N: int | None) -> SpectralField:
    if N is None or N == u0.basis.N:
        return u0
    if N > u0.basis.N:
        raise ValueError(f"cutoff {N} exceeds basis cutoff {u0.basis.N}")
    N = u0.basis.cutoff(N)
    b = u0.basis.prefix(N)
    return SpectralField(b, u0.coeffs[: N + 1])


def _steps(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 0 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a whole number of steps of dt={dt}")
    return n


def flow_batch(stepper: HamiltonianStepper, C, dt: float, n_steps: int,
               callback=None, on_blowup: str = "raise"):
    """Advance a batch of coefficient rows by ``n_steps`` steps.

    ``callback(step, C)`` is called after every step (and with step 0
    before the first).  With ``on_blowup="mask"`` rows that blow up are
    frozen at zero and reported in the returned boolean mask.
    """
    C = np.array(C, dtype=complex)
    single = C.ndim == 1
    if single:
        C = C[None, :]
    dead = np.zeros(len(C), bool)
    if callback is not None:
        callback(0, C)
    for n in range(1, n_steps + 1):
        C = stepper.step(C, dt)
        nrm = stepper.basis.norm(C, 0.0)
        bad = ~(nrm <= BLOWUP_THRESHOLD)
        if np.any(bad & ~dead):
            if on_blowup == "raise":
                raise BlowUpError(n * dt, n, f"{int(np.count_nonzero(bad))} rows non-finite or above threshold")
            dead |= bad
            C[bad] = 0
        if callback is not None:
            callback(n, C)
    return (C[0] if single else C), dead


def integrate_deterministic(u0: SpectralField, N: int | None, dt: float, T: float,
                            scheme: str = "strang-splitting", *, p: float,
                            stride: int = 1, sigmas=(0.0, 1.0), shift: float = 1.0,
                            grid_size: int | None = None,
                            oversampling: float | None = None) -> Trajectory:
    """Integrate the truncated flow from ``P_N u0`` over ``[0, T]``.

    Samples are taken every ``stride`` steps (and always at ``T``).  On
    blow-up a :class:`BlowUpError` carrying the partial trajectory is raised.
    """
    u0 = _restrict(u0, N)
    basis = u0.basis
    stepper = HamiltonianStepper(basis, p, scheme, shift=shift, grid_size=grid_size,
                                 oversampling=oversampling)
    n = _steps(T, dt)
    times, snaps = [0.0], [u0.coeffs.copy()]
    c = u0.coeffs.copy()
    for i in range(1, n + 1):
        c = stepper.step(c, dt)
        nrm = basis.norm(c, 0.0)
        if not nrm <= BLOWUP_THRESHOLD:
            partial = make_trajectory(basis, stepper.grid, times, np.array(snaps), p, sigmas)
            raise BlowUpError(i * dt, i, f"L2 norm {nrm:.3g}", partial)
        if i % stride == 0 or i == n:
            times.append(i * dt)
            snaps.append(c.copy())
    traj = make_trajectory(basis, stepper.grid, times, np.array(snaps), p, sigmas,
                           {"scheme": scheme, "dt": dt, "steps": n, "tamed": stepper.tamed})
    traj.info["energy_drift"] = float(np.max(np.abs(traj.energy - traj.energy[0])))
    return traj


def _cumulative(f, x):
    # scipy's cumulative Simpson rule is real-valued only
    re = cumulative_simpson(f.real, x=x, axis=0, initial=0)
    im = cumulative_simpson(f.imag, x=x, axis=0, initial=0)
    return re + 1j * im


def picard_local_solve(u0: SpectralField, N: int | None, T: float, tol: float = 1e-12,
                       max_iter: int = 60, *, p: float, s: float, n_time: int = 65,
                       c: float = 1.0, enforce_window: bool = True,
                       grid_size: int | None = None) -> Trajectory:
    """Fixed point of the Duhamel map on ``[0, T]``.

    The iteration runs in the interaction picture ``w(t) = S(-t) u(t)``::

        w_{n+1}(t) = P_N u0 - i int_0^t S(-tau) P_N(|u_n|^{p-1} u_n)(tau) dtau

    on a uniform grid of ``n_time`` times with cumulative Simpson quadrature.
    The returned trajectory carries a certificate in ``info`` with the
    iterate distances ``sup_t ||u_{n+1} - u_n||_s``, the contraction factors
    and the check ``sup_t ||u(t)||_s <= 2 ||P_N u0||_s``.
    """
    u0 = _restrict(u0, N)
    basis = u0.basis
    R = u0.norm(s)
    if enforce_window and R > 0 and T > local_existence_time(R, p, c) * (1 + 1e-12):
        raise ValueError(f"T={T} exceeds the local existence time {local_existence_time(R, p, c):.3g}")
    stepper = HamiltonianStepper(basis, p, grid_size=grid_size)
    times = np.linspace(0.0, T, n_time)
    ph = np.exp(-1j * np.outer(times, stepper.omega))
    w = np.broadcast_to(u0.coeffs, (n_time, basis.n_modes)).copy()
    dists = []
    scale = max(R, 1e-300)
    converged = R == 0
    for it in range(max_iter):
        if converged:
            break
        u = ph * w
        integrand = np.conj(ph) * stepper.nonlinear_term(u)
        w_new = u0.coeffs - 1j * _cumulative(integrand, times)
        dist = float(np.max(basis.norm(w_new - w, s)))
        w = w_new
        if not math.isfinite(dist):
            raise PicardDivergenceError("non-finite iterate", dists + [dist])
        dists.append(dist)
        if dist <= tol * scale:
            converged = True
            break
        if len(dists) >= 4 and dists[-1] > dists[-2] > dists[-3] > dists[-4]:
            raise PicardDivergenceError(
                f"iterate distances grow: {dists[-4:]}", dists)
    if not converged:
        raise PicardDivergenceError(f"no convergence in {max_iter} iterations", dists)
    # factors are meaningful only above the rounding floor
    floor = 1e3 * np.finfo(float).eps * scale
    factors = [b / a for a, b in zip(dists[:-1], dists[1:]) if a > floor and b > floor]
    u = ph * w
    traj = make_trajectory(basis, stepper.grid, times, u, p, sigmas=(0.0, 1.0, s))
    sup = float(np.max(basis.norm(u, s)))
    traj.info.update({
        "iterations": len(dists),
        "distances": dists,
        "contraction_factors": factors,
        "max_contraction": max(factors) if factors else 0.0,
        "sup_norm": sup,
        "ball_bound": 2 * R,
        "ball_ok": bool(sup <= 2 * R + 1e-14),
    })
    return traj


def galerkin_convergence_study(u0: SpectralField, s: float, r: float, N_list, T: float, *,
                               p: float, dt: float, refine: int = 10,
                               samples: int = 17, c: float = 1.0,
                               enforce_window: bool = True) -> dict:
    """Sup-in-time ``H^r`` distance between truncated flows and a reference.

    The reference is the flow on the full basis of ``u0`` at step ``dt/refine``;
    each cutoff in ``N_list`` runs at step ``dt``.  The decay exponent is the
    least-squares slope of ``log error`` against ``log(1 + lambda_N)``.
    """
    if not r < s:
        raise ValueError("r must be smaller than s")
    N_list = sorted(int(n) for n in N_list)
    basis = u0.basis
    if N_list[-1] > basis.N:
        raise ValueError("largest cutoff exceeds the basis of u0")
    R = u0.norm(s)
    if enforce_window and R > 0 and T > local_existence_time(R, p, c) * (1 + 1e-12):
        raise ValueError("T exceeds the local existence window of u0")
    n = _steps(T, dt)
    if (n % (samples - 1)) != 0:
        raise ValueError("steps must be a multiple of samples - 1")
    every = n // (samples - 1)
    ref_stepper = HamiltonianStepper(basis, p)
    ref = [u0.coeffs.copy()]
    cc = u0.coeffs.copy()
    for i in range(1, n * refine + 1):
        cc = ref_stepper.step(cc, dt / refine)
        if i % (every * refine) == 0:
            ref.append(cc.copy())
    ref = np.array(ref)
    rows = []
    for N in N_list:
        N = basis.cutoff(N)
        b = basis.prefix(N)
        st = HamiltonianStepper(b, p)
        cc = u0.coeffs[: N + 1].copy()
        out = [cc.copy()]
        for i in range(1, n + 1):
            cc = st.step(cc, dt)
            if i % every == 0:
                out.append(cc.copy())
        diff = ref.copy()
        diff[:, : N + 1] -= np.array(out)
        err = float(np.max(basis.norm(diff, r)))
        rows.append({"N": N, "lambda_N": float(b.eigenvalues[-1]), "error": err})
    lam = np.array([row["lambda_N"] for row in rows])
    err = np.array([row["error"] for row in rows])
    ok = err > 0
    slope = float(np.polyfit(np.log1p(lam[ok]), np.log(err[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    expected = (r - s) / 2
    return {
        "rows": rows,
        "slope": slope,
        "expected_slope": expected,
        "relative_deviation": abs(slope - expected) / abs(expected),
        "T": T, "dt": dt, "reference_N": basis.N,
    }


def linfty_integral(traj: Trajectory, p: float) -> np.ndarray:
    """Running trapezoidal integral of ``||u||_inf^{p-1}``."""
    return cumulative_trapezoid(traj.linf ** (p - 1), traj.times, initial=0.0)


def growth_tracker(traj: Trajectory, r: float, growth, i: float) -> dict:
    """Largest ratio ``||u(t)||_r / xi(1 + i + ln(1 + t))`` along the path."""
    nr = traj.basis.norm(traj.coeffs, r)
    env = growth.xi(1 + i + np.log1p(traj.times))
    ratios = nr / env
    k = int(np.argmax(ratios))
    ratio = float(ratios[k])
    return {"ratio": ratio, "time_of_max": float(traj.times[k]), "ok": ratio <= 2.0,
            "times": traj.times, "norms": nr, "envelope": 2 * env}
