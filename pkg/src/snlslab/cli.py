"""Command line entry point: experiments, manifests, replay and plots.

Every run writes ``report.json`` and ``manifest.json`` into ``--out``.  The
manifest records the resolved configuration, the seed, input and output
digests, step counts and wall-clock time.  Its identifier hashes everything
except timing and the thread count, so two runs of the same experiment share
it.  Exit status: 0 success, 2 configuration or input error, 3 blow-up,
4 failed check (with ``--check``; ``oracle`` and ``replay`` always check).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .density import (distribution_of, quadratic_variation, refinement_study, resolvent_phi,
                      small_ball_probe, stationarity_generator_check)
from .dynamics import (BlowUpError, PicardDivergenceError, exact_plane_wave, galerkin_convergence_study,
                       growth_tracker, integrate_deterministic, local_existence_time, picard_local_solve)
from .fluctdiss import CHI_DERIVATIVE_BOUNDS, FluctuationDissipation, chi_R, ito_energy_balance, ito_mass_balance
from .io import json_ready, read_json, read_pack, sha256_file, write_json, write_pack
from .measures import (EmpiricalMeasure, coupling_study, cumulative_measure, invariance_test,
                       krylov_bogoliubov_sample, observable_functions, rejection_slope,
                       scaled_measure_run, scaling_fit, sigma_levels, stationary_report)
from .noise import GrowthPair, NoiseSpec, ou_exact_step, ou_moments, random_field
from .spectral import build_basis, critical_exponent, energy

__all__ = ["main", "run", "emit_plots", "SUBCOMMANDS"]

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_CHECK = 0, 2, 3, 4


class Context:
    """Output directory bookkeeping for one run."""

    def __init__(self, out: Path, ec: ExperimentConfig, threads: int, manifest_id: str):
        self.out = out
        self.ec = ec
        self.cfg = ec.sim
        self.threads = threads
        self.manifest_id = manifest_id
        self.outputs = []
        self.inputs = {}
        self.steps = 0

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def pack(self, name: str, basis, coeffs) -> str:
        write_pack(self.path(name), basis, coeffs, self.cfg.p, self.cfg.s, self.cfg.eps)
        return name

    def csv(self, name: str, header, rows) -> str:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        return name

    def measure(self, name: str, m: EmpiricalMeasure) -> dict:
        """Write a measure as a pack plus a measure manifest; returns the manifest."""
        pack = self.pack(f"{name}.pack", m.basis, m.snapshots)
        obs = observable_functions(m.basis, self.cfg.p, self.cfg.s_minus)
        summary = {}
        for key, f in obs.items():
            v = m.values(f)
            mean = float(np.dot(m.weights, v))
            summary[key] = {"mean": mean, "var": float(np.dot(m.weights, (v - mean) ** 2))}
        doc = {"run_manifest": self.manifest_id, "pack": pack, "pack_sha256": sha256_file(self.out / pack),
               "n": len(m), "valid": m.valid, "provenance": m.provenance, "observables": summary,
               "uniform_weights": bool(np.all(m.weights == m.weights[0]))}
        if not doc["uniform_weights"]:
            doc["weights"] = m.weights.tolist()
        doc = json_ready(doc)
        doc["measure_id"] = _digest(doc)
        write_json(self.path(f"{name}.json"), doc)
        return doc

    def load_measure(self) -> EmpiricalMeasure | None:
        """Measure from ``[input] pack``, or None when no input is configured."""
        path = self.ec.get("input", "pack")
        if not path:
            return None
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"input pack {path} does not exist")
        self.inputs[str(p)] = sha256_file(p)
        header, basis, C = read_pack(p)
        return EmpiricalMeasure.uniform(basis, C, {"kind": "pack", "path": str(p), "header": header})


def _digest(obj) -> str:
    text = json.dumps(json_ready(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _growth(cfg):
    return GrowthPair(cfg.xi)


def _sample(ctx, cfg, section, count_default=2048):
    ec = ctx.ec
    burn = ec.get(section, "burn_in", None, float)
    stride = ec.get(section, "stride", None, float)
    return krylov_bogoliubov_sample(
        cfg, None, _growth(cfg), burn, stride, ec.get(section, "count", count_default, int),
        ec.get(section, "chains", None, int), threads=ctx.threads)


def _blowup_flag(report, measures):
    bad = [m.provenance.get("alpha") for m in measures if not m.valid]
    if bad:
        report["blowup"] = {"invalid_measures": bad}


# subcommands ---------------------------------------------------------------

def cmd_simulate(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    basis = build_basis(cfg.d, cfg.N, cfg.full_shell)
    init = ec.get("simulate", "init", "random", str)
    if init == "plane-wave":
        k = [int(v) for v in ec.get("simulate", "k", [1.0] * cfg.d, list)]
        amp = ec.get("simulate", "amplitude", 0.5, float)
        u0 = exact_plane_wave(basis, k, amp, cfg.p, 0.0)
    elif init == "random":
        u0 = random_field(basis, cfg.s, ec.get("simulate", "norm", 1.0, float), cfg.seed)
    else:
        raise ConfigError(f"[simulate] init must be random or plane-wave, got {init!r}")
    n = int(round(cfg.T / cfg.dt))
    stride = ec.get("simulate", "stride", max(1, n // 200), int)
    traj = integrate_deterministic(u0, None, cfg.dt, cfg.T, cfg.scheme, p=cfg.p, stride=stride,
                                   sigmas=(0.0, 1.0, cfg.s_minus, cfg.s), oversampling=cfg.oversampling)
    ctx.steps += n
    traj.to_csv(ctx.path("trajectory.csv"))
    ctx.pack("trajectory.pack", basis, traj.coeffs)
    level = ec.get("simulate", "level", 1.0, float)
    gt = growth_tracker(traj, cfg.s_minus, _growth(cfg), level)
    m0 = traj.mass[0]
    report = {
        "kind": "simulate", "init": init, "steps": n,
        "mass_drift": float(np.max(np.abs(traj.mass - m0)) / m0) if m0 > 0 else 0.0,
        "energy_drift": float(traj.info["energy_drift"] / max(abs(traj.energy[0]), 1e-300)),
        "tamed_substeps": traj.info["tamed"],
        "growth": {"level": level, "r": cfg.s_minus, "xi": cfg.xi, "ratio": gt["ratio"], "ok": gt["ok"],
                   "times": gt["times"], "norms": gt["norms"], "envelope": gt["envelope"]},
    }
    checks = {"mass_drift": report["mass_drift"] <= ec.get("simulate", "mass_tol", 1e-6, float)}
    if init == "plane-wave":
        exact = exact_plane_wave(basis, k, amp, cfg.p, cfg.T).coeffs
        err = float(np.linalg.norm(traj.coeffs[-1] - exact) / np.linalg.norm(exact))
        report["plane_wave_error"] = err
        checks["plane_wave"] = err <= ec.get("simulate", "error_tol", 1e-6, float)
    return report, checks


def cmd_sde(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    paths = ec.get("sde", "paths", 512, int)
    every = ec.get("sde", "series_every", 10, int)
    n = int(round(cfg.T / cfg.dt))
    if n % every:
        raise ConfigError("[sde] series_every must divide the number of steps")
    eng = FluctuationDissipation(cfg, growth=_growth(cfg))
    run = eng.run(np.zeros((paths, eng.basis.n_modes), complex), n, cfg.seed,
                  snapshot_steps=[n], series_every=every, track_energy=True, threads=ctx.threads)
    ctx.steps += n * paths
    if np.any(run.blown):
        raise BlowUpError(float(np.nanmin(run.blow_time)), -1, f"{int(run.blown.sum())} paths blew up")
    ctx.pack("final.pack", eng.basis, run.final)
    ctx.csv("series.csv", ["t", "mean_M", "mean_int_calM", "mean_E", "mean_int_calE"],
            zip(run.times, run.mass.mean(0), run.int_calM.mean(0), run.energy.mean(0), run.int_calE.mean(0)))
    mass = ito_mass_balance(run, cfg.T, seed=cfg.seed)
    en = ito_energy_balance(run, cfg.T, seed=cfg.seed)
    report = {"kind": "sde", "paths": paths, "t": cfg.T, "mass_balance": mass, "energy_balance": en,
              "tamed_substeps": eng.ham.tamed, "saturated_weights": eng.saturated}
    return report, {"mass_balance": mass["pass"], "energy_balance_exact": en["exact_pass"]}


def cmd_sample(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    m = _sample(ctx, cfg, "sample")
    ctx.steps += m.provenance["steps"] * len(np.unique(m.groups))
    rep = stationary_report(m, cfg, growth=_growth(cfg), R_list=ec.get("sample", "R", [1, 2, 4, 8], list),
                            seed=cfg.seed)
    doc = ctx.measure("measure", m)
    report = {"kind": "sample", "measure_id": doc["measure_id"], "stationary": rep, "valid": m.valid}
    _blowup_flag(report, [m])
    checks = {"stationary_identity": rep["relative_error"] <= 0.1, "tail": rep["tail"]["pass"]}
    return report, checks


def cmd_sweep(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    alphas = ec.get("sweep", "alphas", [0.5, 0.25, 0.1], list)
    if any(b >= a for a, b in zip(alphas, alphas[1:])):
        raise ConfigError("[sweep] alphas must be decreasing")
    rows, ids, measures = [], [], []
    for a in alphas:
        c = cfg.replace(alpha=a)
        m = _sample(ctx, c, "sweep")
        ctx.steps += m.provenance["steps"] * len(np.unique(m.groups))
        eng = FluctuationDissipation(c, growth=_growth(c), basis=m.basis)
        obs = observable_functions(m.basis, c.p, c.s_minus)
        row = {"alpha": a, "mean_calM": m.expectation(eng.calM), "target_calM": eng.spec.A(0) / 2}
        for key in ("M", "E", f"norm_{c.s_minus:g}"):
            row[f"mean_{key}"] = m.expectation(obs[key])
        rows.append(row)
        ids.append(ctx.measure(f"measure_alpha{a:g}", m)["measure_id"])
        measures.append(m)
    keys = list(rows[0])
    ctx.csv("trend.csv", keys, [[r[k] for k in keys] for r in rows])
    jumps = max((abs(math.log(r2[k] / r1[k])) for r1, r2 in zip(rows, rows[1:])
                 for k in keys if k.startswith("mean_") and r1[k] > 0 and r2[k] > 0), default=0.0)
    report = {"kind": "sweep", "alphas": alphas, "rows": rows, "measure_ids": ids,
              "max_log_ratio_adjacent": jumps}
    _blowup_flag(report, measures)
    checks = {"continuous": jumps < math.log(10),
              "pinned": all(abs(r["mean_calM"] / r["target_calM"] - 1) <= 0.1 for r in rows)}
    return report, checks


def cmd_invariance(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    alphas = ec.get("invariance", "alphas", [0.5, 0.25, 0.1], list)
    t = ec.get("invariance", "t", 1.0, float)
    rows, measures = [], []
    for a in alphas:
        c = cfg.replace(alpha=a)
        m = _sample(ctx, c, "invariance")
        ctx.steps += m.provenance["steps"] * len(np.unique(m.groups))
        res = invariance_test(m, t, c)
        ctx.steps += int(round(t / c.dt)) * len(m)
        doc = ctx.measure(f"measure_alpha{a:g}", m)
        rows.append({"alpha": a, "measure_id": doc["measure_id"], "max_ks": res["max_ks"],
                     "pass": res["pass"], "observables": res["observables"]})
        measures.append(m)
    ks = [r["max_ks"] for r in rows]
    ctx.csv("ks.csv", ["alpha", "max_ks"], [[r["alpha"], r["max_ks"]] for r in rows])
    decreasing = all(b < a for a, b in zip(ks, ks[1:]))
    report = {"kind": "invariance", "t": t, "alphas": alphas, "rows": rows, "max_ks": ks,
              "decreasing": decreasing}
    _blowup_flag(report, measures)
    return report, {"ks_decreasing": decreasing}


def cmd_sigma(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    growth = _growth(cfg)
    Lam = ec.get("sigma", "Lambda", None, float)
    levels = ec.get("sigma", "levels", [1, 2, 3, 4, 5], list)
    j_max = ec.get("sigma", "j_max", 3, int)
    r = ec.get("sigma", "r", cfg.s_minus, float)
    m = ctx.load_measure()
    if m is None:
        sampling = dict(burn_in=ec.get("sigma", "burn_in", None, float), stride=ec.get("sigma", "stride", None, float),
                        count=ec.get("sigma", "count", 2048, int), n_chains=ec.get("sigma", "chains", None, int),
                        threads=ctx.threads)
        if Lam is None:
            m = krylov_bogoliubov_sample(cfg, None, growth, **sampling)
        else:
            m, _ = scaled_measure_run(cfg, None, Lam, growth, **sampling)
        ctx.measure("measure", m)
    certs = sigma_levels(m.snapshots, levels, j_max, r, growth, cfg,
                         ec.get("sigma", "safety", None, float), m.basis)
    rejected = [int((~c.passed).sum()) for c in certs.values()]
    fit = rejection_slope(levels, rejected, len(m))
    env = [float(c.envelope_ratio[c.passed].max()) if c.passed.any() else 0.0 for c in certs.values()]
    ctx.csv("membership.csv", ["sample"] + [f"i{i:g}" for i in levels],
            [[n] + [int(c.passed[n]) for c in certs.values()] for n in range(len(m))])
    monotone = all(np.all(~a.passed | b.passed) for a, b in zip(list(certs.values()), list(certs.values())[1:]))
    report = {
        "kind": "sigma", "levels": levels, "j_max": j_max, "r": r, "xi": growth.name, "Lambda": Lam,
        "n": len(m), "rejected": rejected, "rejected_fraction": [k / len(m) for k in rejected],
        "fit": fit, "envelope_ratio_admitted": env, "monotone_in_i": monotone,
        "T": {f"{i:g}": c.T for i, c in certs.items()}, "checkpoints": {f"{i:g}": c.checkpoints for i, c in certs.items()},
        "blown": int(certs[float(levels[0])].blown.sum()),
    }
    ok = (not fit["degenerate"]) and fit["slope_upper"] <= -1.5
    return report, {"rejection_decay": ok, "envelope": all(e <= 2 for e in env), "monotone": monotone}


def cmd_coupling(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    alphas = ec.get("coupling", "alphas", [0.4, 0.2, 0.1, 0.05, 0.0], list)
    res = coupling_study(cfg, alphas, ec.get("coupling", "T", 1.0, float), ec.get("coupling", "R", 1.0, float),
                         ec.get("coupling", "r_cut", 4.0, float), ec.get("coupling", "paths", 256, int),
                         growth=_growth(cfg))
    ctx.steps += int(round(res["T"] / cfg.dt)) * res["n_paths"] * len(alphas)
    ctx.csv("coupling.csv", ["alpha", "mean_error_on_S", "prob_S", "mean_error"],
            [[r["alpha"], r["mean_error_on_S"], r["prob_S"], r["mean_error"]] for r in res["rows"]])
    report = {"kind": "coupling", **res}
    return report, {"decreasing": res["decreasing_in_alpha"]}


def _gauss_bump(center, width):
    def g(x):
        x = np.asarray(x, float)
        z = (x - center) / width
        out = np.zeros_like(x)
        inside = np.abs(z) < 1
        out[inside] = np.exp(-1 / (1 - z[inside] ** 2))
        return out
    return g


def cmd_density(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    m = ctx.load_measure()
    if m is None:
        m = _sample(ctx, cfg, "density")
        ctx.measure("measure", m)
    out = {"kind": "density"}
    checks = {}
    a = ec.get("density", "a", 0.0, float)
    spec = NoiseSpec.default(m.basis, cfg.s, cfg.noise_scale, cfg.noise_decay)
    for F in ("M", "E"):
        dist = distribution_of(m, F, cfg.p, ec.get("density", "bins", 40, int))
        study = refinement_study(dist, a)
        out[F] = {"edges": dist.edges, "masses": dist.masses, "bandwidth": dist.bandwidth,
                  "atoms": dist.atoms, "refinement": study}
        ctx.csv(f"histogram_{F}.csv", ["left", "right", "mass"], zip(dist.edges[:-1], dist.edges[1:], dist.masses))
    qm = quadratic_variation(m.snapshots, "M", spec)
    qe = quadratic_variation(m.snapshots, "E", spec, cfg.p)
    qe_printed = quadratic_variation(m.snapshots, "E", spec, cfg.p, "printed")
    nz = m.basis.norm(m.snapshots, 0.0) > 0
    out["quadratic_variation"] = {"Q_M_min_nonzero": float(qm[nz].min()) if nz.any() else 0.0,
                                  "Q_E_min_nonzero": float(qe[nz].min()) if nz.any() else 0.0,
                                  "Q_E_printed_min_nonzero": float(qe_printed[nz].min()) if nz.any() else 0.0}
    lams = ec.get("density", "lambdas", [0.1, 1.0, 10.0], list)
    bump = _gauss_bump(ec.get("density", "bump_center", 0.0, float), ec.get("density", "bump_width", 1.0, float))
    x = np.linspace(-3, 3, ec.get("density", "grid", 16001, int))
    resid = []
    for lam in lams:
        resid.append(resolvent_phi(bump, lam, x).residual())
    ctx.csv("resolvent.csv", ["lambda", "residual"], zip(lams, resid))
    out["resolvent"] = {"lambdas": lams, "residuals": resid}
    checks["resolvent"] = max(resid) <= 1e-6
    # generator surrogate: stationary paths started from the measure
    paths = min(len(m), ec.get("density", "paths", 512, int))
    window = ec.get("density", "window", 2.0, float)
    every = ec.get("density", "series_every", 50, int)
    n = int(round(window / cfg.dt))
    eng = FluctuationDissipation(cfg, spec, _growth(cfg), m.basis)
    run = eng.run(m.snapshots[:paths], n, cfg.seed, np.arange(paths) + (1 << 20),
                  series_every=every, threads=ctx.threads)
    ctx.steps += n * paths
    if np.any(run.blown):
        raise BlowUpError(float(np.nanmin(run.blow_time)), -1, "blow-up in the stationarity window")
    g_lam = ec.get("density", "generator_lambda", 1.0, float)
    M_series = run.mass
    scale = float(np.median(M_series)) if np.median(M_series) > 0 else 1.0
    phi = resolvent_phi(_gauss_bump(scale, scale), g_lam, np.linspace(-2 * scale, 4 * scale, 4001))
    gen = stationarity_generator_check(run.times, M_series, phi, mass=M_series, seed=cfg.seed)
    out["generator"] = gen
    checks["generator"] = gen["pass"]
    return out, checks


def cmd_smallball(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    m = ctx.load_measure()
    if m is None:
        m = _sample(ctx, cfg, "smallball")
        ctx.measure("measure", m)
    deltas = np.geomspace(ec.get("smallball", "delta_min", 0.01, float), ec.get("smallball", "delta_max", 1.0, float),
                          ec.get("smallball", "n", 25, int))
    res = small_ball_probe(m, deltas, ec.get("smallball", "slack", 1.0, float))
    ctx.csv("smallball.csv", ["delta", "probability"], zip(res["deltas"], res["probability"]))
    return {"kind": "smallball", **res}, {"linear_envelope": res["pass"]}


def cmd_scale(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    lams = ec.get("scale", "lambdas", [1.0, 2.0, 4.0], list)
    rows, measures = [], []
    for Lam in lams:
        m, rep = scaled_measure_run(cfg, None, Lam, _growth(cfg), burn_in=ec.get("scale", "burn_in", None, float),
                                    stride=ec.get("scale", "stride", None, float),
                                    count=ec.get("scale", "count", 2048, int),
                                    n_chains=ec.get("scale", "chains", None, int), threads=ctx.threads)
        ctx.steps += m.provenance["steps"] * len(np.unique(m.groups))
        rep["measure_id"] = ctx.measure(f"measure_lambda{Lam:g}", m)["measure_id"]
        rows.append(rep)
        measures.append(m)
    fit = scaling_fit(lams, [r["mean_calM"] for r in rows])
    ctx.csv("scaling.csv", ["Lambda", "mean_calM", "target_half_Lambda_N", "n_star"],
            [[r["Lambda"], r["mean_calM"], r["target_half_Lambda_N"], r["probe"]["n_star"]] for r in rows])
    report = {"kind": "scale", "rows": rows, "fit": fit}
    _blowup_flag(report, measures)
    stars = [r["probe"]["n_star"] for r in rows]
    large = all(n > 0 for n in stars) and all(b >= a for a, b in zip(stars, stars[1:]))
    return report, {"linear": fit["r_squared"] >= 0.99, "large_data": large}


def cmd_cumulative(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    max_n = ec.get("cumulative", "max_n", 3, int)
    measures = []
    for n in range(1, max_n + 1):
        m, _ = scaled_measure_run(cfg, None, float(n), _growth(cfg),
                                  burn_in=ec.get("cumulative", "burn_in", None, float),
                                  stride=ec.get("cumulative", "stride", None, float),
                                  count=ec.get("cumulative", "count", 512, int),
                                  n_chains=ec.get("cumulative", "chains", None, int), threads=ctx.threads)
        ctx.steps += m.provenance["steps"] * len(np.unique(m.groups))
        measures.append(m)
    mix = cumulative_measure(measures, max_n)
    doc = ctx.measure("cumulative", mix)
    report = {"kind": "cumulative", "max_n": max_n, "mixture_weights": mix.provenance["mixture_weights"],
              "measure_id": doc["measure_id"], "total_weight": float(mix.weights.sum())}
    _blowup_flag(report, measures)
    return report, {"normalized": abs(report["total_weight"] - 1) <= 1e-12}


def cmd_convergence(ctx):
    cfg, ec = ctx.cfg, ctx.ec
    N_list = [int(v) for v in ec.get("convergence", "N_list", [8, 16, 32, 64], list)]
    N_ref = ec.get("convergence", "N_ref", 128, int)
    r = ec.get("convergence", "r", 1.0, float)
    basis = build_basis(cfg.d, N_ref, full_shell=False)
    u0 = random_field(basis, cfg.s, ec.get("convergence", "norm", 1.0, float), cfg.seed,
                      ec.get("convergence", "excess", 0.51, float))
    T = ec.get("convergence", "T", local_existence_time(u0.norm(cfg.s), cfg.p), float)
    res = galerkin_convergence_study(u0, cfg.s, r, N_list, T, p=cfg.p, dt=ec.get("convergence", "dt", T / 64, float),
                                     samples=ec.get("convergence", "samples", 17, int))
    ctx.csv("convergence.csv", ["N", "lambda_N", "error"], [[x["N"], x["lambda_N"], x["error"]] for x in res["rows"]])
    return {"kind": "convergence", **res}, {"rate": res["relative_deviation"] <= 0.25}


def cmd_oracle(ctx):
    """Closed-form self-tests."""
    results = {}

    def record(name, value, ok):
        results[name] = {"value": value, "pass": bool(ok)}

    b1 = build_basis(1, 8)
    record("eigenvalues_d1", b1.eigenvalues[:7].tolist(), np.array_equal(b1.eigenvalues[:7], [0, 1, 1, 4, 4, 9, 9]))
    b3 = build_basis(3, 1)
    record("shell_d3", int(np.count_nonzero(b3.eigenvalues == 1)), np.count_nonzero(b3.eigenvalues == 1) == 6)
    vals = [critical_exponent(5, 3), critical_exponent(7, 3), critical_exponent(3, 3)]
    record("critical_exponent", vals, np.allclose(vals, [1, 7 / 6, 0.5], rtol=0, atol=1e-15))
    tl = [local_existence_time(1, 7), local_existence_time(2, 3)]
    record("local_time", tl, tl == [1 / 128, 1 / 512])
    c = 0.7
    u = b1.collocation(36)
    const = np.zeros(b1.n_modes, complex)
    const[0] = c * math.sqrt(2 * math.pi)
    from .spectral import SpectralField
    e = energy(SpectralField(b1, const), 7)
    exact = math.pi * c ** 2 + 2 * math.pi * c ** 8 / 8
    record("energy_constant", e, abs(e - exact) <= 1e-12 * exact)
    pw0 = exact_plane_wave(b1, [2], 0.5, 7, 0.0)
    tr = integrate_deterministic(pw0, None, 1e-4, 1.0, p=7)
    pw1 = exact_plane_wave(b1, [2], 0.5, 7, 1.0)
    err = float(np.linalg.norm(tr.coeffs[-1] - pw1.coeffs) / np.linalg.norm(pw1.coeffs))
    record("plane_wave", err, err <= 1e-6)
    pic = picard_local_solve(pw0, None, 1 / 128 / 0.5 ** 6 * 0.25, p=7, s=2, enforce_window=False)
    pwT = exact_plane_wave(b1, [2], 0.5, 7, pic.times[-1])
    perr = float(np.linalg.norm(pic.coeffs[-1] - pwT.coeffs) / np.linalg.norm(pwT.coeffs))
    record("picard_plane_wave", perr, perr <= 1e-8)
    spec0 = NoiseSpec.zero(b1)
    z0 = np.zeros(b1.n_modes, complex)
    z0[3] = 1.0
    z1 = ou_exact_step(SpectralField(b1, z0), 0.25, 0.5, 2.0, spec0, np.random.default_rng(0)).coeffs
    decay = math.exp(-0.5 * (1 + b1.eigenvalues[3]) * 0.25)
    record("ou_decay", abs(z1[3]), abs(abs(z1[3]) - decay) <= 1e-14)
    mom = ou_moments(NoiseSpec.default(b1, 2.0), 0.5, 2.0, 1e6)
    stat = NoiseSpec.default(b1, 2.0).amplitudes ** 2 * (1 + b1.eigenvalues) ** (1 - 2.0)
    record("ou_stationary", float(np.max(np.abs(mom - stat))), np.allclose(mom, stat, rtol=1e-12))
    x = np.linspace(-3, 3, 16001)
    res = resolvent_phi(_gauss_bump(0.0, 1.0), 1.0, x).residual()
    record("resolvent", res, res <= 1e-6)
    chi = [float(chi_R(0.5, 1.0)), float(chi_R(3.0, 1.0))]
    record("chi", chi, chi == [1.0, 0.0])
    record("chi_bounds", list(CHI_DERIVATIVE_BOUNDS), CHI_DERIVATIVE_BOUNDS[0] >= 1)
    mix = cumulative_measure([EmpiricalMeasure.dirac(b1), EmpiricalMeasure.dirac(b1)])
    record("cumulative_weights", mix.weights.tolist(), np.allclose(mix.weights, [2 / 3, 1 / 3], rtol=0, atol=1e-15))
    return {"kind": "oracle", "results": results}, {k: v["pass"] for k, v in results.items()}


SUBCOMMANDS = {
    "simulate": cmd_simulate, "sde": cmd_sde, "sample": cmd_sample, "sweep": cmd_sweep,
    "invariance": cmd_invariance, "sigma": cmd_sigma, "coupling": cmd_coupling,
    "density": cmd_density, "smallball": cmd_smallball, "scale": cmd_scale,
    "cumulative": cmd_cumulative, "convergence": cmd_convergence, "oracle": cmd_oracle,
}
ALWAYS_CHECK = {"oracle"}


def run(subcommand: str, ec: ExperimentConfig, out, threads: int = 1, check: bool = False) -> int:
    """Run one experiment and write its report and manifest; returns the exit status."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config_text = ec.to_text()
    identity = {"tool": "snlslab", "version": __version__, "subcommand": subcommand,
                "config": config_text, "seed": ec.sim.seed}
    inputs_hint = ec.get("input", "pack")
    if inputs_hint and Path(inputs_hint).exists():
        identity["inputs"] = {inputs_hint: sha256_file(inputs_hint)}
    manifest_id = _digest(identity)
    ctx = Context(out, ec, threads, manifest_id)
    t0 = time.perf_counter()
    status = EXIT_OK
    try:
        report, checks = SUBCOMMANDS[subcommand](ctx)
    except (BlowUpError, PicardDivergenceError) as exc:
        report, checks = {"kind": subcommand, "blowup": str(exc)}, {}
        status = EXIT_BLOWUP
    report["manifest_id"] = manifest_id
    report["checks"] = checks
    report["passed"] = all(checks.values())
    if "blowup" in report:
        status = EXIT_BLOWUP
    elif (check or subcommand in ALWAYS_CHECK) and not report["passed"]:
        status = EXIT_CHECK
    write_json(ctx.path("report.json"), report)
    manifest = dict(identity)
    manifest.update({
        "manifest_id": manifest_id, "threads": threads,
        "inputs": ctx.inputs,
        "outputs": {name: sha256_file(out / name) for name in ctx.outputs},
        "steps": ctx.steps, "wall_clock_seconds": time.perf_counter() - t0,
        "status": status,
    })
    write_json(out / "manifest.json", manifest)
    return status


def replay(manifest_path, out, threads: int = 1) -> int:
    """Re-run the experiment of a manifest and compare output digests."""
    man = read_json(manifest_path)
    for path, digest in man.get("inputs", {}).items():
        if not Path(path).exists():
            raise ConfigError(f"manifest refers to missing input {path}")
        if sha256_file(path) != digest:
            raise ConfigError(f"input {path} changed since the manifest was written")
    ec = parse_config(man["config"], {})
    run(man["subcommand"], ec, out, threads)
    new = read_json(Path(out) / "manifest.json")
    diff = sorted(k for k in man["outputs"] if new["outputs"].get(k) != man["outputs"][k])
    write_json(Path(out) / "replay.json", {"manifest_id": man["manifest_id"], "identical": not diff,
                                            "differing": diff})
    return EXIT_OK if not diff else EXIT_CHECK


def _svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def emit_plots(report_paths, out_dir) -> list:
    """SVG figures for reports; returns the written paths.

    Reports of unknown kind produce no figure.  A report that is not valid
    JSON or lacks the fields of its kind raises ``ValueError``.
    """
    report_paths = list(report_paths)
    if not report_paths:
        return []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "snlslab"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rp in report_paths:
        try:
            rep = read_json(rp)
            kind = rep["kind"]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"malformed report {rp}: {exc}") from None
        stem = Path(rp).parent.name or "report"
        try:
            figs = _figures(plt, kind, rep)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed {kind} report {rp}: {exc}") from None
        for name, fig in figs:
            path = out_dir / f"{stem}_{name}.svg"
            _svg(fig, path)
            plt.close(fig)
            written.append(path)
    return written


def _num(v):
    return np.array([float(x) for x in v])


def _figures(plt, kind, rep):
    figs = []
    if kind == "simulate":
        g = rep["growth"]
        fig, ax = plt.subplots()
        ax.plot(_num(g["times"]), _num(g["norms"]), label="norm")
        ax.plot(_num(g["times"]), _num(g["envelope"]), "--", label="envelope")
        ax.set_xlabel("t")
        ax.legend()
        figs.append(("growth", fig))
    elif kind == "sample":
        for key in ("tail", "tail_adaptive"):
            t = rep["stationary"][key]
            fig, ax = plt.subplots()
            R, T = _num(t["R"]), _num(t["tail"])
            ax.plot(R, T, "o-")
            ax.set_xscale("log")
            if np.any(T > 0):
                ax.set_yscale("log")
            ax.set_xlabel("R")
            ax.set_title(f"slope {t['slope']}")
            figs.append((key, fig))
    elif kind == "convergence":
        lam = _num([r["lambda_N"] for r in rep["rows"]])
        err = _num([r["error"] for r in rep["rows"]])
        fig, ax = plt.subplots()
        ax.loglog(1 + lam, err, "o-", label=f"fit {rep['slope']:.3f}")
        ref = err[0] * ((1 + lam) / (1 + lam[0])) ** rep["expected_slope"]
        ax.loglog(1 + lam, ref, "--", label=f"rate {rep['expected_slope']:.3f}")
        ax.set_xlabel("1 + lambda_N")
        ax.legend()
        figs.append(("convergence", fig))
    elif kind == "density":
        for F in ("M", "E"):
            d = rep[F]
            edges, masses = _num(d["edges"]), _num(d["masses"])
            fig, ax = plt.subplots()
            ax.stairs(masses / np.diff(edges), edges)
            bound = max(float(v) for v in d["refinement"]["histogram"].values())
            ax.axhline(bound, ls="--", color="k")
            ax.set_xlabel(F)
            figs.append((f"hist_{F}", fig))
    elif kind == "smallball":
        fig, ax = plt.subplots()
        ax.plot(_num(rep["deltas"]), _num(rep["probability"]), "o-")
        ax.set_xscale("log")
        if "envelope" in rep:
            ax.plot(_num(rep["deltas"]), _num(rep["envelope"]), "--")
        ax.set_xlabel("delta")
        figs.append(("smallball", fig))
    elif kind == "sigma":
        fig, ax = plt.subplots()
        ax.plot(_num(rep["levels"]), _num(rep["rejected_fraction"]), "o-")
        ax.set_xlabel("i")
        figs.append(("rejection", fig))
    elif kind == "scale":
        fig, ax = plt.subplots()
        ax.plot(_num([r["Lambda"] for r in rep["rows"]]), _num([r["mean_calM"] for r in rep["rows"]]), "o-")
        ax.set_xlabel("Lambda")
        figs.append(("scaling", fig))
    elif kind == "invariance":
        fig, ax = plt.subplots()
        ax.plot(_num(rep["alphas"]), _num(rep["max_ks"]), "o-")
        ax.set_xlabel("alpha")
        figs.append(("ks", fig))
    return figs


def _parser():
    ap = argparse.ArgumentParser(prog="snlslab", description="Truncated NLS simulation laboratory.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="configuration file")
        p.add_argument("--out", default=None, help="output directory (default: runs/<subcommand>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--check", action="store_true", help="exit 4 when a check fails")
    p = sub.add_parser("replay")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p = sub.add_parser("plots")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out, args.threads)
        if args.command == "plots":
            for path in emit_plots(args.reports, args.out):
                print(path)
            return EXIT_OK
        ec = load_config(args.config) if args.config else parse_config("", dict(_environ()))
        if args.seed is not None:
            ec = ExperimentConfig(ec.sim.replace(seed=args.seed), ec.sections)
        out = args.out or f"runs/{args.command}"
        status = run(args.command, ec, out, args.threads, args.check)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"status": status, "out": str(out)}))
    return status


def _environ():
    import os

    return os.environ


if __name__ == "__main__":
    sys.exit(main())
