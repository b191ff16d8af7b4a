"""Experiment runners behind ``hvq run``.

Each runner returns ``(metrics, files)``: a flat dict of numbers and a
mapping from relative output path to bytes. Nothing here touches the disk;
the CLI is the single writer.
"""
from __future__ import annotations

import json
import math

import numpy as np

from .classical import classical_limit_compare, evolve_classical_ensemble
from .config import RunConfig, VerifyConfig
from .dynamics import (
    ClassicalSystem,
    CrankNicolson,
    build_hamiltonian,
    expectation_position,
    propagate,
    step_count,
    variance_position,
)
from .ensemble import DoubleSlit, distinct_magnitudes, double_slit, marginal_density, propagate_ensemble
from .exprlang import evaluate_on_grid, parse_expression
from .fields import Axis, ComplexField, Grid, field_csv, fmt, integrate, normalize, scalar_csv, snapshot_bytes
from .hidden import LambdaDistribution, from_config
from .measurement import MeasurementSetup, inferred_moments, pointer_distribution, position_measurement_check
from .trajectories import run_trajectories
from .verify import (
    continuity_residual,
    convergence,
    hjm_residual,
    identity_check,
    sign_symmetry_check,
)


def clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [clean(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def dumps(obj) -> bytes:
    return (json.dumps(clean(obj), sort_keys=True, indent=2) + "\n").encode()


def rows_csv(header: list[str], rows) -> bytes:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) for v in r))
    return ("\n".join(lines) + "\n").encode()


def polar_fields(cfg: RunConfig, grid: Grid, time: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """(R, S) from the initial block, S in action units."""
    R = evaluate_on_grid(parse_expression(cfg.initial.amplitude, cfg.coords), grid, time)
    S = evaluate_on_grid(parse_expression(cfg.initial.phase, cfg.coords), grid, time)
    return R, S


def initial_field(cfg: RunConfig, grid: Grid, lam: float, time: float = 0.0, norm: bool = True) -> ComplexField:
    R, S = polar_fields(cfg, grid, time)
    psi = ComplexField(grid, R * np.exp(1j * S / abs(lam)))
    return normalize(psi) if norm else psi


def _observables(snaps) -> tuple[bytes, float]:
    ndim = snaps[0][1].grid.ndim
    n0 = snaps[0][1].norm2()
    header = ["time", "norm"] + [f"mean_q{i + 1}" for i in range(ndim)] + [f"var_q{i + 1}" for i in range(ndim)]
    rows, drift = [], 0.0
    for t, psi in snaps:
        n = psi.norm2()
        drift = max(drift, abs(n - n0))
        rows.append([t, n] + [expectation_position(psi, i) for i in range(ndim)] + [variance_position(psi, i) for i in range(ndim)])
    return rows_csv(header, rows), drift


def _snapshot_files(snaps, lam: float, prefix: str = "snapshots/psi") -> dict[str, bytes]:
    return {f"{prefix}_{k:05d}.bin": snapshot_bytes(psi, lam, t) for k, (t, psi) in enumerate(snaps)}


def run_propagate(cfg: RunConfig, grid: Grid, sys: ClassicalSystem, dist: LambdaDistribution):
    num = cfg.numerics
    psi0 = initial_field(cfg, grid, num.lambda_)
    snaps = propagate(psi0, sys, num.lambda_, num.t_final, num.dt, num.snapshot_every)
    obs, drift = _observables(snaps)
    t, psi = snaps[-1]
    files = {"observables.csv": obs, "density.csv": scalar_csv(psi.density, grid, "density", cfg.coords).encode()}
    if "csv" in cfg.output.formats:
        files["field_final.csv"] = field_csv(psi, cfg.coords).encode()
    if "bin" in cfg.output.formats:
        files.update(_snapshot_files(snaps, num.lambda_))
    metrics = {"norm_drift": drift, "final_time": t, "steps": step_count(num.t_final, num.dt)}
    for i in range(grid.ndim):
        metrics[f"mean_q{i + 1}"] = expectation_position(psi, i)
        metrics[f"variance_q{i + 1}"] = variance_position(psi, i)
    return metrics, files


def run_trajectories_kind(cfg: RunConfig, grid: Grid, sys: ClassicalSystem, dist: LambdaDistribution):
    num = cfg.numerics
    psi0 = initial_field(cfg, grid, num.lambda_)
    run = run_trajectories(
        psi0, sys, num.lambda_, num.t_final, num.dt, num.n_particles, num.seed, num.snapshot_every, num.bin_factor
    )
    obs, drift = _observables(run.snapshots)
    gaps = []
    for (t, psi), pos in zip(run.snapshots, run.ensemble.history):
        gaps.append(max(abs(expectation_position(psi, i) - float(pos[:, i].mean())) for i in range(grid.ndim)))
    files = {
        "observables.csv": obs,
        "trajectories.csv": run.ensemble.to_csv().encode(),
        "born.csv": rows_csv(["time", "born_distance", "mean_gap"], [[t, b, g] for (t, b), g in zip(run.born, gaps)]),
    }
    if "bin" in cfg.output.formats:
        files.update(_snapshot_files(run.snapshots, num.lambda_))
    metrics = {
        "norm_drift": drift,
        "born_distance_max": max(b for _, b in run.born),
        "mean_gap_max": max(gaps),
        "n_particles": num.n_particles,
    }
    return metrics, files


def run_ensemble(cfg: RunConfig, grid: Grid, sys: ClassicalSystem, dist: LambdaDistribution):
    num = cfg.numerics
    # one shared initial field for every branch, built at |λ| = ħ
    psi0 = initial_field(cfg, grid, dist.hbar)
    series = propagate_ensemble(psi0, sys, dist, num.n_lambda_nodes, num.t_final, num.dt, num.snapshot_every)
    n0 = psi0.norm2()
    rows, drift, mass_err = [], 0.0, 0.0
    for ens in series:
        rho = marginal_density(ens)
        mass = integrate(rho, grid)
        mass_err = max(mass_err, abs(mass - 1.0))
        for _, _, psi in ens.branches:
            drift = max(drift, abs(psi.norm2() - n0))
        q = grid.mesh()
        means = [integrate(q[i] * rho, grid) / mass for i in range(grid.ndim)]
        vars_ = [integrate((q[i] - means[i]) ** 2 * rho, grid) / mass for i in range(grid.ndim)]
        rows.append([ens.time, mass] + means + vars_)
    header = ["time", "mass"] + [f"mean_q{i + 1}" for i in range(grid.ndim)] + [f"var_q{i + 1}" for i in range(grid.ndim)]
    final = series[-1]
    files = {
        "marginal.csv": scalar_csv(marginal_density(final), grid, "density", cfg.coords).encode(),
        "marginal_moments.csv": rows_csv(header, rows),
        "distribution.json": dumps(dist.to_json()),
    }
    metrics = {
        "norm_drift": drift,
        "marginal_mass_error": mass_err,
        "distinct_branches": distinct_magnitudes(final),
    }
    for i in range(grid.ndim):
        metrics[f"marginal_variance_q{i + 1}"] = rows[-1][2 + grid.ndim + i]
    return metrics, files


def run_double_slit(cfg: RunConfig, grid: Grid, sys: ClassicalSystem, dist: LambdaDistribution):
    num = cfg.numerics
    ds = DoubleSlit(**(cfg.double_slit.model_dump() if cfg.double_slit else {}))
    res = double_slit(ds, sys, grid, dist, num.t_final, num.dt, num.n_lambda_nodes)
    base = double_slit(ds, sys, grid, LambdaDistribution.binary(dist.hbar), num.t_final, num.dt, num.n_lambda_nodes)
    q = grid.coords(0)
    summary = {
        "visibility": res.visibility,
        "binary_visibility": base.visibility,
        "suppression_ratio": res.visibility / base.visibility if base.visibility > 0 else float("nan"),
        "norm_factor": res.superposition.norm_factor,
        "initial_overlap": res.overlap0,
        "time": res.time,
        "distribution": dist.to_json(),
    }
    files = {
        "profile.csv": rows_csv(["q1", "intensity"], zip(q, res.intensity)),
        "profile_binary.csv": rows_csv(["q1", "intensity"], zip(q, base.intensity)),
        "summary.json": dumps(summary),
    }
    metrics = {k: summary[k] for k in ("visibility", "binary_visibility", "suppression_ratio", "norm_factor")}
    metrics["intensity_mass_error"] = abs(integrate(res.intensity, grid) - 1.0)
    metrics["norm_drift"] = max(res.norm_drift, base.norm_drift)
    return metrics, files


def run_measure_angular(cfg: RunConfig, grid: Grid, sys: ClassicalSystem, dist: LambdaDistribution):
    m = cfg.measurement
    num = cfg.numerics
    pointer0 = initial_field(cfg, grid, dist.hbar)
    comps = tuple((c.l, complex(c.re, c.im)) for c in m.components)
    setup = MeasurementSetup(m.g, m.T, comps, pointer0, dist)
    stats = pointer_distribution(setup, num.n_lambda_nodes, m.min_separation)
    summary = stats.summary()
    summary["distribution"] = dist.to_json()
    files = {
        "pointer_density.csv": scalar_csv(stats.pointer_density, grid, "density", cfg.coords).encode(),
        "moments.json": dumps(summary),
    }
    if m.sigma_sweep:
        rows = []
        for s in m.sigma_sweep:
            sw = MeasurementSetup(m.g, m.T, comps, pointer0, LambdaDistribution.lognormal(s, dist.hbar))
            mean, var, lam_var = inferred_moments(sw, num.n_lambda_nodes)
            rows.append([s, mean, var, lam_var, math.sqrt(var)])
        files["broadening.csv"] = rows_csv(["sigma", "inferred_mean", "inferred_variance", "lambda_variance", "width"], rows)
    metrics = {
        "inferred_mean": stats.inferred_mean,
        "inferred_variance": stats.inferred_variance,
        "lambda_variance": stats.lambda_variance,
        "n_peaks": len(stats.peaks),
        "ambiguous_peaks": int(stats.ambiguous),
        "pointer_mass_error": abs(integrate(stats.pointer_density, grid) - 1.0),
    }
    return metrics, files


def run_measure_position(cfg: RunConfig, grid: Grid, sys: ClassicalSystem, dist: LambdaDistribution):
    pos = cfg.position
    num = cfg.numerics
    R, S = polar_fields(cfg, grid)
    rho0 = R ** 2 / integrate(R ** 2, grid)
    rep = position_measurement_check(rho0, S, pos.g, pos.T, grid, num.dt, abs(num.lambda_))
    files = {
        "quantum_density.csv": scalar_csv(rep.quantum_density, grid, "density", cfg.coords).encode(),
        "classical_density.csv": scalar_csv(rep.classical_density, grid, "density", cfg.coords).encode(),
        "summary.json": dumps(rep.summary()),
    }
    metrics = dict(rep.summary())
    metrics["cfl_violation"] = int(rep.cfl_violation)
    return metrics, files


def run_classical(cfg: RunConfig, grid: Grid, sys: ClassicalSystem, dist: LambdaDistribution):
    num = cfg.numerics
    R, S = polar_fields(cfg, grid)
    rho0 = R ** 2 / integrate(R ** 2, grid)
    crun = evolve_classical_ensemble(
        rho0, S, sys, grid, num.t_final, num.dt, num.n_particles, num.seed, num.snapshot_every
    )
    qrun = propagate(initial_field(cfg, grid, num.lambda_), sys, num.lambda_, num.t_final, num.dt, num.snapshot_every)
    cmp = classical_limit_compare(qrun, crun)
    _, drift = _observables(qrun)
    names = cfg.coords
    lines = [",".join(["time", "particle"] + names)]
    for t, p in zip(crun.times, crun.positions):
        for k, row in enumerate(p):
            lines.append(",".join([fmt(t), str(k)] + [fmt(x) for x in row]))
    files = {
        "classical_trajectories.csv": ("\n".join(lines) + "\n").encode(),
        "classical_density.csv": scalar_csv(crun.densities[-1], grid, "density", names).encode(),
        "limit.csv": rows_csv(
            ["time", "l1", "mean_gap", "variance_gap", "post_caustic"],
            [[c["time"], c["l1"], c["mean_gap"], c["variance_gap"], str(int(f))] for c, f in zip(cmp, crun.post_caustic)],
        ),
    }
    pre = [c for c, f in zip(cmp, crun.post_caustic) if not f]
    metrics = {
        "norm_drift": drift,
        "mean_gap_max": max(c["mean_gap"] for c in cmp),
        "variance_gap_max": max(c["variance_gap"] for c in cmp),
        "l1_max_pre_caustic": max((c["l1"] for c in pre), default=float("nan")),
        "caustic_time": crun.caustic_time if crun.caustic_time is not None else float("nan"),
    }
    return metrics, files


def refine(grid: Grid, level: int) -> Grid:
    """Grid with spacing halved ``level`` times; box nodes stay coincident."""
    f = 2 ** level
    axes = []
    for a in grid.axes:
        pts = a.points * f if a.periodic else (a.points - 1) * f + 1
        axes.append(Axis(a.min, a.max, pts, a.boundary))
    return Grid(tuple(axes))


def _last_pair(psi0: ComplexField, sys: ClassicalSystem, lam: float, t_final: float, dt: float):
    """States at t_final − dt and t_final, plus the largest norm drift on the way."""
    H = build_hamiltonian(sys, psi0.grid, abs(lam))
    cn = CrankNicolson(H, dt)
    v = H.restrict(psi0.values)
    n0 = float(np.vdot(v, v).real)
    prev, drift = v, 0.0
    for _ in range(step_count(t_final, dt)):
        prev, v = v, cn.step_vec(v)
        drift = max(drift, abs(float(np.vdot(v, v).real) - n0))
    # drift in the trapezoid norm of the field (interior weights are uniform)
    scale = psi0.norm2() / n0 if n0 > 0 else 0.0
    return ComplexField(H.grid, H.extend(prev)), ComplexField(H.grid, H.extend(v)), drift * scale


def run_verify(cfg: RunConfig, grid: Grid, sys: ClassicalSystem, dist: LambdaDistribution):
    vc = cfg.verify or VerifyConfig()
    num = cfg.numerics
    lam = num.lambda_
    levels = range(vc.refinements + 1)
    reports: dict[str, list] = {c: [] for c in vc.checks if c != "sign_symmetry"}
    drift = 0.0
    for k in levels:
        g = refine(grid, k)
        dt = num.dt / 2 ** k
        if "hjm" in reports or "continuity" in reports:
            if vc.source == "closed_form":
                a = initial_field(cfg, g, lam, vc.time, norm=False)
                b = initial_field(cfg, g, lam, vc.time + dt, norm=False)
            else:
                a, b, d = _last_pair(initial_field(cfg, g, lam), sys, lam, num.t_final, dt)
                drift = max(drift, d)
            if "hjm" in reports:
                reports["hjm"].append(hjm_residual(a, b, dt, sys, lam, vc.mask_fraction))
            if "continuity" in reports:
                reports["continuity"].append(continuity_residual(a, b, dt, sys, lam, vc.mask_fraction))
        if "identity" in reports:
            omega = evaluate_on_grid(parse_expression(vc.omega, cfg.coords), g, vc.time)
            reports["identity"].append(identity_check(omega, g))
    metrics: dict = {}
    out: dict = {}
    for name, reps in reports.items():
        # identity_check returns one report per index pair
        series = {"": reps} if name != "identity" else {f"_{i}{j}": [r[(i, j)] for r in reps] for (i, j) in reps[0]}
        for suffix, rs in series.items():
            key = name + suffix
            entries, ratios, regress, where = [], [], 0, []
            for k, r in enumerate(rs):
                ratio = None
                if k > 0:
                    c = convergence(rs[k - 1], r)
                    ratio = c.ratio
                    ratios.append(c.ratio)
                    regress += len(c.regressions)
                    where += [{"level": k - 1, "index": list(ix)} for ix in c.regressions[:20]]
                entries.append(r.to_json(ratio))
            out[key] = {"levels": entries, "regressions": where}
            metrics[f"{key}_max_residual"] = rs[-1].max_residual
            metrics[f"{key}_weighted_max_residual"] = rs[-1].weighted_max
            metrics[f"{key}_convergence_ratio_min"] = min(ratios) if ratios else float("nan")
            metrics[f"{key}_regressions"] = regress
    if "sign_symmetry" in vc.checks:
        psi0 = initial_field(cfg, grid, lam)
        plus = propagate(psi0, sys, abs(lam), num.t_final, num.dt, num.snapshot_every)
        minus = propagate(psi0, sys, -abs(lam), num.t_final, num.dt, num.snapshot_every)
        metrics["sign_symmetry"] = int(sign_symmetry_check(plus, minus))
        out["sign_symmetry"] = bool(metrics["sign_symmetry"])
    if vc.source == "propagated" and ("hjm" in reports or "continuity" in reports):
        metrics["norm_drift"] = drift
    return metrics, {"residuals.json": dumps(out)}


RUNNERS = {
    "propagate": run_propagate,
    "trajectories": run_trajectories_kind,
    "ensemble": run_ensemble,
    "double_slit": run_double_slit,
    "measure_angular": run_measure_angular,
    "measure_position": run_measure_position,
    "classical": run_classical,
    "verify": run_verify,
}


def run_experiment(cfg: RunConfig):
    grid = cfg.build_grid()
    sys = cfg.build_system()
    dist = from_config(cfg.distribution.model_dump(exclude_none=True))
    return RUNNERS[cfg.experiment](cfg, grid, sys, dist)
