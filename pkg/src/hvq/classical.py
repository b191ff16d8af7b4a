"""Classical baselines: Hamilton trajectories and ensemble transport by characteristics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ClassicalSystem, expectation_position, step_count, variance_position
from .fields import ComplexField, Grid, gradient, interpolate, nearest_node, node_masses, sample_positions

FD_STEP = 1e-5


@dataclass(frozen=True)
class ClassicalState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape:
            raise ValueError("q and p must have the same shape")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("state must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)


@dataclass
class ClassicalTrajectory:
    times: np.ndarray
    q: np.ndarray  # (nt, m, N)
    p: np.ndarray
    energy: np.ndarray  # (nt, m)

    def energy_drift(self) -> float:
        e0 = self.energy[0]
        scale = np.maximum(np.abs(e0), 1e-300)
        return float(np.max(np.abs(self.energy - e0) / scale))


def _dH_dq(sys: ClassicalSystem, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    m, n = q.shape
    h = FD_STEP * np.maximum(1.0, np.abs(q))
    # all 2N shifted copies in one coefficient evaluation
    qs = np.tile(q, (2 * n, 1))
    for i in range(n):
        qs[2 * i * m : (2 * i + 1) * m, i] += h[:, i]
        qs[(2 * i + 1) * m : (2 * i + 2) * m, i] -= h[:, i]
    H = sys.hamiltonian(qs, np.tile(p, (2 * n, 1))).reshape(2 * n, m)
    return ((H[0::2] - H[1::2]) / (2 * h.T)).T


def _rhs(sys: ClassicalSystem, q: np.ndarray, p: np.ndarray):
    return sys.velocity(q, p), -_dH_dq(sys, q, p)


def rk4_step(sys: ClassicalSystem, q: np.ndarray, p: np.ndarray, dt: float):
    k1q, k1p = _rhs(sys, q, p)
    k2q, k2p = _rhs(sys, q + 0.5 * dt * k1q, p + 0.5 * dt * k1p)
    k3q, k3p = _rhs(sys, q + 0.5 * dt * k2q, p + 0.5 * dt * k2p)
    k4q, k4p = _rhs(sys, q + dt * k3q, p + dt * k3p)
    q = q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
    p = p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise FloatingPointError("classical integration produced non-finite values")
    return q, p


def integrate_hamilton(
    state0: ClassicalState | tuple[np.ndarray, np.ndarray],
    sys: ClassicalSystem,
    t_final: float,
    dt: float,
    record_every: int = 1,
) -> ClassicalTrajectory:
    """RK4 on q̇ = ∂H/∂p, ṗ = −∂H/∂q (∂H/∂q by central differences).

    ``state0`` is one state or a pair of (m, N) arrays for m independent
    systems integrated together.
    """
    if isinstance(state0, ClassicalState):
        q, p = state0.q[None, :], state0.p[None, :]
    else:
        q, p = (np.atleast_2d(np.asarray(x, dtype=float)) for x in state0)
    if q.shape[1] != sys.dim:
        raise ValueError(f"state has {q.shape[1]} coordinates, system has {sys.dim}")
    nsteps = step_count(t_final, dt)
    times, qs, ps, es = [0.0], [q], [p], [sys.hamiltonian(q, p)]
    for k in range(1, nsteps + 1):
        q, p = rk4_step(sys, q, p, dt)
        if k % record_every == 0 or k == nsteps:
            times.append(k * dt)
            qs.append(q)
            ps.append(p)
            es.append(sys.hamiltonian(q, p))
    return ClassicalTrajectory(np.array(times), np.array(qs), np.array(ps), np.array(es))


def histogram_density(points: np.ndarray, grid: Grid) -> np.ndarray:
    """Nearest-node histogram scaled to a density (integrates to one)."""
    flat = np.ravel_multi_index(nearest_node(points, grid), grid.shape)
    counts = np.bincount(flat, minlength=grid.size).reshape(grid.shape)
    return counts / (points.shape[0] * grid.weights())


@dataclass
class ClassicalEnsembleRun:
    grid: Grid
    times: list[float]
    positions: list[np.ndarray]
    momenta: list[np.ndarray]
    densities: list[np.ndarray]
    post_caustic: list[bool] = field(default_factory=list)

    @property
    def caustic_time(self) -> float | None:
        for t, flag in zip(self.times, self.post_caustic):
            if flag:
                return t
        return None


def _jacobian_folded(probe_q: np.ndarray, grid: Grid, support: np.ndarray) -> bool:
    """True if neighbouring characteristics have crossed (Jacobian sign flip)."""
    x = probe_q.reshape(grid.shape + (grid.ndim,))
    if grid.ndim == 1:
        d = np.diff(x[:, 0])
        both = support[1:] & support[:-1]
        return bool(np.any(d[both] <= 0))
    cols = []
    sl = tuple(slice(0, -1) for _ in range(grid.ndim))
    for j in range(grid.ndim):
        hi = list(sl)
        hi[j] = slice(1, None)
        cols.append(x[tuple(hi)] - x[sl])
    J = np.stack(cols, axis=-1)
    det = np.linalg.det(J)
    ok = support[sl].copy()
    for j in range(grid.ndim):
        hi = list(sl)
        hi[j] = slice(1, None)
        ok &= support[tuple(hi)]
    return bool(np.any(det[ok] <= 0))


def evolve_classical_ensemble(
    rho0: np.ndarray,
    S0: np.ndarray,
    sys: ClassicalSystem,
    grid: Grid,
    t_final: float,
    dt: float,
    n_particles: int,
    seed: int,
    snapshot_every: int = 1,
    stratified: bool = True,
) -> ClassicalEnsembleRun:
    """Method of characteristics for the classical HJ/continuity pair.

    Particles start from ρ₀ (stratified draws by default) with p₀ = ∇S₀ and
    follow Hamilton's equations. Probe characteristics launched from every
    node in the support of ρ₀ detect caustics; snapshots after the first
    crossing are flagged as post-caustic.
    """
    nsteps = step_count(t_final, dt)
    dS = np.stack([gradient(S0, grid, i) for i in range(grid.ndim)], axis=-1)
    q = sample_positions(rho0, grid, n_particles, seed, stratified=stratified)
    p = interpolate(dS, grid, q)
    support = np.asarray(rho0) > 1e-8 * np.max(rho0)
    probe_q = np.stack([m.ravel() for m in grid.mesh()], axis=1)
    probe_p = dS.reshape(-1, grid.ndim)
    keep = support.ravel()
    run = ClassicalEnsembleRun(grid, [0.0], [q], [p], [histogram_density(q, grid)], [False])
    caustic = False
    for k in range(1, nsteps + 1):
        q, p = rk4_step(sys, q, p, dt)
        pq, pp = rk4_step(sys, probe_q[keep], probe_p[keep], dt)
        probe_q[keep], probe_p[keep] = pq, pp
        if not caustic:
            caustic = _jacobian_folded(probe_q, grid, support)
        if k % snapshot_every == 0 or k == nsteps:
            run.times.append(k * dt)
            run.positions.append(q)
            run.momenta.append(p)
            run.densities.append(histogram_density(q, grid))
            run.post_caustic.append(caustic)
    return run


def classical_limit_compare(
    quantum_run: list[tuple[float, ComplexField]], classical_run: ClassicalEnsembleRun
) -> list[dict]:
    """Per-snapshot L1 density distance and mean/variance gaps (per axis, max taken)."""
    if len(quantum_run) != len(classical_run.times):
        raise ValueError("quantum and classical runs have different snapshot counts")
    out = []
    for (tq, psi), tc, pos, dens in zip(
        quantum_run, classical_run.times, classical_run.positions, classical_run.densities
    ):
        if abs(tq - tc) > 1e-9 * max(1.0, abs(tq)):
            raise ValueError(f"snapshot times differ: {tq} vs {tc}")
        grid = psi.grid
        l1 = float(np.abs(node_masses(psi.density, grid) - node_masses(dens, grid)).sum())
        mean_gap = max(abs(expectation_position(psi, i) - float(pos[:, i].mean())) for i in range(grid.ndim))
        var_gap = max(abs(variance_position(psi, i) - float(pos[:, i].var())) for i in range(grid.ndim))
        out.append({"time": tq, "l1": l1, "mean_gap": mean_gap, "variance_gap": var_gap})
    return out
