"""Guidance-field trajectories and Born-rule (equivariance) diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ClassicalSystem, CrankNicolson, build_hamiltonian, step_count
from .fields import ComplexField, Grid, interpolate, nearest_node, node_masses, phase_gradient, sample_positions
from .fields import NODE_FLOOR, fmt


@dataclass
class TrajectoryEnsemble:
    grid: Grid
    positions: np.ndarray  # (n_particles, N)
    times: list[float] = field(default_factory=list)
    history: list[np.ndarray] = field(default_factory=list)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def mean(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def to_csv(self) -> str:
        """Rows of time, particle id, coordinates for every recorded time."""
        names = [f"q{i + 1}" for i in range(self.grid.ndim)]
        lines = [",".join(["time", "particle"] + names)]
        for t, pos in zip(self.times, self.history):
            for k, row in enumerate(pos):
                lines.append(",".join([fmt(t), str(k)] + [fmt(x) for x in row]))
        return "\n".join(lines) + "\n"


def effective_velocity(
    psi: ComplexField,
    sys: ClassicalSystem,
    lambda_abs: float,
    floor: float = NODE_FLOOR,
    coefficients: tuple | None = None,
) -> np.ndarray:
    """v^i = g^ij (∂_j S − A_j); returns shape ``grid.shape + (N,)``.

    ``coefficients`` may carry a precomputed ``sys.on_grid(grid)``.
    """
    grid = psi.grid
    g, A, _ = coefficients or sys.on_grid(grid)
    dS = [phase_gradient(psi, j, lambda_abs, floor) - A[j] for j in range(grid.ndim)]
    v = np.zeros(grid.shape + (grid.ndim,))
    for i in range(grid.ndim):
        for j in range(grid.ndim):
            v[..., i] += g[i, j] * dS[j]
    return v


def sample_initial(psi: ComplexField, n: int, seed: int) -> TrajectoryEnsemble:
    """Positions drawn i.i.d. from |ψ|² (node cells of width Δx)."""
    pos = sample_positions(psi.density, psi.grid, n, seed)
    return TrajectoryEnsemble(psi.grid, pos, [], [])


def _confine(x: np.ndarray, grid: Grid) -> np.ndarray:
    for ax, a in enumerate(grid.axes):
        col = x[:, ax]
        if a.periodic:
            x[:, ax] = np.mod(col - a.min, a.length) + a.min
        else:
            # reflect at the walls (folding handles excursions longer than the box)
            y = np.mod(col - a.min, 2 * a.length)
            x[:, ax] = a.min + np.where(y > a.length, 2 * a.length - y, y)
    return x


def _rk4_interval(x: np.ndarray, grid: Grid, f0, f1, substeps: int = 1) -> np.ndarray:
    (t0, v0), (t1, v1) = f0, f1

    def vel(t, pos):
        s = (t - t0) / (t1 - t0)
        return (1 - s) * interpolate(v0, grid, pos) + s * interpolate(v1, grid, pos)

    h = (t1 - t0) / substeps
    for s in range(substeps):
        t = t0 + s * h
        k1 = vel(t, x)
        k2 = vel(t + h / 2, _confine(x + 0.5 * h * k1, grid))
        k3 = vel(t + h / 2, _confine(x + 0.5 * h * k2, grid))
        k4 = vel(t + h, _confine(x + h * k3, grid))
        x = _confine(x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), grid)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"particle position became non-finite at t={t1}")
    return x


def advect(
    ensemble: TrajectoryEnsemble,
    frames: list[tuple[float, np.ndarray]],
    record_every: int = 1,
    substeps: int = 1,
) -> TrajectoryEnsemble:
    """RK4 through time-ordered velocity frames (linear in time between frames).

    Positions are appended to the history every ``record_every`` frame
    intervals and at the final frame.
    """
    if len(frames) < 2:
        raise ValueError("need at least two velocity frames")
    grid = ensemble.grid
    x = ensemble.positions.astype(float).copy()
    times = list(ensemble.times) or [frames[0][0]]
    history = list(ensemble.history) or [x.copy()]
    for k in range(len(frames) - 1):
        x = _rk4_interval(x, grid, frames[k], frames[k + 1], substeps)
        if (k + 1) % record_every == 0 or k == len(frames) - 2:
            times.append(frames[k + 1][0])
            history.append(x.copy())
    return TrajectoryEnsemble(grid, x, times, history)


def _binned(idx: tuple[np.ndarray, ...], grid: Grid, bin_factor: int) -> tuple[np.ndarray, tuple[int, ...]]:
    shape = tuple(-(-a.points // bin_factor) for a in grid.axes)
    coarse = tuple(i // bin_factor for i in idx)
    return np.ravel_multi_index(coarse, shape), shape


def born_distance(ensemble: TrajectoryEnsemble | np.ndarray, psi: ComplexField, bin_factor: int = 1) -> float:
    """L1 distance between the particle histogram and the |ψ|² cell masses.

    Each node owns a cell of width Δx; ``bin_factor`` merges that many cells
    per axis. Result lies in [0, 2].
    """
    pos = ensemble.positions if isinstance(ensemble, TrajectoryEnsemble) else np.asarray(ensemble)
    if pos.shape[0] < 100:
        raise ValueError("born_distance needs at least 100 particles")
    grid = psi.grid
    flat, shape = _binned(nearest_node(pos, grid), grid, bin_factor)
    counts = np.bincount(flat, minlength=int(np.prod(shape))) / pos.shape[0]
    node_idx = np.indices(grid.shape).reshape(grid.ndim, -1)
    mflat, _ = _binned(tuple(node_idx), grid, bin_factor)
    masses = np.bincount(mflat, weights=node_masses(psi.density, grid).ravel(), minlength=counts.size)
    return float(np.abs(counts - masses).sum())


@dataclass
class TrajectoryRun:
    snapshots: list[tuple[float, ComplexField]]
    ensemble: TrajectoryEnsemble
    born: list[tuple[float, float]]


def run_trajectories(
    psi0: ComplexField,
    sys: ClassicalSystem,
    lam: float,
    t_final: float,
    dt: float,
    n_particles: int,
    seed: int,
    snapshot_every: int = 10,
    bin_factor: int = 1,
) -> TrajectoryRun:
    """Propagate ψ, store one velocity frame per CN step, advect particles sampled from |ψ₀|²."""
    lam = abs(lam)
    H = build_hamiltonian(sys, psi0.grid, lam)
    cn = CrankNicolson(H, dt)
    nsteps = step_count(t_final, dt)
    v = H.restrict(psi0.values)
    psi = ComplexField(H.grid, H.extend(v))
    ens = sample_initial(psi, n_particles, seed)
    ens.times, ens.history = [0.0], [ens.positions.copy()]
    snaps = [(0.0, psi)]
    born = [(0.0, born_distance(ens, psi, bin_factor))]
    coeffs = sys.on_grid(psi0.grid)
    prev = (0.0, effective_velocity(psi, sys, lam, coefficients=coeffs))
    for k in range(1, nsteps + 1):
        v = cn.step_vec(v)
        t = k * cn.dt
        psi = ComplexField(H.grid, H.extend(v))
        cur = (t, effective_velocity(psi, sys, lam, coefficients=coeffs))
        ens.positions = _rk4_interval(ens.positions, H.grid, prev, cur)
        if k % snapshot_every == 0 or k == nsteps:
            ens.times.append(t)
            ens.history.append(ens.positions.copy())
            snaps.append((t, psi))
            born.append((t, born_distance(ens, psi, bin_factor)))
        prev = cur
    return TrajectoryRun(snaps, ens, born)
