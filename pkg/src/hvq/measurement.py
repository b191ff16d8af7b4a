"""Von Neumann pointer models: eigenstate pointer shifts under a random |λ|,
pointer statistics and spectral broadening, and the position-measurement
comparison between the quantum and classical treatments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from ._parallel import pmap
from .dynamics import build_drift_hamiltonian, propagate_with, step_count
from .fields import ComplexField, Grid, integrate
from .hidden import LambdaDistribution

INTEGER_SHIFT_TOL = 1e-9
LOST_MASS_TOL = 1e-10


class ShiftOutOfGrid(ValueError):
    pass


def classical_pointer_shift(A1_value: float, g: float, T: float) -> float:
    """Pointer displacement g·A₁·T of the classical impulsive measurement."""
    if not T > 0:
        raise ValueError("duration T must be positive")
    return g * A1_value * T


def classical_position_transport(points: np.ndarray, g: float, T: float) -> np.ndarray:
    """Characteristics of H = g q₁ p₂: q₁ fixed, q₂ → q₂ + g q₁ T."""
    out = np.array(points, dtype=float, copy=True)
    out[:, 1] = out[:, 1] + g * out[:, 0] * T
    return out


@dataclass(frozen=True)
class MeasurementSetup:
    g: float
    T: float
    eigen_components: tuple[tuple[float, complex], ...]
    pointer0: ComplexField
    dist: LambdaDistribution = field(default_factory=LambdaDistribution.binary)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("duration T must be positive")
        if self.pointer0.grid.ndim != 1:
            raise ValueError("pointer wave function must be one-dimensional")
        object.__setattr__(self, "eigen_components", tuple((float(l), complex(c)) for l, c in self.eigen_components))
        total = sum(abs(c) ** 2 for _, c in self.eigen_components)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"sum of |c_l|^2 is {total!r}, expected 1")
        n2 = self.pointer0.norm2()
        if abs(n2 - 1.0) > 1e-9:
            raise ValueError(f"pointer wave function norm^2 is {n2!r}, expected 1")

    @property
    def grid(self) -> Grid:
        return self.pointer0.grid


def _lagrange_cubic(values: np.ndarray, x: np.ndarray, periodic: bool) -> np.ndarray:
    """Four-point Lagrange interpolation at fractional node positions ``x``."""
    n = values.size
    i = np.floor(x).astype(int)
    f = x - i
    w = (
        -f * (f - 1) * (f - 2) / 6,
        (f + 1) * (f - 1) * (f - 2) / 2,
        -(f + 1) * f * (f - 2) / 2,
        (f + 1) * f * (f - 1) / 6,
    )
    out = np.zeros(x.shape, dtype=values.dtype)
    for k, wk in zip(range(-1, 3), w):
        j = i + k
        if periodic:
            out += wk * values[np.mod(j, n)]
        else:
            ok = (j >= 0) & (j < n)
            out[ok] += wk[ok] * values[j[ok]]
    return out


def translate(values: np.ndarray, axis_grid: Grid, shift: float) -> np.ndarray:
    """f(q − shift) on the same 1D grid: exact for whole-node shifts, cubic otherwise."""
    a = axis_grid.axes[0]
    s = shift / a.spacing
    m = int(round(s))
    n = a.points
    if abs(s - m) < INTEGER_SHIFT_TOL:
        if a.periodic:
            return np.roll(values, m)
        out = np.zeros_like(values)
        if abs(m) < n:
            if m >= 0:
                out[m:] = values[: n - m]
            else:
                out[:m] = values[-m:]
        return out
    return _lagrange_cubic(values, np.arange(n) - s, a.periodic)


def eigenstate_pointer(l: float, lam: float, setup: MeasurementSetup) -> ComplexField:
    """φ₀ translated by g·(|λ|/ħ)·l·T."""
    grid = setup.grid
    a = grid.axes[0]
    shift = setup.g * (abs(lam) / setup.dist.hbar) * l * setup.T
    if not a.periodic:
        q = grid.coords(0) + shift
        gone = (q < a.min) | (q > a.max)
        lost = integrate(np.where(gone, setup.pointer0.density, 0.0), grid)
        if lost > LOST_MASS_TOL:
            raise ShiftOutOfGrid(f"pointer shift {shift:.6g} pushes mass {lost:.3e} off the grid")
    moved = translate(setup.pointer0.values, grid, shift)
    nodes = shift / a.spacing
    if abs(nodes - round(nodes)) >= INTEGER_SHIFT_TOL:
        # a translation is unitary; undo the O(Δx⁴) norm error of the cubic stencil
        moved = moved * np.sqrt(setup.pointer0.norm2() / integrate(np.abs(moved) ** 2, grid))
    return ComplexField(grid, moved)


@dataclass
class Peak:
    index: int
    position: float
    centroid: float
    mass: float
    inferred_value: float
    lo: int
    hi: int

    def as_dict(self) -> dict:
        return {
            "position": self.position,
            "centroid": self.centroid,
            "mass": self.mass,
            "inferred_value": self.inferred_value,
        }


@dataclass
class PointerStatistics:
    grid: Grid
    pointer_density: np.ndarray
    inferred_mean: float
    inferred_variance: float
    lambda_variance: float  # part of the variance induced by |λ| alone
    peaks: list[Peak]
    ambiguous: bool

    def summary(self) -> dict:
        return {
            "inferred_mean": self.inferred_mean,
            "inferred_variance": self.inferred_variance,
            "lambda_variance": self.lambda_variance,
            "peaks": [p.as_dict() for p in self.peaks],
            "ambiguous_peaks": self.ambiguous,
        }


def segment_peaks(
    density: np.ndarray,
    grid: Grid,
    min_separation: float,
    origin: float,
    scale: float,
    rel_height: float = 1e-3,
    overlap_tol: float = 1e-6,
) -> tuple[list[Peak], bool]:
    """1D watershed: basins split at the lowest point between neighbouring maxima.

    Returns the peak table and whether any two basins overlap (the density at
    a split point exceeds ``overlap_tol`` times the lower of the two peaks).
    """
    q = grid.coords(0)
    dist_nodes = max(1, int(round(min_separation / grid.axes[0].spacing)))
    idx, _ = find_peaks(np.r_[0.0, density, 0.0], distance=dist_nodes, height=rel_height * density.max())
    idx = idx - 1
    bounds = [0]
    ambiguous = False
    for a, b in zip(idx[:-1], idx[1:]):
        cut = a + int(np.argmin(density[a : b + 1]))
        if density[cut] > overlap_tol * min(density[a], density[b]):
            ambiguous = True
        bounds.append(cut + 1)
    bounds.append(density.size)
    w = grid.weights()
    total = float(np.sum(density * w))
    peaks = []
    for k, p in enumerate(idx):
        lo, hi = bounds[k], bounds[k + 1]
        m = float(np.sum(density[lo:hi] * w[lo:hi]))
        c = float(np.sum(q[lo:hi] * density[lo:hi] * w[lo:hi]) / m) if m > 0 else float(q[p])
        peaks.append(Peak(int(p), float(q[p]), c, m / total, (c - origin) / scale, lo, hi))
    return peaks, ambiguous


def inferred_moments(setup: MeasurementSetup, n_lambda_nodes: int = 128) -> tuple[float, float, float]:
    """Mean, variance and λ-induced variance of l' = |λ| l / ħ."""
    mags, probs = setup.dist.magnitude_nodes(n_lambda_nodes)
    hbar = setup.dist.hbar
    m1 = float(np.sum(probs * mags)) / hbar
    m2 = float(np.sum(probs * mags ** 2)) / hbar ** 2
    pl = [abs(c) ** 2 for _, c in setup.eigen_components]
    ls = [l for l, _ in setup.eigen_components]
    el = sum(p * l for p, l in zip(pl, ls))
    el2 = sum(p * l * l for p, l in zip(pl, ls))
    mean = el * m1
    var = el2 * m2 - mean * mean
    lam_var = el2 * (m2 - m1 * m1)
    return mean, max(var, 0.0), max(lam_var, 0.0)


def pointer_distribution(
    setup: MeasurementSetup, n_lambda_nodes: int = 128, min_separation: float | None = None
) -> PointerStatistics:
    """Pointer density Σ_l |c_l|² Σ_k w_k |φ₀(q₂ − g(|λ_k|/ħ) l T)|² and outcome moments."""
    grid = setup.grid
    mags, probs = setup.dist.magnitude_nodes(n_lambda_nodes)
    pairs = [(l, abs(c) ** 2, m, w) for l, c in setup.eigen_components for m, w in zip(mags, probs)]
    shifted = pmap(lambda it: eigenstate_pointer(it[0], it[2], setup).density, pairs)
    density = np.zeros(grid.shape)
    for (_, pl, _, w), d in zip(pairs, shifted):
        density = density + pl * w * d
    rho0 = setup.pointer0.density
    origin = integrate(grid.coords(0) * rho0, grid) / integrate(rho0, grid)
    scale = setup.g * setup.T
    if min_separation is None:
        min_separation = 0.5 * abs(scale) if scale else grid.axes[0].spacing
    peaks, ambiguous = segment_peaks(density, grid, min_separation, origin, scale if scale else 1.0)
    # eigenvalues whose peaks merged into fewer maxima cannot be told apart
    ambiguous = ambiguous or len(peaks) < len({l for l, c in setup.eigen_components if abs(c) > 0})
    mean, var, lam_var = inferred_moments(setup, n_lambda_nodes)
    return PointerStatistics(grid, density, mean, var, lam_var, peaks, ambiguous)


@dataclass
class PositionMeasurementReport:
    max_difference: float
    cfl: float
    cfl_violation: bool
    norm_drift: float
    quantum_density: np.ndarray
    classical_density: np.ndarray

    def summary(self) -> dict:
        return {
            "max_difference": self.max_difference,
            "cfl": self.cfl,
            "cfl_violation": self.cfl_violation,
            "norm_drift": self.norm_drift,
        }


def position_measurement_check(
    rho0: np.ndarray,
    S0: np.ndarray,
    g: float,
    T: float,
    grid2D: Grid,
    dt: float,
    hbar: float = 1.0,
) -> PositionMeasurementReport:
    """Quantum H = g q₁ p̂₂ versus classical transport q₂ → q₂ + g q₁ T.

    Both start from ρ₀; the quantum side propagates Ψ₀ = √ρ₀ exp(iS₀/ħ) with
    Crank–Nicolson, the classical side shifts each q₁-row of ρ₀ along q₂.
    Returns the max-norm difference of the two densities at T.
    """
    if grid2D.ndim != 2:
        raise ValueError("position measurement needs a 2D (q1, q2) grid")
    step_count(T, dt)
    q1 = grid2D.coords(0)
    psi0 = ComplexField(grid2D, np.sqrt(np.clip(rho0, 0, None)) * np.exp(1j * np.asarray(S0) / hbar))
    psi0 = ComplexField(grid2D, np.where(grid2D.wall_mask(), 0, psi0.values))
    coeff = [np.zeros(grid2D.shape), g * grid2D.mesh()[0]]
    H = build_drift_hamiltonian(grid2D, coeff, hbar)
    snaps = propagate_with(psi0, H, T, dt, snapshot_every=10 ** 9)
    quantum = snaps[-1][1].density
    row_grid = Grid((grid2D.axes[1],))
    classical = np.stack([translate(np.asarray(rho0[i], dtype=float), row_grid, g * q1[i] * T) for i in range(q1.size)])
    classical = np.where(grid2D.wall_mask(), 0.0, classical)
    cfl = float(np.max(np.abs(g * q1)) * dt / grid2D.axes[1].spacing)
    drift = abs(snaps[-1][1].norm2() - psi0.norm2())
    return PositionMeasurementReport(
        float(np.max(np.abs(quantum - classical))), cfl, cfl > 1.0, drift, quantum, classical
    )
