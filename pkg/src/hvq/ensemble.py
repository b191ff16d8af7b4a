"""λ-ensembles: per-branch propagation, marginal densities, interference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from ._parallel import pmap
from .dynamics import ClassicalSystem, propagate
from .fields import ComplexField, Grid, PolarPair, from_polar, integrate, normalize
from .hidden import LambdaDistribution, quadrature_nodes

InitialState = Union[ComplexField, PolarPair]


@dataclass
class LambdaEnsemble:
    branches: list[tuple[float, float, ComplexField]]  # (λ, weight, Ψ) in ascending λ
    time: float

    @property
    def grid(self) -> Grid:
        return self.branches[0][2].grid


def branch_initial(psi0: InitialState, lambda_abs: float) -> ComplexField:
    """A shared ComplexField is used as is; a PolarPair (R, S) is read with
    S as an action, giving R·exp(iS/|λ|) for this branch."""
    if isinstance(psi0, ComplexField):
        return psi0
    return normalize(from_polar(PolarPair(psi0.grid, psi0.R, psi0.S, lambda_abs)))


def propagate_ensemble(
    psi0: InitialState,
    sys: ClassicalSystem,
    dist: LambdaDistribution,
    n_nodes: int,
    t_final: float,
    dt: float,
    snapshot_every: int = 1,
) -> list[LambdaEnsemble]:
    """Propagate every distinct |λ| once; ±λ branches share the result."""
    nodes = quadrature_nodes(dist, n_nodes)
    mags = sorted({abs(lam) for lam, _ in nodes})

    def run(mag: float):
        return propagate(branch_initial(psi0, mag), sys, mag, t_final, dt, snapshot_every)

    runs = dict(zip(mags, pmap(run, mags)))
    times = [t for t, _ in runs[mags[0]]]
    out = []
    for k, t in enumerate(times):
        branches = [(lam, w, runs[abs(lam)][k][1]) for lam, w in nodes]
        out.append(LambdaEnsemble(branches, t))
    return out


def marginal_density(ens: LambdaEnsemble) -> np.ndarray:
    """ρ(q) = Σ_k w_k |Ψ_k|², summed in ascending λ."""
    rho = np.zeros(ens.grid.shape)
    for _, w, psi in ens.branches:
        rho = rho + w * psi.density
    return rho


def distinct_magnitudes(ens: LambdaEnsemble) -> int:
    return len({id(psi) for _, _, psi in ens.branches})


@dataclass
class SuperpositionResult:
    density: np.ndarray  # renormalised to unit mass
    raw_density: np.ndarray
    interference: np.ndarray  # raw_density − (|a|²ρ₁ + |b|²ρ₂)
    rho1: np.ndarray
    rho2: np.ndarray
    norm_factor: float  # density = raw_density * norm_factor
    ab: complex

    def factor(self) -> np.ndarray:
        """Per-point interference factor I / (2|ab|√(ρ₁ρ₂)); 0 where ρ₁ρ₂ = 0."""
        root = np.sqrt(self.rho1 * self.rho2)
        out = np.zeros_like(root)
        ok = root > 0
        out[ok] = self.interference[ok] / (2 * abs(self.ab) * root[ok])
        return out


Component = Union[PolarPair, Sequence[ComplexField]]


def _branch_fields(comp: Component, nodes: list[tuple[float, float]]) -> list[ComplexField]:
    if isinstance(comp, PolarPair):
        cache: dict[float, ComplexField] = {}
        for lam, _ in nodes:
            m = abs(lam)
            if m not in cache:
                cache[m] = from_polar(PolarPair(comp.grid, comp.R, comp.S, m))
        return [cache[abs(lam)] for lam, _ in nodes]
    comp = list(comp)
    if len(comp) != len(nodes):
        raise ValueError(f"expected {len(nodes)} branch fields, got {len(comp)}")
    return comp


def superposition_density(
    first: Component,
    second: Component,
    a: complex,
    b: complex,
    dist: LambdaDistribution,
    n_nodes: int = 64,
) -> SuperpositionResult:
    """Density of aΨ₁ + bΨ₂ averaged over P(λ), with its interference part.

    Components are either (R, S) pairs with λ-independent action S, turned
    into R·exp(iS/|λ|) per node, or one field per signed quadrature node.
    """
    nodes = quadrature_nodes(dist, n_nodes)
    f1 = _branch_fields(first, nodes)
    f2 = _branch_fields(second, nodes)
    grid = f1[0].grid
    if any(f.grid != grid for f in f1 + f2):
        raise ValueError("components live on different grids")
    raw = np.zeros(grid.shape)
    rho1 = np.zeros(grid.shape)
    rho2 = np.zeros(grid.shape)
    for (_, w), p1, p2 in zip(nodes, f1, f2):
        raw = raw + w * np.abs(a * p1.values + b * p2.values) ** 2
        rho1 = rho1 + w * p1.density
        rho2 = rho2 + w * p2.density
    interference = raw - (abs(a) ** 2 * rho1 + abs(b) ** 2 * rho2)
    mass = integrate(raw, grid)
    norm = 1.0 / mass if mass > 0 else 1.0
    return SuperpositionResult(raw * norm, raw, interference, rho1, rho2, norm, complex(a * np.conj(b)))


def fringe_visibility(intensity: np.ndarray, grid: Grid, halfwidth: float, center: float = 0.0) -> float:
    """(max − min)/(max + min) of a 1D profile over |q − center| <= halfwidth."""
    q = grid.coords(0)
    sel = np.abs(q - center) <= halfwidth
    if sel.sum() < 3:
        raise ValueError("central region holds fewer than 3 nodes")
    seg = intensity[sel]
    hi, lo = float(seg.max()), float(seg.min())
    return (hi - lo) / (hi + lo)


@dataclass(frozen=True)
class DoubleSlit:
    """Two Gaussian packets at ∓separation moving toward each other with ±momentum."""

    separation: float = 6.0
    momentum: float = 4.0
    width: float = 1.0
    central_halfwidth: float = 1.0

    def packet(self, grid: Grid, center: float, momentum: float) -> PolarPair:
        q = grid.coords(0)
        R = np.exp(-((q - center) ** 2) / (4 * self.width ** 2))
        R = R / np.sqrt(integrate(R ** 2, grid))
        return PolarPair(grid, R, momentum * (q - center))

    def components(self, grid: Grid) -> tuple[PolarPair, PolarPair]:
        return (
            self.packet(grid, -self.separation, self.momentum),
            self.packet(grid, self.separation, -self.momentum),
        )


@dataclass
class DoubleSlitResult:
    time: float
    intensity: np.ndarray
    visibility: float
    superposition: SuperpositionResult
    overlap0: float
    norm_drift: float = 0.0  # max over branches of |‖Ψ(T)‖² − 1|


def double_slit(
    config: DoubleSlit,
    sys: ClassicalSystem,
    grid: Grid,
    dist: LambdaDistribution,
    t_final: float,
    dt: float,
    n_nodes: int = 32,
) -> DoubleSlitResult:
    """Propagate both packets per branch and superpose them at ``t_final``."""
    c1, c2 = config.components(grid)
    overlap = integrate(c1.R * c2.R, grid)
    if overlap >= 1e-6:
        raise ValueError(f"packets overlap initially ({overlap:.2e} >= 1e-6)")
    e1 = propagate_ensemble(c1, sys, dist, n_nodes, t_final, dt, snapshot_every=10 ** 9)[-1]
    e2 = propagate_ensemble(c2, sys, dist, n_nodes, t_final, dt, snapshot_every=10 ** 9)[-1]
    sup = superposition_density(
        [p for _, _, p in e1.branches], [p for _, _, p in e2.branches], 1.0, 1.0, dist, n_nodes
    )
    vis = fringe_visibility(sup.density, grid, config.central_halfwidth)
    drift = max(abs(p.norm2() - 1.0) for e in (e1, e2) for _, _, p in e.branches)
    return DoubleSlitResult(e1.time, sup.density, vis, sup, overlap, drift)
