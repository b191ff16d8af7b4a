"""Residuals of the Madelung-form equations on discrete solutions.

All checks reuse the shared stencils from :mod:`hvq.fields` and evaluate on
the interior (3-node margin on box axes) minus node neighbourhoods, where
R falls below ``mask_fraction`` of its maximum.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dynamics import ClassicalSystem
from .fields import ComplexField, Grid, gradient, mixed_derivative, to_polar

MARGIN = 3
MASK_FRACTION = 1e-3


@dataclass
class ResidualReport:
    grid: Grid
    residual: np.ndarray
    mask: np.ndarray
    weight: np.ndarray  # Ω / max Ω, for the density-weighted maximum
    dt: float | None = None

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual[self.mask]))) if self.mask.any() else 0.0

    @property
    def argmax(self) -> tuple[int, ...]:
        r = np.where(self.mask, np.abs(self.residual), -1.0)
        return tuple(int(i) for i in np.unravel_index(int(np.argmax(r)), r.shape))

    @property
    def weighted_max(self) -> float:
        return float(np.max(np.abs(self.residual * self.weight)[self.mask])) if self.mask.any() else 0.0

    def to_json(self, convergence_ratio: float | None = None) -> dict:
        return {
            "grid": [[a.min, a.max, a.points, a.boundary] for a in self.grid.axes],
            "dt": self.dt,
            "max_residual": self.max_residual,
            "weighted_max_residual": self.weighted_max,
            "argmax": list(self.argmax),
            "convergence_ratio": convergence_ratio,
        }


def interior_mask(grid: Grid, margin: int = MARGIN) -> np.ndarray:
    mask = np.ones(grid.shape, dtype=bool)
    for ax, a in enumerate(grid.axes):
        if a.periodic:
            continue
        idx = [slice(None)] * grid.ndim
        idx[ax] = slice(0, margin)
        mask[tuple(idx)] = False
        idx[ax] = slice(a.points - margin, None)
        mask[tuple(idx)] = False
    return mask


def node_mask(R: np.ndarray, grid: Grid, fraction: float = MASK_FRACTION, margin: int = MARGIN) -> np.ndarray:
    low = R <= fraction * np.max(R)
    near = ndimage.binary_dilation(low, iterations=margin) if low.any() else low
    return interior_mask(grid, margin) & ~near


def identity_check(omega: np.ndarray, grid: Grid) -> dict[tuple[int, int], ResidualReport]:
    """¼ ∂_iΩ∂_jΩ/Ω² − (½ ∂_i∂_jΩ/Ω − ∂_i∂_jR/R) for every index pair i <= j."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        k = tuple(int(i) for i in np.argwhere(omega <= 0)[0])
        raise ValueError(f"identity check needs Ω > 0 everywhere; Ω <= 0 at grid index {k}")
    R = np.sqrt(omega)
    d = [gradient(omega, grid, i) for i in range(grid.ndim)]
    mask = interior_mask(grid)
    weight = omega / omega.max()
    out = {}
    for i in range(grid.ndim):
        for j in range(i, grid.ndim):
            lhs = 0.25 * d[i] * d[j] / omega ** 2
            rhs = 0.5 * mixed_derivative(omega, grid, i, j) / omega - mixed_derivative(R, grid, i, j) / R
            out[(i, j)] = ResidualReport(grid, lhs - rhs, mask, weight)
    return out


def _midpoint(psi_a: ComplexField, psi_b: ComplexField, lambda_abs: float):
    if psi_a.grid != psi_b.grid:
        raise ValueError("snapshots live on different grids")
    pa = to_polar(psi_a, lambda_abs)
    # phase advance per node, valid while |Δ arg| < π between the snapshots
    dS = lambda_abs * np.angle(psi_b.values * np.conj(psi_a.values))
    S_mid = pa.S + 0.5 * dS
    R_mid = 0.5 * (np.abs(psi_a.values) + np.abs(psi_b.values))
    return R_mid, S_mid, dS


def hjm_residual(
    psi_a: ComplexField,
    psi_b: ComplexField,
    dt: float,
    sys: ClassicalSystem,
    lam: float,
    mask_fraction: float = MASK_FRACTION,
) -> ResidualReport:
    """∂_tS + ½g^ij(∂_iS−A_i)(∂_jS−A_j) + V − λ²/2 (g^ij ∂_i∂_jR/R + ∂_ig^ij ∂_jR/R),
    centred between two snapshots ``dt`` apart."""
    lam = abs(lam)
    grid = psi_a.grid
    R, S, dS = _midpoint(psi_a, psi_b, lam)
    g, A, V = sys.on_grid(grid)
    n = grid.ndim
    mask = node_mask(R, grid, mask_fraction)
    Rs = np.where(R > 0, R, 1.0)
    kin = [gradient(S, grid, i) - A[i] for i in range(n)]
    dR = [gradient(R, grid, i) for i in range(n)]
    res = dS / dt + V
    for i in range(n):
        for j in range(n):
            res = res + 0.5 * g[i, j] * kin[i] * kin[j]
            qp = g[i, j] * mixed_derivative(R, grid, i, j) / Rs + gradient(g[i, j], grid, i) * dR[j] / Rs
            res = res - 0.5 * lam ** 2 * qp
    return ResidualReport(grid, res, mask, (R / R.max()) ** 2, dt)


def continuity_residual(
    psi_a: ComplexField,
    psi_b: ComplexField,
    dt: float,
    sys: ClassicalSystem,
    lam: float,
    mask_fraction: float = MASK_FRACTION,
) -> ResidualReport:
    """∂_tΩ + ∂_i(g^ij(∂_jS − A_j)Ω) with Ω = |ψ|², centred between snapshots."""
    lam = abs(lam)
    grid = psi_a.grid
    R, S, _ = _midpoint(psi_a, psi_b, lam)
    g, A, _ = sys.on_grid(grid)
    n = grid.ndim
    om_a, om_b = psi_a.density, psi_b.density
    omega = 0.5 * (om_a + om_b)
    kin = [gradient(S, grid, j) - A[j] for j in range(n)]
    res = (om_b - om_a) / dt
    for i in range(n):
        flux = sum(g[i, j] * kin[j] for j in range(n)) * omega
        res = res + gradient(flux, grid, i)
    mask = node_mask(R, grid, mask_fraction)
    return ResidualReport(grid, res, mask, omega / omega.max(), dt)


def coincident(coarse: Grid, fine: Grid) -> tuple[slice, ...]:
    """Slices of ``fine`` that land on the nodes of ``coarse`` (2x refinement)."""
    out = []
    for a, b in zip(coarse.axes, fine.axes):
        if (a.min, a.max, a.boundary) != (b.min, b.max, b.boundary):
            raise ValueError("grids do not cover the same domain")
        step = round(a.spacing / b.spacing)
        if abs(a.spacing / b.spacing - step) > 1e-9 or step < 1:
            raise ValueError("fine grid is not an integer refinement of the coarse grid")
        out.append(slice(None, None, step))
    return tuple(out)


@dataclass
class ConvergenceResult:
    ratio: float
    pointwise_min_ratio: float
    regressions: list[tuple[int, ...]]

    @property
    def ok(self) -> bool:
        return not self.regressions


def convergence(
    coarse: ResidualReport,
    fine: ResidualReport,
    min_ratio: float = 2.0,
    floor: float = 1e-10,
    rel_floor: float = 1e-2,
) -> ConvergenceResult:
    """Global max-residual ratio plus a pointwise check on coincident nodes.

    A regression is a coarse node (inside both masks, residual above
    ``floor``) whose refined residual is not at least ``min_ratio`` smaller
    while still exceeding ``rel_floor`` of the refined maximum. The relative
    floor skips zero crossings of the leading error term, where the
    pointwise ratio carries no order information.
    """
    sl = coincident(coarse.grid, fine.grid)
    rf = np.abs(fine.residual[sl])
    mf = fine.mask[sl]
    rc = np.abs(coarse.residual)
    both_any = coarse.mask & mf
    if not both_any.any():
        return ConvergenceResult(float("nan"), float("inf"), [])
    top = float(np.max(rf[both_any]))
    both = both_any & (rc > floor) & (rf > rel_floor * top)
    with np.errstate(divide="ignore"):
        ratio_pt = np.where(both, rc / np.maximum(rf, 1e-300), np.inf)
    bad = [tuple(int(i) for i in k) for k in np.argwhere(both & (ratio_pt < min_ratio))]
    ratio = float(np.max(rc[both_any]) / top) if top > 0 else float("inf")
    return ConvergenceResult(ratio, float(np.min(ratio_pt)) if both.any() else float("inf"), bad)


def sign_symmetry_check(
    run_plus: list[tuple[float, ComplexField]], run_minus: list[tuple[float, ComplexField]]
) -> bool:
    """True iff the +λ and −λ runs are bit-identical at every snapshot."""
    if not run_plus or not run_minus:
        return False
    if not np.array_equal(run_plus[0][1].values, run_minus[0][1].values):
        warnings.warn(
            "runs at +lambda and -lambda start from different fields; "
            "sign symmetry S(q,lambda,0) = S(q,-lambda,0) does not hold initially",
            RuntimeWarning,
            stacklevel=2,
        )
        return False
    if len(run_plus) != len(run_minus):
        return False
    return all(
        tp == tm and pp.grid == pm.grid and np.array_equal(pp.values, pm.values)
        for (tp, pp), (tm, pm) in zip(run_plus, run_minus)
    )
