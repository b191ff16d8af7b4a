"""Uniquely ordered Hamiltonian assembly and Crank–Nicolson propagation.

The kinetic term ½(−i|λ|∂_i − A_i) g^ij (−i|λ|∂_j − A_j) is assembled in flux
form: diagonal metric entries as D_i† G_ii D_i on staggered links (g^ii
averaged to half nodes), off-diagonal entries as C_i† g^ij C_j with central
node differences. Every piece is a congruence, so the matrix is Hermitian;
it is symmetrised once more so that H == H† holds bit for bit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .exprlang import Expression, evaluate, evaluate_on_grid, parse_expression
from .fields import ComplexField, Grid

log = logging.getLogger(__name__)

SOLVE_TOL = 1e-10


class NumericalAbort(RuntimeError):
    """Propagation produced non-finite values; carries the last good snapshot."""

    def __init__(self, message: str, last_good: tuple[float, ComplexField] | None):
        super().__init__(message)
        self.last_good = last_good


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassicalSystem:
    """H = ½ g^ij(q)(p_i − A_i)(p_j − A_j) + V(q); mass is folded into g^ij."""

    coords: tuple[str, ...]
    metric_inverse: tuple[tuple[Expression, ...], ...]
    vector_potential: tuple[Expression, ...]
    scalar_potential: Expression

    def __post_init__(self):
        n = len(self.coords)
        if len(self.metric_inverse) != n or any(len(r) != n for r in self.metric_inverse):
            raise ValueError(f"metric_inverse must be {n}x{n}")
        if len(self.vector_potential) != n:
            raise ValueError(f"vector_potential needs {n} entries")
        for i in range(n):
            for j in range(i + 1, n):
                if self.metric_inverse[i][j].ast != self.metric_inverse[j][i].ast:
                    raise ValueError(f"metric_inverse not symmetric: entries ({i},{j}) and ({j},{i}) differ")
        for e in self.expressions():
            if "t" in e.variables():
                raise ValueError(f"system expressions must be time-independent: {e.text!r}")

    @classmethod
    def from_strings(
        cls,
        coords: Sequence[str],
        metric_inverse,
        scalar_potential: str = "0",
        vector_potential: Sequence[str] | None = None,
    ) -> "ClassicalSystem":
        coords = tuple(coords)
        n = len(coords)
        if isinstance(metric_inverse, str):
            metric_inverse = [[metric_inverse if i == j else "0" for j in range(n)] for i in range(n)]
        g = tuple(tuple(parse_expression(str(e), coords) for e in row) for row in metric_inverse)
        a = tuple(parse_expression(str(e), coords) for e in (vector_potential or ["0"] * n))
        return cls(coords, g, a, parse_expression(str(scalar_potential), coords))

    @classmethod
    def free(cls, mass: float = 1.0, ndim: int = 1, potential: str = "0") -> "ClassicalSystem":
        coords = [f"q{i + 1}" for i in range(ndim)]
        return cls.from_strings(coords, repr(1.0 / mass), potential)

    @property
    def dim(self) -> int:
        return len(self.coords)

    def expressions(self) -> list[Expression]:
        out = [e for row in self.metric_inverse for e in row]
        return out + list(self.vector_potential) + [self.scalar_potential]

    def on_grid(self, grid: Grid) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
        """(g of shape (N, N, *grid.shape), [A_i], V) evaluated at the nodes."""
        if grid.ndim != self.dim:
            raise ValueError(f"grid has {grid.ndim} axes, system has {self.dim} coordinates")
        n = self.dim
        g = np.empty((n, n) + grid.shape)
        for i in range(n):
            for j in range(n):
                g[i, j] = evaluate_on_grid(self.metric_inverse[i][j], grid)
        A = [evaluate_on_grid(e, grid) for e in self.vector_potential]
        V = evaluate_on_grid(self.scalar_potential, grid)
        check_positive_definite(g)
        return g, A, V

    def at_points(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Coefficients at points q (shape (m, N)): g (m, N, N), A (m, N), V (m,)."""
        q = np.atleast_2d(q)
        env = {c: q[:, k] for k, c in enumerate(self.coords)}
        m, n = q.shape[0], self.dim
        g = np.empty((m, n, n))
        for i in range(n):
            for j in range(n):
                g[:, i, j] = np.broadcast_to(evaluate(self.metric_inverse[i][j], env), (m,))
        A = np.stack([np.broadcast_to(evaluate(e, env), (m,)) for e in self.vector_potential], axis=1)
        V = np.broadcast_to(evaluate(self.scalar_potential, env), (m,)).copy()
        return g, A, V

    def hamiltonian(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        g, A, V = self.at_points(q)
        k = np.atleast_2d(p) - A
        return 0.5 * np.einsum("mi,mij,mj->m", k, g, k) + V

    def velocity(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        """q̇^i = g^ij (p_j − A_j)."""
        g, A, _ = self.at_points(q)
        return np.einsum("mij,mj->mi", g, np.atleast_2d(p) - A)


def check_positive_definite(g: np.ndarray) -> None:
    n = g.shape[0]
    mats = np.moveaxis(g.reshape(n, n, -1), -1, 0)
    eig = np.linalg.eigvalsh(mats)
    bad = eig[:, 0] <= 0
    if np.any(bad):
        k = int(np.argmax(bad))
        raise ValueError(f"metric_inverse not positive-definite at node {np.unravel_index(k, g.shape[2:])}")


def _kron_axis(op: sp.spmatrix, grid: Grid, axis: int) -> sp.csr_matrix:
    mats = [sp.identity(a.points, format="csr") for a in grid.axes]
    mats[axis] = op
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out.tocsr()


def _link_ops(grid: Grid, axis: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Forward difference and averaging from nodes to links along ``axis``."""
    a = grid.axes[axis]
    n = a.points
    nl = n if a.periodic else n - 1
    rows = np.arange(nl)
    cols = np.arange(nl)
    nxt = (cols + 1) % n
    diff = sp.csr_matrix(
        (np.r_[np.full(nl, -1.0), np.full(nl, 1.0)] / a.spacing, (np.r_[rows, rows], np.r_[cols, nxt])),
        shape=(nl, n),
    )
    avg = sp.csr_matrix((np.full(2 * nl, 0.5), (np.r_[rows, rows], np.r_[cols, nxt])), shape=(nl, n))
    return _kron_axis(diff, grid, axis), _kron_axis(avg, grid, axis)


def central_difference(grid: Grid, axis: int) -> sp.csr_matrix:
    """Node-centred first difference; values beyond a box wall count as zero."""
    a = grid.axes[axis]
    n = a.points
    k = np.arange(n)
    if a.periodic:
        rows = np.r_[k, k]
        cols = np.r_[(k + 1) % n, (k - 1) % n]
    else:
        rows = np.r_[k[:-1], k[1:]]
        cols = np.r_[k[:-1] + 1, k[1:] - 1]
    vals = np.r_[np.full(rows.size // 2, 1.0), np.full(rows.size // 2, -1.0)] / (2 * a.spacing)
    return _kron_axis(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)), grid, axis)


@dataclass
class DiscreteHamiltonian:
    grid: Grid
    lambda_abs: float
    matrix: sp.csr_matrix  # over active (non-wall) nodes, row-major order
    active: np.ndarray  # flat indices of active nodes
    _lu_cache: dict = field(default_factory=dict, repr=False)

    def full_matrix(self) -> sp.csr_matrix:
        """Operator over all grid nodes; wall rows and columns are zero."""
        n = self.grid.size
        P = sp.csr_matrix((np.ones(self.active.size), (self.active, np.arange(self.active.size))), shape=(n, self.active.size))
        return (P @ self.matrix @ P.T).tocsr()

    def restrict(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=complex).ravel()[self.active]

    def extend(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.size, dtype=complex)
        out[self.active] = vec
        return out.reshape(self.grid.shape)

    def apply(self, psi: ComplexField) -> ComplexField:
        return ComplexField(self.grid, self.extend(self.matrix @ self.restrict(psi.values)))

    def expectation(self, psi: ComplexField) -> float:
        v = self.restrict(psi.values)
        return float(np.real(np.vdot(v, self.matrix @ v)) * self.grid.cell_volume)

    def eigenvalues(self, k: int) -> np.ndarray:
        """Lowest ``k`` eigenvalues (dense solve for small grids, shift-invert otherwise)."""
        from scipy.linalg import eigh
        from scipy.sparse.linalg import eigsh

        n = self.matrix.shape[0]
        if n <= 4096:
            return eigh(self.matrix.toarray(), eigvals_only=True, subset_by_index=[0, k - 1])
        vals = eigsh(self.matrix, k=k, sigma=float(self.matrix.diagonal().real.min()) - 1.0, return_eigenvectors=False)
        return np.sort(vals.real)


def _finish(grid: Grid, lambda_abs: float, H: sp.spmatrix) -> DiscreteHamiltonian:
    active = np.flatnonzero(~grid.wall_mask().ravel())
    H = H.tocsr()[active][:, active]
    H = ((H + H.conj().T) * 0.5).tocsr()
    H.sum_duplicates()
    H.sort_indices()
    return DiscreteHamiltonian(grid, float(lambda_abs), H, active)


def build_hamiltonian(sys: ClassicalSystem, grid: Grid, lambda_abs: float) -> DiscreteHamiltonian:
    """Discretise ½(−i|λ|∂_i − A_i) g^ij (−i|λ|∂_j − A_j) + V on ``grid``."""
    if not lambda_abs > 0:
        raise ValueError("lambda_abs must be positive")
    g, A, V = sys.on_grid(grid)
    lam = float(lambda_abs)
    n = grid.size
    H = sp.diags(V.ravel().astype(complex), format="csr")
    for i in range(grid.ndim):
        diff, avg = _link_ops(grid, i)
        a_link = avg @ A[i].ravel()
        g_link = avg @ g[i, i].ravel()
        D = -1j * lam * diff - sp.diags(a_link) @ avg
        H = H + 0.5 * (D.conj().T @ sp.diags(g_link) @ D)
    for i in range(grid.ndim):
        for j in range(grid.ndim):
            if i == j or not np.any(g[i, j]):
                continue
            Ci = -1j * lam * central_difference(grid, i) - sp.diags(A[i].ravel())
            Cj = -1j * lam * central_difference(grid, j) - sp.diags(A[j].ravel())
            H = H + 0.5 * (Ci.conj().T @ sp.diags(g[i, j].ravel()) @ Cj)
    if not np.all(np.isfinite(H.data)):
        raise ValueError("non-finite coefficient in assembled Hamiltonian")
    assert H.shape == (n, n)
    return _finish(grid, lam, H)


def build_drift_hamiltonian(grid: Grid, coefficients: Sequence[np.ndarray], lambda_abs: float) -> DiscreteHamiltonian:
    """Symmetrically ordered first-order operator ½ Σ_i (c_i p̂_i + p̂_i c_i).

    Covers interaction Hamiltonians such as g q₁ p̂₂ that are linear in momentum.
    """
    lam = float(lambda_abs)
    H = sp.csr_matrix((grid.size, grid.size), dtype=complex)
    for i, c in enumerate(coefficients):
        c = np.broadcast_to(np.asarray(c, dtype=float), grid.shape).ravel()
        if not np.any(c):
            continue
        P = -1j * lam * central_difference(grid, i)
        C = sp.diags(c)
        H = H + 0.5 * (C @ P + P @ C)
    return _finish(grid, lam, H)


class CrankNicolson:
    """(1 + i dt H/2|λ|) ψ' = (1 − i dt H/2|λ|) ψ with a cached sparse LU."""

    def __init__(self, H: DiscreteHamiltonian, dt: float):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.H = H
        self.dt = float(dt)
        n = H.matrix.shape[0]
        half = 0.5j * self.dt / H.lambda_abs * H.matrix
        eye = sp.identity(n, dtype=complex, format="csc")
        self.lhs = (eye + half).tocsc()
        self.rhs = (eye - half).tocsr()
        self.lu = splu(self.lhs)

    def step_vec(self, v: np.ndarray) -> np.ndarray:
        b = self.rhs @ v
        x = self.lu.solve(b)
        bnorm = np.linalg.norm(b)
        res = np.linalg.norm(self.lhs @ x - b)
        if res > SOLVE_TOL * max(bnorm, 1e-300):
            x = x + self.lu.solve(b - self.lhs @ x)
            res = np.linalg.norm(self.lhs @ x - b)
            if res > SOLVE_TOL * max(bnorm, 1e-300):
                raise SolverError(f"Crank-Nicolson solve residual {res:.3e} exceeds tolerance")
        return x

    def step(self, psi: ComplexField) -> ComplexField:
        return ComplexField(self.H.grid, self.H.extend(self.step_vec(self.H.restrict(psi.values))))


def step_crank_nicolson(psi: ComplexField, H: DiscreteHamiltonian, dt: float) -> ComplexField:
    if psi.grid != H.grid:
        raise ValueError("field and Hamiltonian live on different grids")
    return CrankNicolson(H, dt).step(psi)


def step_count(t_final: float, dt: float) -> int:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t_final >= dt:
        raise ValueError("t_final must be >= dt")
    n = int(round(t_final / dt))
    if abs(n * dt - t_final) > 1e-9 * max(1.0, abs(t_final)):
        raise ValueError(f"dt={dt} does not divide t_final={t_final}")
    return n


def propagate_with(
    psi0: ComplexField, H: DiscreteHamiltonian, t_final: float, dt: float, snapshot_every: int = 1
) -> list[tuple[float, ComplexField]]:
    """CN propagation with a prebuilt Hamiltonian; snapshots include t=0 and t_final."""
    nsteps = step_count(t_final, dt)
    if snapshot_every < 1:
        raise ValueError("snapshot_every must be >= 1")
    cn = CrankNicolson(H, dt)
    v = H.restrict(psi0.values)
    out = [(0.0, ComplexField(H.grid, H.extend(v)))]
    for k in range(1, nsteps + 1):
        v = cn.step_vec(v)
        if not np.all(np.isfinite(v)):
            raise NumericalAbort(f"non-finite wave function at step {k}", out[-1])
        if k % snapshot_every == 0 or k == nsteps:
            out.append((k * cn.dt, ComplexField(H.grid, H.extend(v))))
    return out


def propagate(
    psi0: ComplexField,
    sys: ClassicalSystem,
    lam: float,
    t_final: float,
    dt: float,
    snapshot_every: int = 1,
) -> list[tuple[float, ComplexField]]:
    """Propagate i|λ|∂_tΨ = ĤΨ; only |λ| enters, so ±λ give identical output."""
    if lam == 0:
        raise ValueError("lambda must be non-zero")
    H = build_hamiltonian(sys, psi0.grid, abs(lam))
    return propagate_with(psi0, H, t_final, dt, snapshot_every)


def expectation_position(psi: ComplexField, axis: int = 0) -> float:
    rho = psi.density
    w = psi.grid.weights()
    q = psi.grid.mesh()[axis]
    return float(np.sum(q * rho * w) / np.sum(rho * w))


def variance_position(psi: ComplexField, axis: int = 0) -> float:
    rho = psi.density
    w = psi.grid.weights()
    q = psi.grid.mesh()[axis]
    norm = np.sum(rho * w)
    mean = np.sum(q * rho * w) / norm
    return float(np.sum((q - mean) ** 2 * rho * w) / norm)
