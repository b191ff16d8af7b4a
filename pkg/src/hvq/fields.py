"""Tensor-product grids, fields, finite differences and the λ-Madelung transform."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

MAX_NODES = 1 << 24
NODE_FLOOR = 1e-12
SNAPSHOT_MAGIC = b"HVQ1"
BOX = "box"
PERIODIC = "periodic"


class UnwrapError(ValueError):
    """Phase cannot be made single-valued (vortex or winding on a periodic axis)."""

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message if index is None else f"{message} at grid index {index}")
        self.index = index


@dataclass(frozen=True)
class Axis:
    min: float
    max: float
    points: int
    boundary: str = BOX

    def __post_init__(self):
        if self.boundary not in (BOX, PERIODIC):
            raise ValueError(f"boundary must be 'box' or 'periodic', got {self.boundary!r}")
        if int(self.points) != self.points or self.points < 3:
            raise ValueError(f"axis needs an integer number of points >= 3, got {self.points}")
        if not self.max > self.min:
            raise ValueError(f"axis max ({self.max}) must exceed min ({self.min})")

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC

    @property
    def spacing(self) -> float:
        if self.periodic:
            return (self.max - self.min) / self.points
        return (self.max - self.min) / (self.points - 1)

    @property
    def coords(self) -> np.ndarray:
        return self.min + self.spacing * np.arange(self.points)

    @property
    def length(self) -> float:
        return self.max - self.min


@dataclass(frozen=True)
class Grid:
    axes: tuple[Axis, ...]
    max_nodes: int = MAX_NODES

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        if not self.axes:
            raise ValueError("grid needs at least one axis")
        if self.size > self.max_nodes:
            raise ValueError(f"grid has {self.size} nodes, budget is {self.max_nodes}")

    @classmethod
    def uniform(cls, lo: float, hi: float, points: int, boundary: str = BOX, ndim: int = 1) -> "Grid":
        return cls(tuple(Axis(lo, hi, points, boundary) for _ in range(ndim)))

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.points for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(a.spacing for a in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def coords(self, axis: int) -> np.ndarray:
        return self.axes[axis].coords

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*(a.coords for a in self.axes), indexing="ij")

    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights (periodic axes: uniform)."""
        w = np.ones(self.shape)
        for ax, a in enumerate(self.axes):
            wa = np.full(a.points, a.spacing)
            if not a.periodic:
                wa[0] *= 0.5
                wa[-1] *= 0.5
            shape = [1] * self.ndim
            shape[ax] = a.points
            w = w * wa.reshape(shape)
        return w

    def wall_mask(self) -> np.ndarray:
        """True on box-boundary nodes, where Dirichlet zero is imposed."""
        mask = np.zeros(self.shape, dtype=bool)
        for ax, a in enumerate(self.axes):
            if a.periodic:
                continue
            idx = [slice(None)] * self.ndim
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        return mask

    def _check_axis(self, axis: int) -> None:
        if not 0 <= axis < self.ndim:
            raise IndexError(f"axis {axis} out of range for {self.ndim}-d grid")


@dataclass(frozen=True)
class ComplexField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("complex field contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def norm2(self) -> float:
        return integrate(self.density, self.grid)

    def __add__(self, other: "ComplexField") -> "ComplexField":
        _same_grid(self.grid, other.grid)
        return ComplexField(self.grid, self.values + other.values)

    def __mul__(self, c: complex) -> "ComplexField":
        return ComplexField(self.grid, self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class PolarPair:
    """Amplitude R >= 0 and action-valued phase S, with Ψ = R exp(iS/|λ|)."""

    grid: Grid
    R: np.ndarray
    S: np.ndarray
    lambda_abs: float = 1.0
    valid: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        S = np.asarray(self.S, dtype=float)
        if R.shape != self.grid.shape or S.shape != self.grid.shape:
            raise ValueError("R and S must match the grid shape")
        if np.any(R < 0):
            raise ValueError("R must be non-negative")
        if not self.lambda_abs > 0:
            raise ValueError("lambda_abs must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "S", S)


def _same_grid(a: Grid, b: Grid) -> None:
    if a != b:
        raise ValueError("fields live on different grids")


def integrate(f: np.ndarray, grid: Grid) -> float:
    return float(np.sum(np.asarray(f) * grid.weights()))


def gradient(f: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """Second-order first derivative along ``axis``."""
    grid._check_axis(axis)
    a = grid.axes[axis]
    h = a.spacing
    f = np.asarray(f)
    if a.periodic:
        return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * h)
    f = np.moveaxis(f, axis, 0)
    g = np.empty_like(f)
    g[1:-1] = (f[2:] - f[:-2]) / (2 * h)
    g[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
    g[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * h)
    return np.moveaxis(g, 0, axis)


def second_derivative(f: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """Compact three-point second derivative; one-sided four-point at box ends."""
    grid._check_axis(axis)
    a = grid.axes[axis]
    h2 = a.spacing ** 2
    f = np.asarray(f)
    if a.periodic:
        return (np.roll(f, -1, axis) - 2 * f + np.roll(f, 1, axis)) / h2
    if a.points < 4:
        raise ValueError("box second derivative needs at least 4 points")
    f = np.moveaxis(f, axis, 0)
    g = np.empty_like(f)
    g[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h2
    g[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h2
    g[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h2
    return np.moveaxis(g, 0, axis)


def mixed_derivative(f: np.ndarray, grid: Grid, i: int, j: int) -> np.ndarray:
    if i == j:
        return second_derivative(f, grid, i)
    return gradient(gradient(f, grid, j), grid, i)


def normalize(psi: ComplexField) -> ComplexField:
    n2 = psi.norm2()
    if not n2 > 0:
        raise ValueError("cannot normalize a zero-norm field")
    return ComplexField(psi.grid, psi.values / np.sqrt(n2))


def _valid_mask(amplitude: np.ndarray, floor: float) -> np.ndarray:
    peak = float(np.max(amplitude)) if amplitude.size else 0.0
    if peak == 0:
        raise ValueError("field is identically zero")
    return amplitude > floor * peak


def _fill_from_nearest(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if np.all(valid):
        return values
    _, idx = ndimage.distance_transform_edt(~valid, return_indices=True)
    return values[tuple(idx)]


def _wrap(x: np.ndarray) -> np.ndarray:
    return (x + np.pi) % (2 * np.pi) - np.pi


def _check_residues(phase: np.ndarray, grid: Grid) -> None:
    # winding along periodic axes
    for ax, a in enumerate(grid.axes):
        if not a.periodic:
            continue
        incr = _wrap(np.roll(phase, -1, ax) - phase)
        res = np.sum(incr, axis=ax)
        bad = np.abs(res) > np.pi / 2
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(np.atleast_1d(bad))[0])
            raise UnwrapError(f"phase winds by {float(np.atleast_1d(res)[idx]):.3f} rad around periodic axis {ax}", idx)
    # plaquette circulation for every pair of axes
    for i in range(grid.ndim):
        for j in range(i + 1, grid.ndim):
            p = np.moveaxis(phase, (i, j), (0, 1))
            a = _wrap(p[1:, :-1] - p[:-1, :-1])
            b = _wrap(p[1:, 1:] - p[1:, :-1])
            c = _wrap(p[:-1, 1:] - p[1:, 1:])
            d = _wrap(p[:-1, :-1] - p[:-1, 1:])
            circ = a + b + c + d
            bad = np.abs(circ) > np.pi / 2
            if np.any(bad):
                idx = tuple(int(k) for k in np.argwhere(bad)[0])
                raise UnwrapError(f"phase vortex between axes {i} and {j}", idx)


def _unwrap_sweep(phase: np.ndarray) -> np.ndarray:
    """Unwrap along the last axis, anchored on an unwrapped origin hyperplane."""
    if phase.ndim == 1:
        return np.unwrap(phase)
    rows = np.unwrap(phase, axis=-1)
    anchor = _unwrap_sweep(phase[..., 0])
    return rows + (anchor - phase[..., 0])[..., None]


def to_polar(psi: ComplexField, lambda_abs: float, floor: float = NODE_FLOOR) -> PolarPair:
    """Split Ψ into (R, S) with S = |λ|·unwrapped arg Ψ.

    Nodes with |Ψ| <= floor·max|Ψ| take their phase from the nearest valid node
    before unwrapping; a vortex or a winding around a periodic axis raises
    :class:`UnwrapError` instead of being patched.
    """
    if not lambda_abs > 0:
        raise ValueError("lambda_abs must be positive")
    R = np.abs(psi.values)
    valid = _valid_mask(R, floor)
    phase = _fill_from_nearest(np.angle(psi.values), valid)
    _check_residues(phase, psi.grid)
    S = lambda_abs * _unwrap_sweep(phase)
    return PolarPair(psi.grid, R, S, lambda_abs, valid)


def from_polar(pair: PolarPair) -> ComplexField:
    return ComplexField(pair.grid, pair.R * np.exp(1j * pair.S / pair.lambda_abs))


def phase_gradient(psi: ComplexField, axis: int, lambda_abs: float, floor: float = NODE_FLOOR) -> np.ndarray:
    """∂S along ``axis`` from local phase increments (no global unwrap needed).

    Identical to differentiating the locally unwrapped phase with the
    ``gradient`` stencils. Values at nodes are clamped to the nearest valid node.
    """
    grid = psi.grid
    grid._check_axis(axis)
    a = grid.axes[axis]
    h = a.spacing
    v = psi.values
    valid = _valid_mask(np.abs(v), floor)
    if a.periodic:
        d = np.angle(np.roll(v, -1, axis) * np.conj(np.roll(v, 1, axis))) / (2 * h)
    else:
        w = np.moveaxis(v, axis, 0)
        d = np.empty(w.shape)
        d[1:-1] = np.angle(w[2:] * np.conj(w[:-2])) / (2 * h)
        d[0] = (4 * np.angle(w[1] * np.conj(w[0])) - np.angle(w[2] * np.conj(w[0]))) / (2 * h)
        d[-1] = -(4 * np.angle(w[-2] * np.conj(w[-1])) - np.angle(w[-3] * np.conj(w[-1]))) / (2 * h)
        d = np.moveaxis(d, 0, axis)
    return lambda_abs * _fill_from_nearest(d, valid)


def interpolate(values: np.ndarray, grid: Grid, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of node data at ``points`` (shape (n, ndim)).

    ``values`` has shape ``grid.shape`` or ``grid.shape + (k,)``. Box axes clamp
    to the grid extent, periodic axes wrap.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo_idx, fracs = [], []
    for ax, a in enumerate(grid.axes):
        x = (points[:, ax] - a.min) / a.spacing
        if a.periodic:
            x = np.mod(x, a.points)
            i0 = np.floor(x).astype(int)
            f = x - i0
            i0 = np.mod(i0, a.points)
            i1 = np.mod(i0 + 1, a.points)
        else:
            x = np.clip(x, 0.0, a.points - 1)
            i0 = np.minimum(np.floor(x).astype(int), a.points - 2)
            f = x - i0
            i1 = i0 + 1
        lo_idx.append((i0, i1))
        fracs.append(f)
    trailing = values.shape[grid.ndim:]
    out = np.zeros((points.shape[0],) + trailing, dtype=values.dtype if np.iscomplexobj(values) else float)
    for corner in range(1 << grid.ndim):
        w = np.ones(points.shape[0])
        idx = []
        for ax in range(grid.ndim):
            bit = (corner >> ax) & 1
            idx.append(lo_idx[ax][bit])
            w = w * (fracs[ax] if bit else 1.0 - fracs[ax])
        out += w.reshape((-1,) + (1,) * len(trailing)) * values[tuple(idx)]
    return out


def node_masses(density: np.ndarray, grid: Grid) -> np.ndarray:
    m = np.clip(np.asarray(density, dtype=float), 0, None) * grid.weights()
    total = m.sum()
    if not total > 0:
        raise ValueError("density has zero mass")
    return m / total


def sample_positions(
    density: np.ndarray, grid: Grid, n: int, seed: int, stratified: bool = False
) -> np.ndarray:
    """Draw ``n`` points from a node density; each node owns a cell of width Δx.

    ``stratified`` places one uniform draw in each of ``n`` equal-probability
    strata of the cumulative node mass (lower variance for ensemble means).
    """
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(node_masses(density, grid).ravel())
    cdf /= cdf[-1]
    if stratified:
        u = (np.arange(n) + rng.random(n)) / n
    else:
        u = rng.random(n)
    flat = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    nodes = np.unravel_index(flat, grid.shape)
    pts = np.empty((n, grid.ndim))
    for ax, a in enumerate(grid.axes):
        x = a.coords[nodes[ax]] + (rng.random(n) - 0.5) * a.spacing
        pts[:, ax] = np.mod(x - a.min, a.length) + a.min if a.periodic else np.clip(x, a.min, a.max)
    return pts


def nearest_node(points: np.ndarray, grid: Grid) -> tuple[np.ndarray, ...]:
    idx = []
    for ax, a in enumerate(grid.axes):
        k = np.rint((points[:, ax] - a.min) / a.spacing).astype(int)
        idx.append(np.mod(k, a.points) if a.periodic else np.clip(k, 0, a.points - 1))
    return tuple(idx)


# -- export formats ---------------------------------------------------------

_HEADER = struct.Struct("<4sI")
_AXIS = struct.Struct("<ddIB")
_TAIL = struct.Struct("<dd")


def snapshot_bytes(psi: ComplexField, lambda_value: float, time: float) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(SNAPSHOT_MAGIC, psi.grid.ndim))
    for a in psi.grid.axes:
        buf.write(_AXIS.pack(a.min, a.max, a.points, 1 if a.periodic else 0))
    buf.write(_TAIL.pack(lambda_value, time))
    buf.write(np.ascontiguousarray(psi.values, dtype="<c16").tobytes(order="C"))
    return buf.getvalue()


def write_snapshot(path: str | Path, psi: ComplexField, lambda_value: float, time: float) -> Path:
    path = Path(path)
    path.write_bytes(snapshot_bytes(psi, lambda_value, time))
    return path


def read_snapshot(path: str | Path) -> tuple[ComplexField, float, float]:
    """Inverse of :func:`write_snapshot`: returns (field, λ, time)."""
    data = Path(path).read_bytes()
    magic, ndim = _HEADER.unpack_from(data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"not an HVQ1 snapshot: magic {magic!r}")
    off = _HEADER.size
    axes = []
    for _ in range(ndim):
        lo, hi, pts, per = _AXIS.unpack_from(data, off)
        off += _AXIS.size
        axes.append(Axis(lo, hi, pts, PERIODIC if per else BOX))
    lam, time = _TAIL.unpack_from(data, off)
    off += _TAIL.size
    grid = Grid(tuple(axes))
    values = np.frombuffer(data, dtype="<c16", count=grid.size, offset=off).reshape(grid.shape)
    return ComplexField(grid, values.astype(complex)), lam, time


def fmt(x: float) -> str:
    return repr(float(x))


def field_csv(psi: ComplexField, names: Sequence[str] | None = None) -> str:
    """One node per row: coordinates, then re and im (row-major order)."""
    names = list(names or [f"q{i + 1}" for i in range(psi.grid.ndim)])
    lines = [",".join(names + ["re", "im"])]
    mesh = [m.ravel() for m in psi.grid.mesh()]
    vals = psi.values.ravel()
    for k in range(vals.size):
        lines.append(",".join([fmt(m[k]) for m in mesh] + [fmt(vals[k].real), fmt(vals[k].imag)]))
    return "\n".join(lines) + "\n"


def scalar_csv(values: np.ndarray, grid: Grid, column: str, names: Sequence[str] | None = None) -> str:
    names = list(names or [f"q{i + 1}" for i in range(grid.ndim)])
    lines = [",".join(names + [column])]
    mesh = [m.ravel() for m in grid.mesh()]
    flat = np.asarray(values).ravel()
    for k in range(flat.size):
        lines.append(",".join([fmt(m[k]) for m in mesh] + [fmt(flat[k])]))
    return "\n".join(lines) + "\n"
