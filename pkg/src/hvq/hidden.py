"""The hidden-variable law P(λ): binary ±ħ, symmetric log-normal, or a table.

Only |λ| is parameterised; the sign is an independent fair coin, so
P(λ) = P(−λ) holds by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BINARY = "binary"
LOGNORMAL = "lognormal"
TABLE = "table"
LOG_SPAN = 6.0  # Gauss-Legendre window in log|λ|, in units of sigma


@dataclass(frozen=True)
class LambdaDistribution:
    kind: str = BINARY
    sigma: float = 0.0
    rows: tuple[tuple[float, float], ...] = ()
    hbar: float = 1.0
    _mags: np.ndarray = field(default=None, init=False, repr=False, compare=False)
    _probs: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")
        if self.kind == LOGNORMAL:
            if not self.sigma >= 0 or not np.isfinite(self.sigma):
                raise ValueError(f"lognormal sigma must be >= 0, got {self.sigma}")
        elif self.kind == TABLE:
            if not self.rows:
                raise ValueError("table distribution needs at least one row")
            mags = np.array([float(r[0]) for r in self.rows])
            probs = np.array([float(r[1]) for r in self.rows])
            if np.any(mags <= 0):
                raise ValueError("table |lambda| values must be strictly positive")
            if np.any(probs <= 0):
                raise ValueError("table weights must be positive")
            order = np.argsort(mags, kind="stable")
            object.__setattr__(self, "_mags", mags[order])
            object.__setattr__(self, "_probs", probs[order] / probs.sum())
        elif self.kind != BINARY:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def binary(cls, hbar: float = 1.0) -> "LambdaDistribution":
        return cls(BINARY, hbar=hbar)

    @classmethod
    def lognormal(cls, sigma: float, hbar: float = 1.0) -> "LambdaDistribution":
        return cls(LOGNORMAL, sigma=float(sigma), hbar=hbar)

    @classmethod
    def table(cls, rows, hbar: float = 1.0) -> "LambdaDistribution":
        return cls(TABLE, rows=tuple((float(a), float(w)) for a, w in rows), hbar=hbar)

    @property
    def degenerate(self) -> bool:
        """True when |λ| takes the single value ħ."""
        return self.kind == BINARY or (self.kind == LOGNORMAL and self.sigma == 0)

    def magnitude_nodes(self, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Ascending |λ| nodes and their probabilities (summing to one)."""
        if n < 1:
            raise ValueError("need at least one quadrature node")
        if self.degenerate:
            return np.array([self.hbar]), np.array([1.0])
        if self.kind == TABLE:
            return self._mags.copy(), self._probs.copy()
        x, w = np.polynomial.legendre.leggauss(n)
        u = LOG_SPAN * self.sigma * x
        w = w * np.exp(-0.5 * (u / self.sigma) ** 2)
        return self.hbar * np.exp(u), w / w.sum()

    def to_json(self) -> dict:
        if self.kind == BINARY:
            return {"kind": BINARY, "hbar": self.hbar}
        if self.kind == LOGNORMAL:
            return {"kind": LOGNORMAL, "sigma": self.sigma, "hbar": self.hbar}
        return {"kind": TABLE, "rows": [list(r) for r in self.rows], "hbar": self.hbar}


def quadrature_nodes(dist: LambdaDistribution, n: int = 64) -> list[tuple[float, float]]:
    """Signed (λ, weight) pairs in ascending λ, mirrored with equal paired weights.

    Binary always gives the two nodes ±ħ; the log-normal uses Gauss–Legendre in
    log|λ| over ±6σ about log ħ.
    """
    mags, probs = dist.magnitude_nodes(n)
    neg = [(-float(m), 0.5 * float(p)) for m, p in zip(mags[::-1], probs[::-1])]
    pos = [(float(m), 0.5 * float(p)) for m, p in zip(mags, probs)]
    return neg + pos


def moment(dist: LambdaDistribution, power: int, n: int = 64) -> float:
    """E[λ^power] from the paired nodes; odd powers cancel exactly."""
    mags, probs = dist.magnitude_nodes(n)
    mk = mags ** power
    if power % 2:
        # each +|λ| node meets its mirror −|λ| with the same weight
        return float(np.sum(0.5 * probs * (mk - mk)))
    return float(np.sum(probs * mk))


def abs_moment(dist: LambdaDistribution, power: float, n: int = 64) -> float:
    """E[|λ|^power]."""
    mags, probs = dist.magnitude_nodes(n)
    return float(np.sum(probs * mags ** power))


def lognormal_abs_moment(sigma: float, power: float, hbar: float = 1.0) -> float:
    """Closed form E[|λ|^k] for log|λ| ~ N(log ħ, σ²)."""
    return hbar ** power * float(np.exp(0.5 * (power * sigma) ** 2))


def sample(dist: LambdaDistribution, n: int, seed: int) -> np.ndarray:
    """Monte-Carlo draws of λ; deterministic for a fixed seed."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    if dist.degenerate:
        mag = np.full(n, dist.hbar)
    elif dist.kind == LOGNORMAL:
        mag = dist.hbar * np.exp(dist.sigma * rng.standard_normal(n))
    else:
        mags, probs = dist.magnitude_nodes()
        mag = mags[rng.choice(mags.size, size=n, p=probs)]
    return sign * mag


def from_config(block: dict) -> LambdaDistribution:
    kind = block.get("kind", BINARY)
    hbar = float(block.get("hbar", 1.0))
    if kind == BINARY:
        return LambdaDistribution.binary(hbar)
    if kind == LOGNORMAL:
        return LambdaDistribution.lognormal(float(block["sigma"]), hbar)
    if kind == TABLE:
        return LambdaDistribution.table(block["rows"], hbar)
    raise ValueError(f"unknown distribution kind {kind!r}")
