"""Run-configuration schema and validation with line-level diagnostics."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dynamics import ClassicalSystem
from .exprlang import ExpressionError, parse_expression
from .fields import Axis, Grid

KINDS = (
    "propagate",
    "trajectories",
    "ensemble",
    "double_slit",
    "measure_angular",
    "measure_position",
    "classical",
    "verify",
)

Num = Union[float, int, str]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class AxisConfig(_Strict):
    min: float
    max: float
    points: int = Field(ge=3)
    boundary: Literal["box", "periodic"] = "box"

    @model_validator(mode="after")
    def _order(self):
        if not self.max > self.min:
            raise ValueError("max must exceed min")
        return self


class GridConfig(_Strict):
    axes: list[AxisConfig] = Field(min_length=1)


class SystemConfig(_Strict):
    coords: Optional[list[str]] = None
    metric_inverse: Union[Num, list[list[Num]]] = "1"
    scalar_potential: Num = "0"
    vector_potential: Optional[list[Num]] = None


class InitialConfig(_Strict):
    amplitude: str
    phase: str = "0"


class DistributionConfig(_Strict):
    kind: Literal["binary", "lognormal", "table"] = "binary"
    sigma: Optional[float] = Field(default=None, ge=0)
    rows: Optional[list[tuple[float, float]]] = None
    hbar: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _needs(self):
        if self.kind == "lognormal" and self.sigma is None:
            raise ValueError("lognormal distribution needs 'sigma'")
        if self.kind == "table" and not self.rows:
            raise ValueError("table distribution needs 'rows'")
        return self


class NumericsConfig(_Strict):
    dt: float = Field(gt=0)
    t_final: float
    snapshot_every: int = Field(default=10, ge=1)
    n_particles: int = Field(default=1000, ge=100)
    n_lambda_nodes: int = Field(default=32, ge=1)
    seed: int = 0
    lambda_: float = Field(default=1.0, alias="lambda")
    bin_factor: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _times(self):
        if not self.t_final >= self.dt:
            raise ValueError("t_final must be >= dt")
        if self.lambda_ == 0:
            raise ValueError("lambda must be non-zero")
        return self


class OutputConfig(_Strict):
    directory: str = "out"
    formats: list[Literal["csv", "json", "bin"]] = ["csv", "json"]


class Assertion(_Strict):
    metric: str
    max: Optional[float] = None
    min: Optional[float] = None

    @model_validator(mode="after")
    def _bound(self):
        if self.max is None and self.min is None:
            raise ValueError("assertion needs 'max' and/or 'min'")
        return self


class DoubleSlitConfig(_Strict):
    separation: float = Field(default=6.0, gt=0)
    momentum: float = 4.0
    width: float = Field(default=1.0, gt=0)
    central_halfwidth: float = Field(default=1.0, gt=0)


class EigenComponent(_Strict):
    l: float
    re: float = 1.0
    im: float = 0.0


class MeasurementConfig(_Strict):
    g: float
    T: float = Field(gt=0)
    components: list[EigenComponent] = Field(min_length=1)
    sigma_sweep: list[float] = []
    min_separation: Optional[float] = Field(default=None, gt=0)


class PositionConfig(_Strict):
    g: float
    T: float = Field(gt=0)


class VerifyConfig(_Strict):
    source: Literal["closed_form", "propagated"] = "propagated"
    time: float = Field(default=0.0, ge=0)
    refinements: int = Field(default=2, ge=1, le=5)
    omega: Optional[str] = None
    checks: list[Literal["identity", "hjm", "continuity", "sign_symmetry"]] = [
        "hjm",
        "continuity",
        "sign_symmetry",
    ]
    mask_fraction: float = Field(default=1e-3, gt=0, lt=1)


class RunConfig(_Strict):
    experiment: Literal[KINDS]  # type: ignore[valid-type]
    system: SystemConfig = SystemConfig()
    grid: GridConfig
    initial: Optional[InitialConfig] = None
    distribution: DistributionConfig = DistributionConfig()
    numerics: NumericsConfig
    output: OutputConfig = OutputConfig()
    assertions: list[Assertion] = []
    double_slit: Optional[DoubleSlitConfig] = None
    measurement: Optional[MeasurementConfig] = None
    position: Optional[PositionConfig] = None
    verify: Optional[VerifyConfig] = None

    @property
    def ndim(self) -> int:
        return len(self.grid.axes)

    @property
    def coords(self) -> list[str]:
        return self.system.coords or [f"q{i + 1}" for i in range(self.ndim)]

    def build_grid(self) -> Grid:
        return Grid(tuple(Axis(a.min, a.max, a.points, a.boundary) for a in self.grid.axes))

    def build_system(self) -> ClassicalSystem:
        s = self.system
        return ClassicalSystem.from_strings(
            self.coords,
            s.metric_inverse if isinstance(s.metric_inverse, list) else str(s.metric_inverse),
            str(s.scalar_potential),
            [str(v) for v in s.vector_potential] if s.vector_potential is not None else None,
        )


@dataclass
class Diagnostic:
    path: str
    line: int | None
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.path}: {self.message}"


def _locate(text: str, loc: tuple) -> int | None:
    """Best-effort line number of the JSON key at path ``loc``."""
    pos, line = 0, None
    for part in loc:
        if isinstance(part, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(part))).search(text, pos)
        if not m:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def _path(loc: tuple) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def _semantic(cfg: RunConfig, text: str) -> list[Diagnostic]:
    """Checks beyond the schema: expressions parse, metric symmetric, blocks present."""
    diags: list[Diagnostic] = []

    def add(loc: tuple, msg: str):
        diags.append(Diagnostic(_path(loc), _locate(text, loc), msg))

    coords = cfg.coords
    n = cfg.ndim
    if len(coords) != n:
        add(("system", "coords"), f"{len(coords)} coordinates for a {n}-axis grid")
        return diags
    s = cfg.system
    g = s.metric_inverse
    if isinstance(g, list):
        if len(g) != n or any(len(r) != n for r in g):
            add(("system", "metric_inverse"), f"must be a {n}x{n} matrix")
            return diags
        cells = [((i, j), str(g[i][j])) for i in range(n) for j in range(n)]
    else:
        cells = [((i, i), str(g)) for i in range(n)]
    parsed = {}
    for (i, j), e in cells:
        try:
            parsed[(i, j)] = parse_expression(e, coords)
        except ExpressionError as exc:
            add(("system", "metric_inverse"), f"entry ({i},{j}): {exc}")
    for (i, j), e in parsed.items():
        if i < j and (j, i) in parsed and e.ast != parsed[(j, i)].ast:
            add(("system", "metric_inverse"), f"not symmetric: entries ({i},{j}) and ({j},{i}) differ")
    others = [(("system", "scalar_potential"), str(s.scalar_potential))]
    if s.vector_potential is not None:
        if len(s.vector_potential) != n:
            add(("system", "vector_potential"), f"needs {n} entries")
        others += [(("system", "vector_potential"), str(v)) for v in s.vector_potential]
    if cfg.initial is not None:
        others += [(("initial", "amplitude"), cfg.initial.amplitude), (("initial", "phase"), cfg.initial.phase)]
    elif cfg.experiment != "double_slit":
        add(("initial",), f"experiment {cfg.experiment!r} needs an 'initial' block")
    if cfg.verify and cfg.verify.omega:
        others.append((("verify", "omega"), cfg.verify.omega))
    for loc, e in others:
        try:
            expr = parse_expression(e, coords)
        except ExpressionError as exc:
            add(loc, str(exc))
            continue
        if loc[0] == "system" and "t" in expr.variables():
            add(loc, "system expressions must be time-independent")
    kind = cfg.experiment
    need = {"measure_angular": "measurement", "measure_position": "position"}
    if kind in need and getattr(cfg, need[kind]) is None:
        add(("experiment",), f"experiment {kind!r} needs a {need[kind]!r} block")
    if kind == "measure_angular" and cfg.measurement is not None:
        total = sum(c.re ** 2 + c.im ** 2 for c in cfg.measurement.components)
        if abs(total - 1.0) > 1e-12:
            add(("measurement", "components"), f"sum of |c_l|^2 is {total!r}, expected 1")
    if kind == "verify" and cfg.verify is not None and "identity" in cfg.verify.checks and not cfg.verify.omega:
        add(("verify", "checks"), "identity check needs an 'omega' expression")
    if kind in ("double_slit", "measure_angular") and n != 1:
        add(("grid", "axes"), f"{kind} needs a 1D grid")
    if kind == "measure_position" and n != 2:
        add(("grid", "axes"), "measure_position needs a 2D (q1, q2) grid")
    num = cfg.numerics
    steps = num.t_final / num.dt
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        add(("numerics", "dt"), f"dt={num.dt!r} does not divide t_final={num.t_final!r}")
    try:
        cfg.build_grid()
    except ValueError as exc:
        add(("grid",), str(exc))
    return diags


def load(path) -> tuple[RunConfig | None, list[Diagnostic], str]:
    """Parse and validate a config file; returns (config, diagnostics, raw text)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        return None, [Diagnostic("<json>", exc.lineno, exc.msg)], text
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        diags = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            # drop pydantic's union/literal branch tags from the path
            loc = tuple(p for p in loc if isinstance(p, int) or not re.match(r"^(str|float|int|list\[.*\]|function-.*)$", str(p)))
            diags.append(Diagnostic(_path(loc), _locate(text, loc), err["msg"]))
        return None, diags, text
    return cfg, _semantic(cfg, text), text
