"""Plain-text run configuration and initial-data presets.

A config file holds ``key = value`` lines; ``#`` starts a comment.  Unknown
or repeated keys are errors, and every value is validated against the
constraints of the object it feeds (grid, model parameters, solver).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .grid import GridSpec, ScalarField, read_field_csv
from .model import EPS_MODES, ModelParams
from .solvers import SolverConfig

INIT_PRESETS = ("constant", "gaussian-bump", "cone", "random-smooth", "file")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is set for parse errors."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


_FIELD_NAMES = frozenset()  # filled in below the class


@dataclass(frozen=True)
class RunConfig:
    # grid
    nx: int = 32
    ny: int = 32
    hx: float = 0.125
    hy: float = 0.125
    # model
    p: float = 3.0
    beta: float = 1.0
    q: float = 1.0
    eps_mode: str = "coupled"
    eps: float | None = None  # None: follows dt (required in coupled mode)
    # time
    T: float = 0.5
    j: int = 50
    # solver
    cg_tol: float = 1e-10
    cg_max_iter: int = 20000
    picard_tol: float = 1e-9
    picard_max_iter: int = 200
    fp_tol: float = 1e-10
    fp_max_iter: int = 400
    fp_anderson: int = 10
    # initial data
    init: str = "gaussian-bump"
    init_x0: float | None = None  # None: domain centre
    init_y0: float | None = None
    init_sigma: float = 0.6
    init_amp: float = 1.0
    init_c: float = 0.0
    init_slope: float = 1.0
    init_seed: int = 0
    init_cutoff: int = 4
    init_file: str | None = None
    # output
    output: str = "run"
    snapshot_every: int | None = None  # None: ceil(j/10)
    snapshots: bool = True
    figures: bool = True
    # invariant checks that decide exit code 3
    ledger_rtol: float = 1e-7
    mass_rtol: float = 1e-8

    def __post_init__(self):
        try:
            self.grid()
            self.params()
            self.solver()
        except ValueError as exc:
            # underlying messages lead with the offending field name
            name = str(exc).split(" ", 1)[0]
            raise ConfigError(str(exc), field=name if name in _FIELD_NAMES else None) from exc
        if self.j < 1:
            raise ConfigError("j must be at least 1", field="j")
        if not self.T > 0:
            raise ConfigError("T must be positive", field="T")
        if self.init not in INIT_PRESETS:
            raise ConfigError(f"init must be one of {INIT_PRESETS}", field="init")
        if self.init == "file" and not self.init_file:
            raise ConfigError("init_file is required when init = file", field="init_file")
        if not self.init_sigma > 0:
            raise ConfigError("init_sigma must be positive", field="init_sigma")
        if self.init_cutoff < 0:
            raise ConfigError("init_cutoff must be non-negative", field="init_cutoff")
        if self.snapshot_every is not None and self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be at least 1", field="snapshot_every")
        if not (self.ledger_rtol > 0 and self.mass_rtol > 0):
            raise ConfigError("ledger_rtol and mass_rtol must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.j

    def grid(self) -> GridSpec:
        return GridSpec(self.nx, self.ny, self.hx, self.hy)

    def params(self) -> ModelParams:
        if self.eps_mode not in EPS_MODES:
            raise ValueError(f"eps_mode must be one of {EPS_MODES}")
        if self.eps_mode == "coupled":
            if self.eps is not None and not math.isclose(self.eps, self.dt, rel_tol=1e-15):
                raise ValueError("eps must equal dt = T/j in coupled mode (or be auto)")
            return ModelParams.coupled(self.p, self.beta, self.q, self.dt)
        if self.eps is None:
            raise ValueError("eps must be set when eps_mode = fixed")
        return ModelParams(self.p, self.beta, self.q, self.eps, self.dt, "fixed")

    def solver(self) -> SolverConfig:
        return SolverConfig(cg_tol=self.cg_tol, cg_max_iter=self.cg_max_iter, picard_tol=self.picard_tol,
                            picard_max_iter=self.picard_max_iter, fp_tol=self.fp_tol, fp_max_iter=self.fp_max_iter,
                            fp_anderson=self.fp_anderson)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_FIELD_NAMES = frozenset(_FIELDS)
_AUTO = "auto"


def _field_kind(name: str) -> type:
    default = _FIELDS[name].default
    ann = str(_FIELDS[name].type)
    if ann.startswith("bool"):
        return bool
    if ann.startswith("int"):
        return int
    if ann.startswith("float"):
        return float
    return str if default is None or isinstance(default, str) else type(default)


def _optional(name: str) -> bool:
    return "None" in str(_FIELDS[name].type)


def _convert(name: str, raw: str):
    kind = _field_kind(name)
    if _optional(name) and raw.lower() in (_AUTO, "none", ""):
        return None
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{name} expects a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{name} expects an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{name} expects a number, got {raw!r}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` text on top of ``base`` (defaults if omitted)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", line=lineno, field=key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, field=key)
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(str(exc), line=lineno, field=key) from None
    base = base or RunConfig()
    return dataclasses.replace(base, **values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _format_value(v) -> str:
    if v is None:
        return _AUTO
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_SECTIONS = (
    ("grid", ("nx", "ny", "hx", "hy")),
    ("model", ("p", "beta", "q", "eps_mode", "eps")),
    ("time", ("T", "j")),
    ("solver", ("cg_tol", "cg_max_iter", "picard_tol", "picard_max_iter", "fp_tol", "fp_max_iter", "fp_anderson")),
    ("initial data", ("init", "init_x0", "init_y0", "init_sigma", "init_amp", "init_c", "init_slope",
                      "init_seed", "init_cutoff", "init_file")),
    ("output", ("output", "snapshot_every", "snapshots", "figures")),
    ("invariant checks", ("ledger_rtol", "mass_rtol")),
)


def format_config(cfg: RunConfig) -> str:
    """Every key, grouped by section; ``parse_config`` inverts it exactly."""
    out = []
    for title, keys in _SECTIONS:
        out.append(f"# {title}")
        out.extend(f"{k} = {_format_value(getattr(cfg, k))}" for k in keys)
        out.append("")
    return "\n".join(out)


# --------------------------------------------------------------------------
# initial data


def make_initial_data(cfg: RunConfig, grid: GridSpec | None = None) -> ScalarField:
    """Initial height for the preset named by ``cfg.init``.

    ``constant``       ``init_c`` everywhere.
    ``gaussian-bump``  ``amp exp(-r^2 / (2 sigma^2))`` around ``(x0, y0)``.
    ``cone``           truncated cone ``max(amp - slope r, 0)``; flat outside.
    ``random-smooth``  Neumann cosine modes up to ``cutoff`` with decaying
                       Gaussian amplitudes from ``seed``.
    ``file``           snapshot CSV; its shape must match the grid.
    """
    grid = grid or cfg.grid()
    X, Y = grid.cell_centers()
    Lx, Ly = grid.extent
    x0 = 0.5 * Lx if cfg.init_x0 is None else cfg.init_x0
    y0 = 0.5 * Ly if cfg.init_y0 is None else cfg.init_y0
    r = np.hypot(X - x0, Y - y0)
    if cfg.init == "constant":
        return ScalarField.constant(grid, cfg.init_c)
    if cfg.init == "gaussian-bump":
        return ScalarField(grid, cfg.init_amp * np.exp(-(r * r) / (2.0 * cfg.init_sigma**2)))
    if cfg.init == "cone":
        return ScalarField(grid, np.maximum(cfg.init_amp - cfg.init_slope * r, 0.0))
    if cfg.init == "random-smooth":
        rng = np.random.default_rng(cfg.init_seed)
        u = np.zeros(grid.shape)
        for k in range(cfg.init_cutoff + 1):
            for l in range(cfg.init_cutoff + 1):
                a = rng.standard_normal() / (1.0 + k * k + l * l)
                u += a * np.cos(k * np.pi * X / Lx) * np.cos(l * np.pi * Y / Ly)
        return ScalarField(grid, cfg.init_amp * u)
    try:
        return read_field_csv(cfg.init_file, grid)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot use init_file: {exc}", field="init_file") from exc
