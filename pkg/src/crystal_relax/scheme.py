"""Rothe time stepping for the split second-order system.

Each step solves, for ``(u, v)`` with Neumann walls,

    (u - w)/dt - div((M(grad u) + eps I) grad v) + eps v = 0
    -div(F_eps(|grad u|^2) grad u) + eps u = v

where ``w`` is the previous height.  The step is the fixed point of
``map_B`` (p-Laplacian solve followed by the mobility solve), but iterating
that map directly amplifies the constant mode by ``1/(dt eps^2)``.  Instead the
nonlinear coefficients are lagged at the current iterate and the resulting
linear coupled system is solved in one piece; at convergence the coefficients
match the solution, so the pair is the same fixed point.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import GridSpec, ScalarField, face_weights, gradient, integrate, write_field_csv
from .model import MobilityField, ModelParams, energy_phi
from .solvers import (
    SolverConfig,
    SolverError,
    mobility_matrix,
    mobility_part_matrix,
    p_laplacian_matrix,
    picard_p_laplacian,
    solve_mobility_system,
)

log = logging.getLogger(__name__)

DIAG_COLUMNS = ("k", "t", "lyapunov", "diss_mob", "diss_grad", "diss_mass", "mass", "fp_iters", "fp_residual")


class FixedPointNonConvergence(SolverError):
    def __init__(self, history: list[float], step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        last = history[-1] if history else math.nan
        super().__init__(f"fixed-point iteration did not converge{where} after {len(history)} iterations "
                         f"(residual {last:.3e})")
        self.history = history
        self.step = step


class MapBError(SolverError):
    def __init__(self, leg: str, cause: Exception):
        super().__init__(f"{leg} leg failed: {cause}")
        self.leg = leg
        self.cause = cause


class StepFailure(SolverError):
    """A run stopped at ``step``; ``trajectory`` holds the accepted states."""

    def __init__(self, step: int, cause: Exception, trajectory: "Trajectory"):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause
        self.trajectory = trajectory


@dataclass(frozen=True)
class StepDiagnostics:
    lyapunov: float
    diss_mob: float
    diss_grad: float
    diss_mass: float
    mass: float
    fp_residual: float = 0.0
    fp_iters: int = 0
    residual_history: tuple = ()

    @property
    def dissipation(self) -> float:
        return self.diss_mob + self.diss_grad + self.diss_mass


@dataclass(frozen=True, eq=False)
class StepState:
    k: int
    t: float
    u: ScalarField
    v: ScalarField
    iterations: int
    diagnostics: StepDiagnostics


@dataclass(eq=False)
class Trajectory:
    params: ModelParams
    T: float
    j: int
    states: list = field(default_factory=list)

    @property
    def grid(self) -> GridSpec:
        return self.states[0].u.grid

    @property
    def dt(self) -> float:
        return self.params.dt

    @property
    def u0(self) -> ScalarField:
        return self.states[0].u

    @property
    def complete(self) -> bool:
        return len(self.states) == self.j + 1


# --------------------------------------------------------------------------
# diagnostics


def lyapunov(u: ScalarField, params: ModelParams) -> float:
    """``Phi_eps(u) + (eps/2) int u^2``."""
    return energy_phi(u, params) + 0.5 * params.eps * u.grid.cell_area * math.fsum(u.flat * u.flat)


def step_diagnostics(u: ScalarField, v: ScalarField, params: ModelParams, fp_residual: float = 0.0,
                     fp_iters: int = 0, history=()) -> StepDiagnostics:
    grid = u.grid
    a = grid.cell_area
    M = MobilityField.from_height(u, params.q)
    vv = v.flat
    q_mob = a * math.fsum(vv * (mobility_part_matrix(M) @ vv))
    G = gradient(v)
    wx, wy = face_weights(grid)
    q_grad = math.fsum((wx * G.x**2).ravel()) + math.fsum((wy * G.y**2).ravel())
    q_mass = a * math.fsum(vv * vv)
    return StepDiagnostics(
        lyapunov=lyapunov(u, params),
        diss_mob=params.dt * q_mob,
        diss_grad=params.dt * params.eps * q_grad,
        diss_mass=params.dt * params.eps * q_mass,
        mass=integrate(u),
        fp_residual=fp_residual,
        fp_iters=fp_iters,
        residual_history=tuple(history),
    )


def step_residuals(u: ScalarField, v: ScalarField, w: ScalarField, params: ModelParams):
    """Relative residuals of the two discrete equations at ``(u, v)``.

    The mobility equation is multiplied through by ``dt``; each residual is
    a normwise backward error, ``|r| / | |K| |x| + |b| |``.
    """
    A = mobility_matrix(MobilityField.from_height(u, params.q), params.eps)
    P = p_laplacian_matrix(u.grid, u.flat, params)
    return _residuals(u.flat, v.flat, w.flat, A, P, params.dt)


def _residuals(u, v, w, A, P, dt):
    # normwise backward errors: |r| / | |K| |x| + |b| |
    r1 = u - w + dt * (A @ v)
    r2 = P @ u - v
    s1 = np.linalg.norm(np.abs(u) + np.abs(w) + dt * (abs(A) @ np.abs(v)))
    s2 = np.linalg.norm(abs(P) @ np.abs(u) + np.abs(v))
    e1 = np.linalg.norm(r1) / s1 if s1 > 0 else np.linalg.norm(r1)
    e2 = np.linalg.norm(r2) / s2 if s2 > 0 else np.linalg.norm(r2)
    return e1, e2


# --------------------------------------------------------------------------
# the map and the step


def map_B(psi: ScalarField, w: ScalarField, params: ModelParams, config: SolverConfig = SolverConfig()):
    """One application of the two-leg map: ``psi -> u -> v``.

    ``u`` solves the regularized p-Laplacian problem with data ``psi``; ``v``
    solves the mobility problem with data ``(w - u)/dt`` and ``M = M(grad u)``.
    """
    try:
        u = picard_p_laplacian(psi, params, config)
    except SolverError as exc:
        raise MapBError("p-laplacian", exc) from exc
    rhs = ScalarField(w.grid, (w.values - u.values) / params.dt)
    try:
        v = solve_mobility_system(MobilityField.from_height(u, params.q), rhs, params, config)
    except SolverError as exc:
        raise MapBError("mobility", exc) from exc
    return u, v


def _solve_block(A, P, w, dt, n):
    # [[I, dt A], [P, -I]] [u; v] = [w; 0], with two rounds of iterative refinement
    K = sp.bmat([[sp.identity(n), dt * A], [P, -sp.identity(n)]], format="csc")
    lu = spla.splu(K)
    rhs = np.concatenate([w, np.zeros(n)])
    x = lu.solve(rhs)
    for _ in range(2):
        x += lu.solve(rhs - K @ x)
    return x[:n], x[n:]


class _Anderson:
    """Anderson mixing for ``x -> x + omega (g(x) - x)`` with a short memory."""

    def __init__(self, depth: int):
        self.depth = depth
        self.reset()

    def reset(self):
        self.dx, self.df = [], []
        self.x_prev = self.f_prev = None

    def step(self, x, f, omega):
        if self.x_prev is not None and self.depth > 0:
            self.dx.append(x - self.x_prev)
            self.df.append(f - self.f_prev)
            if len(self.dx) > self.depth:
                self.dx.pop(0)
                self.df.pop(0)
        self.x_prev, self.f_prev = x, f
        if not self.dx:
            return x + omega * f
        DF = np.column_stack(self.df)
        DX = np.column_stack(self.dx)
        gamma = np.linalg.lstsq(DF, f, rcond=None)[0]
        return x + omega * f - (DX + omega * DF) @ gamma


def fixed_point_step(u_prev: ScalarField, params: ModelParams, config: SolverConfig = SolverConfig(),
                     v_guess: ScalarField | None = None, k: int = 1, t: float | None = None) -> StepState:
    """Advance one step from ``u_prev``.

    Lagged-coefficient iteration: freeze ``M(grad u^m)`` and ``F_eps(|grad u^m|^2)``,
    solve the linear coupled system for ``(u, v)``, relax with factor ``omega``
    and accelerate with Anderson mixing over the last ``config.fp_anderson``
    iterates.  Lagging the one-Laplacian term contracts slowly and lagging the
    ``p > 2`` term oscillates, hence both devices.  ``omega`` starts at
    ``min(1, 1/(p-1))``.  A mixed iterate whose residual more than doubles is
    replaced by the plain relaxed one and the history is dropped; if that
    also increases the residual ``omega`` halves (floor 1/16), and it is
    restored after two successful iterations.  Converged when both relative
    residuals are below ``config.fp_tol``.
    """
    grid = u_prev.grid
    n = grid.size
    dt = params.dt
    w = u_prev.flat

    def frozen(x):
        # coefficients and backward error at the pair x = [u; v]
        A = mobility_matrix(MobilityField.from_height(ScalarField(grid, x[:n]), params.q), params.eps)
        P = p_laplacian_matrix(grid, x[:n], params)
        return A, P, max(_residuals(x[:n], x[n:], w, A, P, dt))

    v0 = np.zeros(n) if v_guess is None else v_guess.flat
    x = np.concatenate([w, v0])
    A, P, res = frozen(x)
    history = []
    omega0 = min(1.0, 1.0 / (params.p - 1.0))
    omega, good = omega0, 0
    mixer = _Anderson(config.fp_anderson)
    if res <= config.fp_tol:
        history.append(res)
    else:
        for _ in range(config.fp_max_iter):
            f = np.concatenate(_solve_block(A, P, w, dt, n)) - x
            x_new = mixer.step(x, f, omega)
            A_new, P_new, res_new = frozen(x_new)
            if not res_new <= 2.0 * res:
                # the mixed iterate went astray: plain relaxed step, fresh history
                mixer.reset()
                x_new = x + omega * f
                A_new, P_new, res_new = frozen(x_new)
                if res_new > res:
                    omega, good = max(omega * 0.5, 1.0 / 16), 0
                elif omega < omega0:
                    good += 1
                    if good >= 2:
                        omega, good = omega0, 0
            history.append(res_new)
            if not math.isfinite(res_new):
                raise FixedPointNonConvergence(history, k)
            x, A, P, res = x_new, A_new, P_new, res_new
            if res <= config.fp_tol:
                break
        else:
            raise FixedPointNonConvergence(history, k)
    u, v = x[:n], x[n:]
    uf, vf = ScalarField(grid, u), ScalarField(grid, v)
    diag = step_diagnostics(uf, vf, params, res, len(history), history)
    return StepState(k, k * dt if t is None else t, uf, vf, len(history), diag)


def initial_state(u0: ScalarField, params: ModelParams) -> StepState:
    """State at ``t = 0``; ``v_0`` is the regularized chemical potential of ``u_0``."""
    v0 = ScalarField(u0.grid, p_laplacian_matrix(u0.grid, u0.flat, params) @ u0.flat)
    d = step_diagnostics(u0, v0, params)
    d = StepDiagnostics(d.lyapunov, 0.0, 0.0, 0.0, d.mass)
    return StepState(0, 0.0, u0, v0, 0, d)


def advance(u0: ScalarField, T: float, j: int, params: ModelParams, config: SolverConfig = SolverConfig(),
            callback=None) -> Trajectory:
    """Run ``j`` steps of size ``T/j`` from ``u0``.

    ``params.dt`` (and ``eps`` in coupled mode) is replaced by ``T/j``.  On a
    failed step, raises ``StepFailure`` carrying the partial trajectory.
    """
    if j < 1:
        raise ValueError("j must be at least 1")
    if not T > 0:
        raise ValueError("T must be positive")
    params = params.with_dt(T / j)
    traj = Trajectory(params, T, j, [initial_state(u0, params)])
    for k in range(1, j + 1):
        prev = traj.states[-1]
        try:
            state = fixed_point_step(prev.u, params, config, v_guess=prev.v if k > 1 else None, k=k,
                                     t=T if k == j else k * params.dt)
        except SolverError as exc:
            raise StepFailure(k, exc, traj) from exc
        traj.states.append(state)
        if callback is not None:
            callback(state)
    return traj


# --------------------------------------------------------------------------
# interpolants


def _locate(traj: Trajectory, t: float) -> tuple[int, float]:
    if not (0.0 <= t <= traj.T):
        raise ValueError(f"t={t} outside [0, {traj.T}]")
    if t == 0.0:
        return 0, 0.0
    s = t / traj.dt
    k = int(math.ceil(s - 1e-9 * max(1.0, s)))
    k = min(max(k, 1), traj.j)
    if k >= len(traj.states):
        raise ValueError(f"trajectory has no state for t={t}")
    lam = (t - (k - 1) * traj.dt) / traj.dt
    return k, min(max(lam, 0.0), 1.0)


def eval_tilde_u(traj: Trajectory, t: float) -> ScalarField:
    """Piecewise-linear-in-time interpolant of the heights."""
    k, lam = _locate(traj, t)
    if k == 0:
        return traj.states[0].u
    if lam == 1.0:
        return traj.states[k].u
    a, b = traj.states[k - 1].u, traj.states[k].u
    return ScalarField(a.grid, lam * b.values + (1.0 - lam) * a.values)


def eval_bar_u(traj: Trajectory, t: float) -> ScalarField:
    """Piecewise-constant interpolant, right endpoint value on each step."""
    return traj.states[_locate(traj, t)[0]].u


def eval_bar_v(traj: Trajectory, t: float) -> ScalarField:
    return traj.states[_locate(traj, t)[0]].v


# --------------------------------------------------------------------------
# reports


@dataclass
class MassReport:
    violations: list
    relative: list
    factor: float

    @property
    def max_violation(self) -> float:
        return max(self.violations, default=0.0)

    @property
    def max_relative(self) -> float:
        return max(self.relative, default=0.0)


def mass_law_check(traj: Trajectory) -> MassReport:
    """Per-step ``|int u_k (1 + dt eps^2) - int u_{k-1}|``.

    In coupled mode the factor is ``1 + dt^3``.  ``relative`` divides by
    ``|int u_0|`` (or leaves the absolute value if that is zero).
    """
    p = traj.params
    factor = 1.0 + p.dt * p.eps**2
    m0 = abs(traj.states[0].diagnostics.mass)
    viol, rel = [], []
    for prev, cur in zip(traj.states, traj.states[1:]):
        d = abs(cur.diagnostics.mass * factor - prev.diagnostics.mass)
        viol.append(d)
        rel.append(d / m0 if m0 > 0 else d)
    return MassReport(viol, rel, factor)


@dataclass
class LedgerReport:
    slacks: list
    tol: float
    flagged: list

    @property
    def ok(self) -> bool:
        return not self.flagged

    @property
    def max_slack(self) -> float:
        return max(self.slacks, default=0.0)


def lyapunov_ledger(traj: Trajectory, tol: float | None = None) -> LedgerReport:
    """Per-step slack ``L(u_k) + dissipation_k - L(u_{k-1})``; should be <= 0.

    ``tol`` defaults to ``1e-7 * max(L(u_0), tiny)``.
    """
    L0 = traj.states[0].diagnostics.lyapunov
    tol = 1e-7 * max(abs(L0), 1e-300) if tol is None else tol
    slacks = []
    for prev, cur in zip(traj.states, traj.states[1:]):
        d = cur.diagnostics
        slacks.append(d.lyapunov + d.dissipation - prev.diagnostics.lyapunov)
    flagged = [k + 1 for k, s in enumerate(slacks) if s > tol]
    return LedgerReport(slacks, tol, flagged)


def refinement_cauchy(traj_a: Trajectory, traj_b: Trajectory, p: float) -> float:
    """Space-time ``L^p`` norm of the difference of the piecewise-constant gradients.

    Integrates exactly over the finer step grid (both interpolants are constant
    on each fine step).  ``traj_b.j`` must be a multiple of ``traj_a.j``.
    """
    if traj_a.j > traj_b.j:
        traj_a, traj_b = traj_b, traj_a
    if traj_a.grid != traj_b.grid:
        raise ValueError("trajectories live on different grids")
    if traj_b.j % traj_a.j:
        raise ValueError("step counts must be nested")
    if traj_a.T != traj_b.T or not np.array_equal(traj_a.u0.values, traj_b.u0.values):
        raise ValueError("trajectories differ in T or initial data")
    if not (traj_a.complete and traj_b.complete):
        raise ValueError("trajectories are incomplete")
    if not p > 1:
        raise ValueError("p must exceed 1")
    r = traj_b.j // traj_a.j
    wx, wy = face_weights(traj_a.grid)
    dt = traj_b.dt
    total = []
    grads_a = {}
    for n in range(1, traj_b.j + 1):
        k = (n - 1) // r + 1
        if k not in grads_a:
            grads_a[k] = gradient(traj_a.states[k].u)
        Ga, Gb = grads_a[k], gradient(traj_b.states[n].u)
        total.append(dt * (math.fsum((wx * np.abs(Gb.x - Ga.x) ** p).ravel())
                           + math.fsum((wy * np.abs(Gb.y - Ga.y) ** p).ravel())))
    return math.fsum(total) ** (1.0 / p)


# --------------------------------------------------------------------------
# export


def diag_rows(traj: Trajectory):
    for s in traj.states:
        d = s.diagnostics
        yield (s.k, s.t, d.lyapunov, d.diss_mob, d.diss_grad, d.diss_mass, d.mass, d.fp_iters, d.fp_residual)


def write_diag_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(DIAG_COLUMNS)
        for row in diag_rows(traj):
            wr.writerow([row[0], repr(float(row[1]))] + [repr(float(x)) for x in row[2:7]] + [row[7], repr(float(row[8]))])


def snapshot_steps(j: int, every: int | None = None) -> list[int]:
    """First, last and every ``every``-th step (default ``ceil(j/10)``)."""
    every = every or max(1, math.ceil(j / 10))
    return sorted(set([0, j] + list(range(0, j + 1, every))))


def export_trajectory(traj: Trajectory, outdir, every: int | None = None, snapshots: bool = True) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_diag_csv(traj, outdir / "diag.csv")
    if snapshots:
        for k in snapshot_steps(traj.j, every):
            if k < len(traj.states):
                s = traj.states[k]
                write_field_csv(s.u, outdir / f"u_{k:04d}.csv")
                write_field_csv(s.v, outdir / f"v_{k:04d}.csv")
    return outdir
