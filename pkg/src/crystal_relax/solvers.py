"""Elliptic solvers for the two legs of one time step.

Both nonlinear operators are written in the variational form

    <A u, phi> = sum over faces  w/2 * (G phi)^T C (G u)

where ``G`` reconstructs the full two-component gradient on each face family
and ``C`` is a per-face coefficient (scalar for the p-Laplacian, a 2x2 tensor
for the mobility).  That keeps every linear system symmetric and makes the
p-Laplacian the exact derivative of the discrete energy in ``model``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .grid import GridSpec, ScalarField, sparse_operators
from .model import MobilityField, ModelParams, energy_phi, flux_coeff, mobility_entries

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Base class for solver failures."""


class NonConvergence(SolverError):
    def __init__(self, iterations: int, residual: float, what: str = "cg"):
        super().__init__(f"{what} did not converge after {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual
        self.what = what


class Breakdown(SolverError):
    """Non-positive curvature in CG: the operator is not SPD."""


@dataclass(frozen=True)
class SolverConfig:
    cg_tol: float = 1e-10
    cg_max_iter: int = 20000
    picard_tol: float = 1e-9
    picard_max_iter: int = 200
    picard_damping: float = 1.0
    fp_tol: float = 1e-10
    fp_max_iter: int = 400
    fp_anderson: int = 10
    debug: bool = False

    def __post_init__(self):
        for name in ("cg_tol", "picard_tol", "fp_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("cg_max_iter", "picard_max_iter", "fp_max_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.fp_anderson < 0:
            raise ValueError("fp_anderson must be non-negative")
        if not 0 < self.picard_damping <= 1:
            raise ValueError("picard_damping must lie in (0, 1]")


@dataclass
class LinearOperatorSpec:
    """Symmetric positive definite operator on cell arrays."""

    grid: GridSpec
    apply: Callable[[np.ndarray], np.ndarray]
    diagonal: np.ndarray
    zero_order: float = 0.0
    matrix: sp.spmatrix | None = field(default=None, repr=False)

    @classmethod
    def from_matrix(cls, grid: GridSpec, A, zero_order: float = 0.0, check: bool = False) -> "LinearOperatorSpec":
        A = sp.csr_matrix(A)
        op = cls(grid, A.dot, A.diagonal().copy(), zero_order, A)
        if check:
            op.check_spd()
        return op

    def check_spd(self, trials: int = 3, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        for _ in range(trials):
            x = rng.standard_normal(self.grid.size)
            y = rng.standard_normal(self.grid.size)
            Ax, Ay = self.apply(x), self.apply(y)
            scale = np.linalg.norm(Ax) * np.linalg.norm(y) + np.linalg.norm(Ay) * np.linalg.norm(x)
            if abs(Ax @ y - x @ Ay) > 1e-12 * scale:
                raise ValueError("operator is not symmetric")
            if not x @ Ax > 0:
                raise ValueError("operator is not positive definite")


def cg_solve(A: LinearOperatorSpec, b, config: SolverConfig = SolverConfig(), x0=None, tol: float | None = None,
             info: dict | None = None):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``||A x - b|| <= tol ||b||`` (``tol`` defaults to
    ``config.cg_tol``).  Accepts and returns either flat arrays or
    ``ScalarField`` values.
    """
    as_field = isinstance(b, ScalarField)
    bv = b.flat if as_field else np.asarray(b, dtype=float).reshape(-1)
    tol = config.cg_tol if tol is None else tol
    x = np.zeros_like(bv) if x0 is None else np.array(x0.flat if isinstance(x0, ScalarField) else x0, dtype=float).reshape(-1)
    bnorm = np.linalg.norm(bv)
    target = tol * bnorm
    if bnorm == 0.0:
        x = np.zeros_like(bv)
        if info is not None:
            info["iterations"] = 0
        return ScalarField(A.grid, x) if as_field else x

    dinv = 1.0 / A.diagonal
    r = bv - A.apply(x)
    it = 0
    best = math.inf
    while True:
        rnorm = np.linalg.norm(r)
        if rnorm <= target:
            break
        if rnorm > 0.5 * best:
            # restarts no longer reduce the true residual: roundoff floor
            raise NonConvergence(it, rnorm / bnorm, what="cg (stagnated)")
        best = rnorm
        z = dinv * r
        p = z.copy()
        rz = r @ z
        # inner loop; the true residual is recomputed on exit to guard against drift
        while it < config.cg_max_iter:
            Ap = A.apply(p)
            curv = p @ Ap
            if not curv > 0:
                raise Breakdown(f"non-positive curvature {curv:.3e} at iteration {it}")
            alpha = rz / curv
            x += alpha * p
            r -= alpha * Ap
            it += 1
            if np.linalg.norm(r) <= 0.5 * target:
                break
            z = dinv * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        r = bv - A.apply(x)
        if it >= config.cg_max_iter and np.linalg.norm(r) > target:
            raise NonConvergence(it, np.linalg.norm(r) / bnorm)
    if info is not None:
        info["iterations"] = it
    return ScalarField(A.grid, x) if as_field else x


# --------------------------------------------------------------------------
# operator assembly


def face_gradients_flat(grid: GridSpec, u: np.ndarray):
    """Full face gradients as flat ``(n_xfaces, 2)`` and ``(n_yfaces, 2)`` arrays."""
    ops = sparse_operators(grid)
    gx = ops.Gx @ u
    gy = ops.Gy @ u
    nxf = ops.wx.size
    nyf = ops.wy.size
    return np.column_stack([gx[:nxf], gx[nxf:]]), np.column_stack([gy[:nyf], gy[nyf:]])


def scalar_coefficient_matrix(grid: GridSpec, ax: np.ndarray, ay: np.ndarray) -> sp.csr_matrix:
    """Matrix of ``-div(a grad .)`` with scalar face coefficients (no zero-order term)."""
    ops = sparse_operators(grid)
    hx = 0.5 * ops.wx * ax
    hy = 0.5 * ops.wy * ay
    K = ops.Gx.T @ sp.diags(np.concatenate([hx, hx])) @ ops.Gx + ops.Gy.T @ sp.diags(np.concatenate([hy, hy])) @ ops.Gy
    return (K / grid.cell_area).tocsr()


def _tensor_block(w, b11, b12, b22):
    return sp.bmat([[sp.diags(0.5 * w * b11), sp.diags(0.5 * w * b12)],
                    [sp.diags(0.5 * w * b12), sp.diags(0.5 * w * b22)]])


def mobility_part_matrix(M: MobilityField) -> sp.csr_matrix:
    """Matrix of ``-div(M grad .)``.

    The identity part of ``M`` uses the five-point Laplacian; only ``M - I`` goes
    through the reconstructed face gradients.  With ``q = 0`` the operator is
    exactly the five-point one.
    """
    grid = M.grid
    ops = sparse_operators(grid)
    bx = M.xf.reshape(-1, 3)
    by = M.yf.reshape(-1, 3)
    K = ops.Gx.T @ _tensor_block(ops.wx, bx[:, 0] - 1.0, bx[:, 1], bx[:, 2] - 1.0) @ ops.Gx
    K = K + ops.Gy.T @ _tensor_block(ops.wy, by[:, 0] - 1.0, by[:, 1], by[:, 2] - 1.0) @ ops.Gy
    return (ops.laplacian + K / grid.cell_area).tocsr()


def mobility_matrix(M: MobilityField, eps: float) -> sp.csr_matrix:
    """Matrix of ``-div((M + eps I) grad .) + eps``."""
    ops = sparse_operators(M.grid)
    n = M.grid.size
    return (mobility_part_matrix(M) + eps * ops.laplacian + eps * sp.identity(n)).tocsr()


def p_laplacian_coefficients(grid: GridSpec, u: np.ndarray, params: ModelParams):
    gxf, gyf = face_gradients_flat(grid, u)
    return flux_coeff(np.sum(gxf**2, axis=1), params), flux_coeff(np.sum(gyf**2, axis=1), params)


def p_laplacian_matrix(grid: GridSpec, u: np.ndarray, params: ModelParams) -> sp.csr_matrix:
    """Lagged matrix ``-div(F(|grad u|^2) grad .) + eps`` frozen at ``u``."""
    ax, ay = p_laplacian_coefficients(grid, u, params)
    return (scalar_coefficient_matrix(grid, ax, ay) + params.eps * sp.identity(grid.size)).tocsr()


def apply_p_laplacian_forward(u: ScalarField, params: ModelParams) -> ScalarField:
    """``-div(F_eps(|grad u|^2) grad u) + eps u``."""
    A = p_laplacian_matrix(u.grid, u.flat, params)
    return ScalarField(u.grid, A @ u.flat)


def apply_mobility_operator(M: MobilityField, v: ScalarField, params: ModelParams) -> ScalarField:
    return ScalarField(v.grid, mobility_matrix(M, params.eps) @ v.flat)


# --------------------------------------------------------------------------
# the two legs


def solve_mobility_system(M: MobilityField, rhs: ScalarField, params: ModelParams,
                          config: SolverConfig = SolverConfig()) -> ScalarField:
    """Solve ``-div((M + eps I) grad v) + eps v = rhs`` with Neumann walls."""
    A = LinearOperatorSpec.from_matrix(M.grid, mobility_matrix(M, params.eps), params.eps, check=config.debug)
    return cg_solve(A, rhs, config)


@dataclass
class PicardInfo:
    iterations: int = 0
    residual: float = math.inf
    update: float = math.inf
    energies: list = field(default_factory=list)
    dampings: list = field(default_factory=list)
    cg_iterations: int = 0


def _picard_functional(u: ScalarField, psi: ScalarField, params: ModelParams) -> float:
    uv = u.flat
    return energy_phi(u, params) + u.grid.cell_area * (0.5 * params.eps * math.fsum(uv * uv) - math.fsum(psi.flat * uv))


def _line_search(u: np.ndarray, d: np.ndarray, psi: np.ndarray, params: ModelParams, grid: GridSpec,
                 theta: float) -> float:
    """Approximate minimizer of the convex Picard functional along ``u + t d``.

    Uses the directional derivative ``<P(u + t d) - psi, d>``; stops once it has
    dropped to a tenth of its value at ``t = 0`` (or changed sign and been
    bracketed tightly).
    """

    def slope(t):
        w = u + t * d
        return (p_laplacian_matrix(grid, w, params) @ w - psi) @ d

    s0 = slope(0.0)
    if not s0 < 0:
        return 0.0
    lo, slo = 0.0, s0
    hi, shi = theta, slope(theta)
    if abs(shi) <= 0.1 * abs(s0):
        return hi
    while shi < 0 and hi < 64.0:
        lo, slo = hi, shi
        hi *= 2.0
        shi = slope(hi)
    if shi < 0:
        return hi
    t = hi
    for _ in range(30):
        # Illinois-type regula falsi on the monotone slope
        t = hi - shi * (hi - lo) / (shi - slo)
        st = slope(t)
        if abs(st) <= 0.1 * abs(s0):
            break
        if st < 0:
            lo, slo = t, st
            shi *= 0.5
        else:
            hi, shi = t, st
            slo *= 0.5
    return t


def picard_p_laplacian(psi: ScalarField, params: ModelParams, config: SolverConfig = SolverConfig(),
                       u0: ScalarField | None = None, info: PicardInfo | None = None) -> ScalarField:
    """Solve ``-div(F_eps(|grad u|^2) grad u) + eps u = psi`` by lagged coefficients.

    Each outer iteration freezes the coefficient at the current iterate and
    solves the resulting SPD problem with CG.  The step toward that solution is
    a descent direction for the convex functional
    ``Phi_eps(u) + eps/2 |u|^2 - <psi, u>``, and its length is set by a line
    search on that functional.  Plain undamped lagging stalls for ``p >= 3``
    (the error multiplier along the gradient is about ``2 - p``).
    """
    grid = psi.grid
    info = info if info is not None else PicardInfo()
    u = ScalarField.zeros(grid) if u0 is None else u0
    psinorm = np.linalg.norm(psi.flat)
    theta0 = config.picard_damping
    J = _picard_functional(u, psi, params)
    info.energies.append(J)
    inner_tol = config.cg_tol
    for m in range(1, config.picard_max_iter + 1):
        A = p_laplacian_matrix(grid, u.flat, params)
        op = LinearOperatorSpec.from_matrix(grid, A, params.eps, check=config.debug)
        cg_info = {}
        u_lin = cg_solve(op, psi.flat, config, x0=u.flat, tol=inner_tol, info=cg_info)
        info.cg_iterations += cg_info["iterations"]
        d = u_lin - u.flat
        theta = _line_search(u.flat, d, psi.flat, params, grid, theta0)
        u = ScalarField(grid, u.flat + theta * d)
        J_new = _picard_functional(u, psi, params)
        if config.debug and J_new > J + 1e-12 * max(abs(J), 1.0):
            log.warning("picard functional increased: %.6e -> %.6e", J, J_new)
        J = J_new
        info.dampings.append(theta)
        info.energies.append(J)
        unorm = np.linalg.norm(u_lin)
        info.update = np.linalg.norm(d) / unorm if unorm > 0 else np.linalg.norm(d)
        info.residual = np.linalg.norm(A @ u.flat - psi.flat) if theta == 0 else np.linalg.norm(
            apply_p_laplacian_forward(u, params).flat - psi.flat)
        info.iterations = m
        if info.update <= 10 * config.picard_tol:
            inner_tol = min(config.cg_tol, config.picard_tol / 10)
        # strong monotonicity (constant eps) bounds the error by |r| / eps
        new_norm = np.linalg.norm(u.flat)
        bound = info.residual / (params.eps * new_norm) if new_norm > 0 else info.residual
        if min(info.update, bound) <= config.picard_tol and info.residual <= 10 * config.cg_tol * psinorm:
            return u
    raise NonConvergence(info.iterations, info.residual, what="picard")
