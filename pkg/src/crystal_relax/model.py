"""Model coefficients: mobility tensor, regularized flux, surface energies."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .grid import GridSpec, ScalarField, face_weights, full_face_gradients, gradient

EPS_MODES = ("coupled", "fixed")


@dataclass(frozen=True)
class ModelParams:
    """Exponent ``p``, one-Laplacian weight ``beta``, mobility strength ``q``,
    regularization ``eps`` and time step ``dt``.

    In ``coupled`` mode (the default) the regularization equals the time step.
    ``beta = 0`` is accepted for pure p-Laplacian runs.
    """

    p: float
    beta: float
    q: float
    eps: float
    dt: float
    eps_mode: str = "coupled"

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if not self.q >= 0:
            raise ValueError("q must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.eps_mode not in EPS_MODES:
            raise ValueError(f"eps_mode must be one of {EPS_MODES}")
        if self.eps_mode == "coupled" and self.eps != self.dt:
            raise ValueError("eps must equal dt in coupled mode")

    @classmethod
    def coupled(cls, p: float, beta: float, q: float, dt: float) -> "ModelParams":
        return cls(p, beta, q, dt, dt, "coupled")

    def with_dt(self, dt: float) -> "ModelParams":
        """Same model at a new time step; eps follows dt in coupled mode."""
        if self.eps_mode == "coupled":
            return replace(self, dt=dt, eps=dt)
        return replace(self, dt=dt)


# --------------------------------------------------------------------------
# mobility


def mobility_entries(gx, gy, q: float):
    """Vectorized mobility entries ``(m11, m12, m22)`` for gradient samples.

    Facets (exactly zero gradient) get the identity.
    """
    gx = np.asarray(gx, dtype=float)
    gy = np.asarray(gy, dtype=float)
    g2 = gx * gx + gy * gy
    g = np.sqrt(g2)
    # 1/(1+q|g|) - 1 without cancellation
    c = -q * g / (1.0 + q * g)
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(g2 > 0, c / np.where(g2 > 0, g2, 1.0), 0.0)
    return 1.0 + f * gx * gx, f * gx * gy, 1.0 + f * gy * gy


def mobility_at(gx: float, gy: float, q: float) -> np.ndarray:
    """2x2 mobility tensor for the surface gradient ``(gx, gy)``."""
    if not q >= 0:
        raise ValueError("q must be non-negative")
    m11, m12, m22 = (float(m) for m in mobility_entries(gx, gy, q))
    return np.array([[m11, m12], [m12, m22]])


def mobility_quadratic_form(M, xi) -> float:
    M = np.asarray(M, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return float(xi @ M @ xi)


@dataclass(frozen=True, eq=False)
class MobilityField:
    """Per-face mobility entries ``(m11, m12, m22)`` stacked on the last axis.

    ``xf`` has shape ``(ny, nx+1, 3)``, ``yf`` shape ``(ny+1, nx, 3)``.
    """

    grid: GridSpec
    q: float
    xf: np.ndarray
    yf: np.ndarray

    @classmethod
    def from_height(cls, u: ScalarField, q: float) -> "MobilityField":
        gxf, gyf = full_face_gradients(u)
        return cls.from_face_gradients(u.grid, gxf, gyf, q)

    @classmethod
    def from_face_gradients(cls, grid, gxf, gyf, q) -> "MobilityField":
        xf = np.stack(mobility_entries(gxf[..., 0], gxf[..., 1], q), axis=-1)
        yf = np.stack(mobility_entries(gyf[..., 0], gyf[..., 1], q), axis=-1)
        return cls(grid, q, xf, yf)

    @classmethod
    def identity(cls, grid: GridSpec) -> "MobilityField":
        xf = np.zeros((grid.ny, grid.nx + 1, 3))
        yf = np.zeros((grid.ny + 1, grid.nx, 3))
        xf[..., 0] = xf[..., 2] = 1.0
        yf[..., 0] = yf[..., 2] = 1.0
        return cls(grid, 0.0, xf, yf)


# --------------------------------------------------------------------------
# flux coefficient and energies


def flux_coeff(s, params: ModelParams):
    """Regularized flux coefficient ``(s+eps)^((p-2)/2) + beta (s+eps)^(-1/2)``."""
    t = np.asarray(s, dtype=float) + params.eps
    out = t ** ((params.p - 2.0) / 2.0) + params.beta / np.sqrt(t)
    return float(out) if out.ndim == 0 else out


def energy_density(s, p: float, beta: float, eps: float):
    """Potential whose derivative in the gradient is ``flux_coeff(|z|^2) z``."""
    t = np.asarray(s, dtype=float) + eps
    return t ** (p / 2.0) / p + beta * np.sqrt(t)


def _face_quadrature(u: ScalarField, density) -> float:
    # both face families carry the full gradient, so each is weighted by one half
    wx, wy = face_weights(u.grid)
    gxf, gyf = full_face_gradients(u)
    sx = np.sum(gxf * gxf, axis=-1)
    sy = np.sum(gyf * gyf, axis=-1)
    return 0.5 * (math.fsum((wx * density(sx)).ravel()) + math.fsum((wy * density(sy)).ravel()))


def energy_phi(u: ScalarField, params: ModelParams) -> float:
    """Regularized energy ``(1/p) int (|grad u|^2+eps)^(p/2) + beta int (|grad u|^2+eps)^(1/2)``."""
    return _face_quadrature(u, lambda s: energy_density(s, params.p, params.beta, params.eps))


def energy_G(u: ScalarField, params: ModelParams) -> float:
    """Unregularized surface energy ``(1/p) int |grad u|^p + beta int |grad u|``."""
    p, beta = params.p, params.beta
    return _face_quadrature(u, lambda s: s ** (p / 2.0) / p + beta * np.sqrt(s))


def dissipation_integral(v: ScalarField, u: ScalarField, params: ModelParams) -> float:
    """Face quadrature of ``|grad v|^2 / (1 + q |grad u|)``.

    ``grad v`` is the face-normal difference (as in ``lp_norm_faces``); the
    magnitude of ``grad u`` uses the full reconstructed gradient on the face.
    """
    wx, wy = face_weights(u.grid)
    Gv = gradient(v)
    gxf, gyf = full_face_gradients(u)
    mx = 1.0 + params.q * np.sqrt(np.sum(gxf * gxf, axis=-1))
    my = 1.0 + params.q * np.sqrt(np.sum(gyf * gyf, axis=-1))
    return math.fsum((wx * Gv.x**2 / mx).ravel()) + math.fsum((wy * Gv.y**2 / my).ravel())
