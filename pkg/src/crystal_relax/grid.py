"""Uniform rectangular grids with a staggered (MAC) layout.

Scalars live at cell centres, stored as ``(ny, nx)`` arrays indexed ``[j, i]``.
Vector quantities live on faces: x-components on the ``(ny, nx + 1)`` vertical
faces and y-components on the ``(ny + 1, nx)`` horizontal faces.  Homogeneous
Neumann conditions are imposed by mirror ghosts, which is the same thing as
forcing every boundary-face component to zero.  With that convention
``divergence`` is the exact negative adjoint of ``gradient`` under the
cell and face inner products, so discrete integration by parts holds to
roundoff.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    hx: float
    hy: float

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("nx and ny must be integers")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("nx and ny must be at least 2")
        if not (self.hx > 0 and self.hy > 0) or not (math.isfinite(self.hx) and math.isfinite(self.hy)):
            raise ValueError("hx and hy must be positive and finite")

    @classmethod
    def unit_square(cls, n: int) -> "GridSpec":
        return cls(n, n, 1.0 / n, 1.0 / n)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def area(self) -> float:
        return self.nx * self.hx * self.ny * self.hy

    @property
    def extent(self) -> tuple[float, float]:
        return (self.nx * self.hx, self.ny * self.hy)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` arrays of cell-centre coordinates, shape ``(ny, nx)``."""
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="xy")


def _as_values(grid: GridSpec, values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.size != grid.size:
        raise ValueError(f"expected {grid.size} values, got {arr.size}")
    arr = arr.reshape(grid.shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Cell-centred grid function."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_values(self.grid, self.values))

    @classmethod
    def constant(cls, grid: GridSpec, c: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(c)))

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls.constant(grid, 0.0)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class FaceVectorField:
    """Face-centred vector field with zero normal components on the boundary."""

    grid: GridSpec
    x: np.ndarray
    y: np.ndarray
    check_boundary: bool = field(default=True, repr=False)

    def __post_init__(self):
        g = self.grid
        x = np.array(self.x, dtype=float).reshape(g.ny, g.nx + 1)
        y = np.array(self.y, dtype=float).reshape(g.ny + 1, g.nx)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("face values must be finite")
        if self.check_boundary and (
            np.any(x[:, 0]) or np.any(x[:, -1]) or np.any(y[0, :]) or np.any(y[-1, :])
        ):
            raise ValueError("boundary-face components must be zero")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "FaceVectorField":
        return cls(grid, np.zeros((grid.ny, grid.nx + 1)), np.zeros((grid.ny + 1, grid.nx)))

    @classmethod
    def from_interior(cls, grid: GridSpec, x, y) -> "FaceVectorField":
        """Build a field from arbitrary arrays, zeroing the boundary faces."""
        x = np.array(x, dtype=float).reshape(grid.ny, grid.nx + 1).copy()
        y = np.array(y, dtype=float).reshape(grid.ny + 1, grid.nx).copy()
        x[:, 0] = x[:, -1] = 0.0
        y[0, :] = y[-1, :] = 0.0
        return cls(grid, x, y)

    def __sub__(self, other: "FaceVectorField") -> "FaceVectorField":
        return FaceVectorField(self.grid, self.x - other.x, self.y - other.y)


# --------------------------------------------------------------------------
# stencil operators


def gradient(f: ScalarField) -> FaceVectorField:
    g = f.grid
    u = f.values
    gx = np.zeros((g.ny, g.nx + 1))
    gy = np.zeros((g.ny + 1, g.nx))
    gx[:, 1:-1] = (u[:, 1:] - u[:, :-1]) / g.hx
    gy[1:-1, :] = (u[1:, :] - u[:-1, :]) / g.hy
    return FaceVectorField(g, gx, gy)


def divergence(F: FaceVectorField) -> ScalarField:
    g = F.grid
    d = (F.x[:, 1:] - F.x[:, :-1]) / g.hx + (F.y[1:, :] - F.y[:-1, :]) / g.hy
    return ScalarField(g, d)


def integrate(f: ScalarField) -> float:
    return math.fsum(f.flat) * f.grid.cell_area


def inner_cells(a: ScalarField, b: ScalarField) -> float:
    return math.fsum((a.values * b.values).ravel()) * a.grid.cell_area


def face_weights(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature weights ``(wx, wy)``; half cells on the boundary faces."""
    return _face_weights(grid)


@lru_cache(maxsize=64)
def _face_weights(grid: GridSpec):
    a = grid.cell_area
    wx = np.full((grid.ny, grid.nx + 1), a)
    wx[:, 0] = wx[:, -1] = 0.5 * a
    wy = np.full((grid.ny + 1, grid.nx), a)
    wy[0, :] = wy[-1, :] = 0.5 * a
    wx.setflags(write=False)
    wy.setflags(write=False)
    return wx, wy


def inner_faces(F: FaceVectorField, G: FaceVectorField) -> float:
    wx, wy = face_weights(F.grid)
    return math.fsum((wx * F.x * G.x).ravel()) + math.fsum((wy * F.y * G.y).ravel())


def lp_norm_faces(F: FaceVectorField, p: float) -> float:
    """Componentwise face-quadrature ``L^p`` norm of a face field."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    wx, wy = face_weights(F.grid)
    s = math.fsum((wx * np.abs(F.x) ** p).ravel()) + math.fsum((wy * np.abs(F.y) ** p).ravel())
    return s ** (1.0 / p)


def tangential_at_xfaces(gy: np.ndarray) -> np.ndarray:
    """Average y-face values onto x-faces (four neighbours, mirrored at walls)."""
    padded = np.pad(gy, ((0, 0), (1, 1)), mode="edge")
    return 0.25 * (padded[:-1, :-1] + padded[:-1, 1:] + padded[1:, :-1] + padded[1:, 1:])


def tangential_at_yfaces(gx: np.ndarray) -> np.ndarray:
    """Average x-face values onto y-faces (four neighbours, mirrored at walls)."""
    padded = np.pad(gx, ((1, 1), (0, 0)), mode="edge")
    return 0.25 * (padded[:-1, :-1] + padded[:-1, 1:] + padded[1:, :-1] + padded[1:, 1:])


def full_face_gradients(f: ScalarField) -> tuple[np.ndarray, np.ndarray]:
    """Two-component gradients reconstructed on every face.

    Returns arrays of shape ``(ny, nx+1, 2)`` and ``(ny+1, nx, 2)``.  The normal
    component is the face difference, the tangential one the average of the four
    neighbouring faces of the other family.
    """
    G = gradient(f)
    xf = np.stack([G.x, tangential_at_xfaces(G.y)], axis=-1)
    yf = np.stack([tangential_at_yfaces(G.x), G.y], axis=-1)
    return xf, yf


# --------------------------------------------------------------------------
# sparse assembly (same stencils, for building linear systems)


@dataclass(frozen=True)
class SparseOperators:
    """Sparse matrices acting on row-major flattened cell/face arrays."""

    Dx: sp.csr_matrix  # cells -> x-faces
    Dy: sp.csr_matrix  # cells -> y-faces
    Tx: sp.csr_matrix  # y-faces -> x-faces (tangential average)
    Ty: sp.csr_matrix  # x-faces -> y-faces
    wx: np.ndarray
    wy: np.ndarray
    Gx: sp.csr_matrix  # cells -> (normal, tangential) at x-faces, stacked
    Gy: sp.csr_matrix  # cells -> (tangential, normal) at y-faces, stacked
    laplacian: sp.csr_matrix  # five-point -div(grad), cell-weighted


def _difference_1d(n: int, h: float) -> sp.csr_matrix:
    rows = np.arange(1, n)
    data = np.concatenate([-np.ones(n - 1), np.ones(n - 1)]) / h
    return sp.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([rows - 1, rows]))), shape=(n + 1, n)
    )


def _pair_average_1d(n: int) -> sp.csr_matrix:
    # n+1 faces -> n cells, mean of both sides
    rows = np.arange(n)
    return sp.csr_matrix(
        (np.full(2 * n, 0.5), (np.concatenate([rows, rows]), np.concatenate([rows, rows + 1]))),
        shape=(n, n + 1),
    )


def _clamped_average_1d(n: int) -> sp.csr_matrix:
    # n cells -> n+1 faces, mirror at both ends
    rows = np.arange(n + 1)
    left = np.clip(rows - 1, 0, n - 1)
    right = np.clip(rows, 0, n - 1)
    return sp.csr_matrix(
        (np.full(2 * (n + 1), 0.5), (np.concatenate([rows, rows]), np.concatenate([left, right]))),
        shape=(n + 1, n),
    )


def sparse_operators(grid: GridSpec) -> SparseOperators:
    return _sparse_operators(grid)


@lru_cache(maxsize=32)
def _sparse_operators(grid: GridSpec) -> SparseOperators:
    nx, ny = grid.nx, grid.ny
    Dx = sp.kron(sp.identity(ny), _difference_1d(nx, grid.hx), format="csr")
    Dy = sp.kron(_difference_1d(ny, grid.hy), sp.identity(nx), format="csr")
    Tx = sp.kron(_pair_average_1d(ny), _clamped_average_1d(nx), format="csr")
    Ty = sp.kron(_clamped_average_1d(ny), _pair_average_1d(nx), format="csr")
    wx, wy = (w.reshape(-1) for w in face_weights(grid))
    Gx = sp.vstack([Dx, Tx @ Dy], format="csr")
    Gy = sp.vstack([Ty @ Dx, Dy], format="csr")
    lap = (Dx.T @ sp.diags(wx) @ Dx + Dy.T @ sp.diags(wy) @ Dy) / grid.cell_area
    return SparseOperators(Dx, Dy, Tx, Ty, wx, wy, Gx, Gy, lap.tocsr())


# --------------------------------------------------------------------------
# snapshot I/O


def write_field_csv(f: ScalarField, path) -> None:
    """Row-major CSV, one grid row per line, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        for row in f.values:
            fh.write(",".join(format(float(v), ".17g") for v in row))
            fh.write("\n")


def read_field_csv(path, grid: GridSpec | None = None, hx: float | None = None, hy: float | None = None) -> ScalarField:
    text = Path(path).read_text().strip().splitlines()
    rows = [[float(tok) for tok in line.split(",")] for line in text if line.strip()]
    ncols = {len(r) for r in rows}
    if len(ncols) != 1:
        raise ValueError(f"{path}: ragged rows")
    arr = np.array(rows)
    if grid is None:
        ny, nx = arr.shape
        grid = GridSpec(nx, ny, hx if hx is not None else 1.0 / nx, hy if hy is not None else 1.0 / ny)
    elif arr.shape != grid.shape:
        raise ValueError(f"{path}: shape {arr.shape} does not match grid {grid.shape}")
    return ScalarField(grid, arr)
