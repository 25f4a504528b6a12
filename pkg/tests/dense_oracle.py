"""Loop-based dense assembly of the discrete operators, independent of the
package's sparse kron construction.  Small grids only."""
import numpy as np


def cell(grid, j, i):
    return j * grid.nx + i


def _gx_row(grid, j, i):
    # normal difference on x-face (j, i); zero on the walls
    row = np.zeros(grid.size)
    if 0 < i < grid.nx:
        row[cell(grid, j, i)] += 1.0 / grid.hx
        row[cell(grid, j, i - 1)] -= 1.0 / grid.hx
    return row


def _gy_row(grid, j, i):
    row = np.zeros(grid.size)
    if 0 < j < grid.ny:
        row[cell(grid, j, i)] += 1.0 / grid.hy
        row[cell(grid, j - 1, i)] -= 1.0 / grid.hy
    return row


def _clamp(k, n):
    return min(max(k, 0), n - 1)


def xface_rows(grid, j, i):
    """Rows giving (normal, tangential) gradient components on x-face (j, i)."""
    tang = np.zeros(grid.size)
    for r in (j, j + 1):
        for c in (_clamp(i - 1, grid.nx), _clamp(i, grid.nx)):
            tang += 0.25 * _gy_row(grid, r, c)
    return _gx_row(grid, j, i), tang


def yface_rows(grid, j, i):
    """Rows giving (tangential-x, normal-y) gradient components on y-face (j, i)."""
    tang = np.zeros(grid.size)
    for r in (_clamp(j - 1, grid.ny), _clamp(j, grid.ny)):
        for c in (i, i + 1):
            tang += 0.25 * _gx_row(grid, r, c)
    return tang, _gy_row(grid, j, i)


def weight(grid, on_wall):
    a = grid.hx * grid.hy
    return 0.5 * a if on_wall else a


def faces(grid):
    """Yield ``(kind, j, i, weight, gx_row, gy_row)`` for every face."""
    for j in range(grid.ny):
        for i in range(grid.nx + 1):
            gx, gy = xface_rows(grid, j, i)
            yield "x", j, i, weight(grid, i in (0, grid.nx)), gx, gy
    for j in range(grid.ny + 1):
        for i in range(grid.nx):
            gx, gy = yface_rows(grid, j, i)
            yield "y", j, i, weight(grid, j in (0, grid.ny)), gx, gy


def laplacian5(grid):
    """Dense ``-Delta`` from face-normal differences only."""
    n = grid.size
    L = np.zeros((n, n))
    for j in range(grid.ny):
        for i in range(grid.nx + 1):
            r = _gx_row(grid, j, i)
            L += weight(grid, i in (0, grid.nx)) * np.outer(r, r)
    for j in range(grid.ny + 1):
        for i in range(grid.nx):
            r = _gy_row(grid, j, i)
            L += weight(grid, j in (0, grid.ny)) * np.outer(r, r)
    return L / (grid.hx * grid.hy)


def p_laplacian_dense(grid, u, p, beta, eps):
    """``-div(F(|grad u|^2) grad .) + eps`` frozen at ``u``, dense."""
    n = grid.size
    A = np.zeros((n, n))
    for _, _, _, w, gx, gy in faces(grid):
        s = (gx @ u) ** 2 + (gy @ u) ** 2
        a = (s + eps) ** ((p - 2) / 2) + beta * (s + eps) ** -0.5
        # each family carries the full gradient, so half weight
        A += 0.5 * w * a * (np.outer(gx, gx) + np.outer(gy, gy))
    return A / (grid.hx * grid.hy) + eps * np.eye(n)


def mobility_dense(grid, u, q, eps):
    """``-div((M(grad u) + eps I) grad .) + eps``, dense; identity part on the five-point stencil."""
    n = grid.size
    A = (1.0 + eps) * laplacian5(grid)
    B = np.zeros((n, n))
    for _, _, _, w, gx, gy in faces(grid):
        ax, ay = gx @ u, gy @ u
        g = np.hypot(ax, ay)
        if g == 0.0:
            continue
        c = 1.0 / (1.0 + q * g) - 1.0
        Mmi = c / g**2 * np.array([[ax * ax, ax * ay], [ax * ay, ay * ay]])
        R = np.vstack([gx, gy])
        B += 0.5 * w * R.T @ Mmi @ R
    return A + B / (grid.hx * grid.hy) + eps * np.eye(n)


def coupled_step_dense(grid, w, dt, eps):
    """One linear step (p = 2, beta = 0, q = 0) as a dense monolithic solve.

    Unknowns ``[u; v]`` with
    ``u + dt ((1+eps) L + eps) v = w`` and ``((1) Lf + eps) u - v = 0``,
    where ``Lf`` is the full-gradient Laplacian of the p = 2 flux.
    """
    n = grid.size
    A = (1.0 + eps) * laplacian5(grid) + eps * np.eye(n)
    P = p_laplacian_dense(grid, np.zeros(n), 2.0, 0.0, eps)
    K = np.block([[np.eye(n), dt * A], [P, -np.eye(n)]])
    rhs = np.concatenate([w, np.zeros(n)])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:]
