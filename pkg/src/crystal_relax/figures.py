"""Matplotlib figures written next to a run's CSV output."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .grid import ScalarField  # noqa: E402


def plot_diagnostics(traj, path) -> Path:
    """Lyapunov energy and per-step dissipation against time."""
    t = np.array([s.t for s in traj.states])
    L = np.array([s.diagnostics.lyapunov for s in traj.states])
    D = np.array([s.diagnostics.dissipation for s in traj.states])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5), constrained_layout=True)
    ax1.plot(t, L, marker=".")
    ax1.set_xlabel("t")
    ax1.set_ylabel("Lyapunov energy")
    if len(t) > 1:
        ax2.semilogy(t[1:], np.maximum(D[1:], np.finfo(float).tiny), marker=".")
    ax2.set_xlabel("t")
    ax2.set_ylabel("dissipation per step")
    p = traj.params
    fig.suptitle(f"p={p.p:g}  beta={p.beta:g}  q={p.q:g}  dt={p.dt:g}")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_surface(f: ScalarField, path, title: str = "") -> Path:
    """Height field as a colour map over the physical domain.

    Late in a run the surface is nearly flat, so the map shows the deviation
    from the mean and the mean goes into the colour bar label.
    """
    Lx, Ly = f.grid.extent
    mean = float(np.mean(f.values))
    fig, ax = plt.subplots(figsize=(4.5, 4), constrained_layout=True)
    im = ax.imshow(f.values - mean, origin="lower", extent=(0, Lx, 0, Ly), cmap="viridis")
    cb = fig.colorbar(im, ax=ax, shrink=0.85)
    cb.set_label(f"u - {mean:.6g}")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_cauchy(rows, path) -> Path:
    """Refinement differences against the coarse step count, log-log."""
    jc = [r[0] for r in rows]
    nv = [r[3] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.5), constrained_layout=True)
    ax.loglog(jc, nv, marker="o")
    ax.set_xlabel("coarse step count j")
    ax.set_ylabel("Cauchy difference")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
