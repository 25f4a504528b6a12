"""Raster output: 16-bit binary PGM plus a sidecar holding the value range."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .grid import GridSpec, ScalarField

MAXVAL = 65535


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".range")


def emit_raster(f: ScalarField, path) -> None:
    """Write ``f`` as a 16-bit PGM with linear min-max scaling.

    The top image row is the largest ``y``.  A constant field maps to mid
    gray and the sidecar records the degenerate range ``min == max``.
    """
    vals = f.values
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        levels = np.rint((vals - lo) / (hi - lo) * MAXVAL)
    else:
        levels = np.full(vals.shape, (MAXVAL + 1) // 2)
    data = np.flipud(levels).astype(">u2")
    ny, nx = vals.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n{MAXVAL}\n".encode("ascii"))
        fh.write(data.tobytes())
    sidecar_path(path).write_text(
        f"min = {lo!r}\nmax = {hi!r}\nnx = {nx}\nny = {ny}\nhx = {f.grid.hx!r}\nhy = {f.grid.hy!r}\n"
    )


def _read_header(buf: bytes):
    # magic, width, height, maxval separated by whitespace; comments allowed
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_raster(path) -> ScalarField:
    """Reconstruct field values from a PGM written by ``emit_raster`` and its sidecar."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), off = _read_header(buf)
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    nx, ny, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    levels = np.flipud(np.frombuffer(buf, dtype=dtype, count=nx * ny, offset=off).reshape(ny, nx))
    meta = {}
    for line in sidecar_path(path).read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = float(v)
    lo, hi = meta["min"], meta["max"]
    grid = GridSpec(nx, ny, meta.get("hx", 1.0 / nx), meta.get("hy", 1.0 / ny))
    if hi > lo:
        return ScalarField(grid, lo + (hi - lo) * levels.astype(float) / maxval)
    return ScalarField.constant(grid, lo)
