"""Command line drivers: single runs, refinement studies, the oracle suite."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, RunConfig, format_config, load_config, make_initial_data
from .oracles import SampleConfig, failures_csv, run_suite
from .scheme import (
    StepFailure,
    Trajectory,
    advance,
    export_trajectory,
    lyapunov_ledger,
    mass_law_check,
    refinement_cauchy,
)

log = logging.getLogger("crystal_relax")

EXIT_OK = 0
EXIT_NONCONVERGENCE = 2
EXIT_INVARIANT = 3
EXIT_USAGE = 64

THREADS_ENV = "CRYSTAL_RELAX_THREADS"
CAUCHY_COLUMNS = ("j_coarse", "j_fine", "p", "norm")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def check_invariants(traj: Trajectory, cfg: RunConfig) -> list[str]:
    """Human-readable descriptions of every violated run-time invariant."""
    problems = []
    L0 = abs(traj.states[0].diagnostics.lyapunov)
    ledger = lyapunov_ledger(traj, tol=cfg.ledger_rtol * L0)
    if not ledger.ok:
        problems.append(f"energy ledger violated at steps {ledger.flagged[:10]} (max slack {ledger.max_slack:.3e})")
    mass = mass_law_check(traj)
    if mass.max_relative > cfg.mass_rtol:
        problems.append(f"mass law violated (max relative defect {mass.max_relative:.3e})")
    return problems


def _write_outputs(traj: Trajectory, cfg: RunConfig, outdir: Path) -> None:
    export_trajectory(traj, outdir, every=cfg.snapshot_every, snapshots=cfg.snapshots)
    from .output import emit_raster

    emit_raster(traj.states[0].u, outdir / "u_initial.pgm")
    emit_raster(traj.states[-1].u, outdir / "u_final.pgm")
    if cfg.figures:
        from .figures import plot_diagnostics, plot_surface

        plot_diagnostics(traj, outdir / "diagnostics.png")
        plot_surface(traj.states[0].u, outdir / "u_initial.png", "u at t = 0")
        plot_surface(traj.states[-1].u, outdir / "u_final.png", f"u at t = {traj.states[-1].t:g}")


def simulate(cfg: RunConfig, outdir: Path | None = None) -> tuple[int, Trajectory, list[str]]:
    """Run one configuration and write its artifacts into ``outdir``.

    Returns the exit code, the (possibly partial) trajectory and messages.
    """
    outdir = Path(cfg.output if outdir is None else outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved.cfg").write_text(format_config(cfg))
    u0 = make_initial_data(cfg)
    try:
        traj = advance(u0, cfg.T, cfg.j, cfg.params(), cfg.solver(),
                       callback=lambda s: log.info("step %d  t=%.6g  fp_iters=%d", s.k, s.t, s.iterations))
    except StepFailure as exc:
        export_trajectory(exc.trajectory, outdir, every=cfg.snapshot_every, snapshots=cfg.snapshots)
        return EXIT_NONCONVERGENCE, exc.trajectory, [str(exc)]
    _write_outputs(traj, cfg, outdir)
    problems = check_invariants(traj, cfg)
    return (EXIT_INVARIANT if problems else EXIT_OK), traj, problems


def run_single(cfg: RunConfig, outdir: Path | None = None, retry_halve_dt: bool = False) -> int:
    """One run; with ``retry_halve_dt`` a non-convergent run restarts once at ``2j``."""
    code, traj, messages = simulate(cfg, outdir)
    for m in messages:
        _err(m)
    if code == EXIT_NONCONVERGENCE and retry_halve_dt:
        cfg = cfg.replace(j=2 * cfg.j)
        _err(f"retrying with j = {cfg.j}")
        code, traj, messages = simulate(cfg, outdir)
        for m in messages:
            _err(m)
    if code == EXIT_OK:
        last = traj.states[-1].diagnostics
        print(f"{len(traj.states) - 1} steps, final lyapunov {last.lyapunov:.12g}, output in {outdir or cfg.output}")
    return code


def _level_job(args):
    cfg, outdir = args
    code, traj, messages = simulate(cfg, outdir)
    return code, (traj if code != EXIT_NONCONVERGENCE else None), messages


def worker_count(jobs: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {cap!r}") from None
    return max(1, min(n, jobs))


def run_refinement(cfg: RunConfig, levels: int) -> int:
    """Runs at ``j, 2j, ..., 2^(levels-1) j`` and their consecutive Cauchy differences."""
    if levels < 2:
        raise ConfigError("refinement needs at least 2 levels")
    root = Path(cfg.output)
    root.mkdir(parents=True, exist_ok=True)
    (root / "resolved.cfg").write_text(format_config(cfg))
    jobs = []
    for lvl in range(levels):
        j = cfg.j * 2**lvl
        sub = cfg.replace(j=j, output=str(root / f"j{j}"))
        jobs.append((sub, Path(sub.output)))
    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_level_job, jobs))
    else:
        results = [_level_job(job) for job in jobs]
    codes = []
    for (sub, _), (c, _, messages) in zip(jobs, results):
        codes.append(c)
        for m in messages:
            _err(f"j = {sub.j}: {m}")
    if EXIT_NONCONVERGENCE in codes:
        return EXIT_NONCONVERGENCE
    code = max(codes)
    rows = []
    for (a, _), (b, _), ra, rb in zip(jobs, jobs[1:], results, results[1:]):
        rows.append((a.j, b.j, cfg.p, refinement_cauchy(ra[1], rb[1], cfg.p)))
    with open(root / "cauchy.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CAUCHY_COLUMNS)
        for r in rows:
            wr.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])
    for r in rows:
        print(f"j = {r[0]:>5} vs {r[1]:>5}: {r[3]:.6e}")
    if any(b[3] >= a[3] for a, b in zip(rows, rows[1:])):
        _err("warning: Cauchy differences are not strictly decreasing")
    if cfg.figures:
        from .figures import plot_cauchy

        plot_cauchy(rows, root / "cauchy.png")
    return code


def run_verify(cfg: SampleConfig, out=None) -> int:
    results = run_suite(cfg)
    for r in results:
        status = "pass" if r.passed else f"FAIL ({len(r.failures) + r.extra_failures} counterexamples)"
        _err(f"{r.name:<22} {r.samples:>9} samples  {r.seconds:6.2f} s  {status}")
    failed = [r for r in results if not r.passed]
    if failed:
        (out or sys.stdout).write(failures_csv(failed))
        return EXIT_INVARIANT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crystal-relax", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log every step")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one configuration")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--output", type=Path, help="override the output directory")
    r.add_argument("--retry-halve-dt", action="store_true",
                   help="on a non-convergent step, restart the whole run once with twice the steps")

    f = sub.add_parser("refine", help="time-refinement study with Cauchy differences")
    f.add_argument("--config", required=True, type=Path)
    f.add_argument("--levels", type=int, default=3)
    f.add_argument("--output", type=Path, help="override the output directory")

    v = sub.add_parser("verify", help="run the randomized inequality oracles")
    v.add_argument("--seed", type=int, default=SampleConfig.seed)
    v.add_argument("--samples", type=int, default=SampleConfig.samples)

    c = sub.add_parser("print-config", help="print the resolved configuration")
    c.add_argument("--config", type=Path)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "verify":
            return run_verify(SampleConfig(samples=args.samples, seed=args.seed))
        cfg = load_config(args.config) if args.config else RunConfig()
        if getattr(args, "output", None) is not None:
            cfg = cfg.replace(output=str(args.output))
        if args.command == "print-config":
            sys.stdout.write(format_config(cfg))
            return EXIT_OK
        if args.command == "run":
            return run_single(cfg, retry_halve_dt=args.retry_halve_dt)
        return run_refinement(cfg, args.levels)
    except (ConfigError, ValueError, OSError) as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
