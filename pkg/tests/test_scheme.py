import csv
import math

import numpy as np
import pytest

import dense_oracle as dense
from crystal_relax.grid import GridSpec, ScalarField, integrate
from crystal_relax.model import ModelParams
from crystal_relax.scheme import (
    DIAG_COLUMNS,
    MapBError,
    StepFailure,
    advance,
    eval_bar_u,
    eval_bar_v,
    eval_tilde_u,
    export_trajectory,
    fixed_point_step,
    lyapunov_ledger,
    map_B,
    mass_law_check,
    refinement_cauchy,
    snapshot_steps,
    step_residuals,
)
from crystal_relax.solvers import SolverConfig


def bump(grid, amp=1.0, sigma=None):
    X, Y = grid.cell_centers()
    Lx, Ly = grid.extent
    sigma = sigma or 0.2 * Lx
    return ScalarField(grid, amp * np.exp(-((X - 0.45 * Lx) ** 2 + (Y - 0.55 * Ly) ** 2) / (2 * sigma**2)))


G8 = GridSpec(8, 8, 0.25, 0.25)


@pytest.fixture(scope="module")
def short_run():
    par = ModelParams.coupled(3.0, 1.0, 2.0, 0.02)
    return advance(bump(G8), 0.1, 5, par)


class TestConstantStates:
    @pytest.mark.parametrize("c", [-2.0, 0.0, 5.0])
    @pytest.mark.parametrize("dt", [0.1, 0.01])
    def test_step_closed_form(self, c, dt):
        par = ModelParams.coupled(1.5, 1.0, 2.0, dt)
        s = fixed_point_step(ScalarField.constant(G8, c), par)
        uk = c / (1 + dt**3)
        np.testing.assert_allclose(s.u.values, uk, rtol=1e-10, atol=1e-300)
        np.testing.assert_allclose(s.v.values, dt * uk, rtol=1e-10, atol=1e-300)

    def test_zero_one_iteration(self):
        s = fixed_point_step(ScalarField.zeros(G8), ModelParams.coupled(3.0, 1.0, 1.0, 0.1))
        assert not s.u.values.any() and not s.v.values.any()
        assert s.iterations == 1

    def test_fixed_mode_factor(self):
        dt, eps = 0.1, 0.3
        par = ModelParams(2.0, 0.0, 0.0, eps, dt, "fixed")
        s = fixed_point_step(ScalarField.constant(G8, 2.0), par)
        np.testing.assert_allclose(s.u.values, 2.0 / (1 + dt * eps**2), rtol=1e-10)
        np.testing.assert_allclose(s.v.values, eps * s.u.values, rtol=1e-10)

    def test_advance_constant_mass_telescopes(self):
        dt = 0.05
        tr = advance(ScalarField.constant(G8, 3.0), 0.25, 5, ModelParams.coupled(3.0, 1.0, 1.0, dt))
        m0 = integrate(tr.u0)
        for s in tr.states:
            assert s.diagnostics.mass == pytest.approx(m0 / (1 + dt**3) ** s.k, rel=1e-12)

    def test_constant_ledger_hand_algebra(self):
        # slack = eps |Omega| c_k^2 (1/2 (1 - (1+a)^2) + a) = -eps |Omega| c_k^2 a^2 / 2, a = dt eps^2
        dt = 0.1
        tr = advance(ScalarField.constant(G8, 5.0), 0.3, 3, ModelParams.coupled(2.0, 1.0, 0.0, dt))
        a = dt**3
        rep = lyapunov_ledger(tr)
        for s, slack in zip(tr.states[1:], rep.slacks):
            ck = float(s.u.values[0, 0])
            want = -dt * G8.area * ck**2 * a**2 / 2
            assert slack == pytest.approx(want, rel=1e-6, abs=1e-15)

    def test_zero_trajectory(self):
        tr = advance(ScalarField.zeros(G8), 0.1, 4, ModelParams.coupled(3.0, 1.0, 1.0, 0.1))
        assert all(not s.u.values.any() and not s.v.values.any() for s in tr.states)
        assert all(s == 0.0 for s in lyapunov_ledger(tr).slacks)
        assert mass_law_check(tr).max_violation == 0.0


class TestMapB:
    def test_constant_data(self):
        par = ModelParams.coupled(3.0, 1.0, 1.0, 0.1)
        a, c = 0.02, 1.0
        u, v = map_B(ScalarField.constant(G8, a), ScalarField.constant(G8, c), par)
        np.testing.assert_allclose(u.values, a / 0.1, rtol=1e-9)
        np.testing.assert_allclose(v.values, (c - a / 0.1) / (0.1 * 0.1), rtol=1e-8)

    def test_zero_data(self):
        u, v = map_B(ScalarField.zeros(G8), ScalarField.zeros(G8), ModelParams.coupled(2.0, 0.0, 0.0, 0.1))
        assert not u.values.any() and not v.values.any()

    def test_converged_step_is_fixed_point(self):
        par = ModelParams.coupled(1.5, 1.0, 1.0, 0.05)
        w = bump(G8, amp=0.5)
        s = fixed_point_step(w, par, SolverConfig(fp_tol=1e-12))
        u, v = map_B(s.v, w, par, SolverConfig(cg_tol=1e-12, picard_tol=1e-12))
        assert np.linalg.norm(u.flat - s.u.flat) <= 1e-8 * np.linalg.norm(s.u.flat)
        assert np.linalg.norm(v.flat - s.v.flat) <= 1e-5 * np.linalg.norm(s.v.flat)

    def test_leg_annotation(self):
        par = ModelParams.coupled(3.0, 1.0, 1.0, 0.01)
        with pytest.raises(MapBError) as exc:
            map_B(bump(G8), bump(G8), par, SolverConfig(picard_max_iter=1))
        assert exc.value.leg == "p-laplacian"


class TestStep:
    def test_linear_dense_4x4(self):
        g = GridSpec(4, 4, 0.25, 0.25)
        w = np.random.default_rng(0).standard_normal(g.size)
        par = ModelParams.coupled(2.0, 0.0, 0.0, 0.1)
        s = fixed_point_step(ScalarField(g, w), par)
        u, v = dense.coupled_step_dense(g, w, 0.1, 0.1)
        assert np.linalg.norm(s.u.flat - u) <= 1e-8 * np.linalg.norm(u)
        assert np.linalg.norm(s.v.flat - v) <= 1e-8 * np.linalg.norm(v)

    def test_residuals_reevaluated_independently(self):
        g = GridSpec(5, 4, 0.3, 0.3)
        par = ModelParams.coupled(3.0, 1.0, 2.0, 0.05)
        w = bump(g)
        cfg = SolverConfig()
        s = fixed_point_step(w, par, cfg)
        assert max(step_residuals(s.u, s.v, w, par)) <= cfg.fp_tol
        A = dense.mobility_dense(g, s.u.flat, 2.0, 0.05)
        P = dense.p_laplacian_dense(g, s.u.flat, 3.0, 1.0, 0.05)
        u, v, wf = s.u.flat, s.v.flat, w.flat
        r1 = u - wf + 0.05 * A @ v
        r2 = P @ u - v
        e1 = np.linalg.norm(r1) / np.linalg.norm(np.abs(u) + np.abs(wf) + 0.05 * np.abs(A) @ np.abs(v))
        e2 = np.linalg.norm(r2) / np.linalg.norm(np.abs(P) @ np.abs(u) + np.abs(v))
        assert max(e1, e2) <= 2 * cfg.fp_tol

    def test_failure_keeps_partial_trajectory(self):
        par = ModelParams.coupled(3.0, 1.0, 2.0, 0.02)
        with pytest.raises(StepFailure) as exc:
            advance(bump(G8), 0.1, 5, par, SolverConfig(fp_max_iter=1))
        assert exc.value.step == 1
        assert len(exc.value.trajectory.states) == 1
        assert not exc.value.trajectory.complete

    def test_advance_validates(self):
        par = ModelParams.coupled(2.0, 0.0, 0.0, 0.1)
        with pytest.raises(ValueError):
            advance(bump(G8), 0.1, 0, par)
        with pytest.raises(ValueError):
            advance(bump(G8), -1.0, 3, par)


class TestRun:
    def test_lyapunov_non_increasing(self, short_run):
        L = [s.diagnostics.lyapunov for s in short_run.states]
        assert all(b <= a + 1e-12 * abs(L[0]) for a, b in zip(L, L[1:]))
        rep = lyapunov_ledger(short_run)
        assert rep.ok and rep.max_slack <= 1e-7 * L[0]

    def test_dissipation_terms_nonnegative(self, short_run):
        for s in short_run.states:
            d = s.diagnostics
            assert d.diss_mob >= 0 and d.diss_grad >= 0 and d.diss_mass >= 0

    def test_mass_law(self, short_run):
        rep = mass_law_check(short_run)
        assert rep.factor == 1 + 0.02**3
        assert rep.max_relative <= 100 * SolverConfig().fp_tol

    def test_times(self, short_run):
        assert [s.t for s in short_run.states] == pytest.approx([0.0, 0.02, 0.04, 0.06, 0.08, 0.1])
        assert short_run.states[-1].t == 0.1


class TestInterpolants:
    def test_endpoints(self, short_run):
        for s in short_run.states:
            assert np.array_equal(eval_tilde_u(short_run, s.t).values, s.u.values)
            assert np.array_equal(eval_bar_u(short_run, s.t).values, s.u.values)

    def test_midpoint_and_bar_values(self, short_run):
        st = short_run.states
        mid = eval_tilde_u(short_run, 0.03)
        np.testing.assert_allclose(mid.values, 0.5 * (st[1].u.values + st[2].u.values), rtol=1e-12)
        assert np.array_equal(eval_bar_u(short_run, 0.03).values, st[2].u.values)
        assert np.array_equal(eval_bar_v(short_run, 0.03).values, st[2].v.values)
        assert np.array_equal(eval_bar_v(short_run, 0.04).values, st[2].v.values)
        assert np.array_equal(eval_bar_v(short_run, 0.04 + 1e-6).values, st[3].v.values)

    def test_out_of_range(self, short_run):
        with pytest.raises(ValueError):
            eval_tilde_u(short_run, 0.2)
        with pytest.raises(ValueError):
            eval_bar_u(short_run, -0.01)

    def test_time_integral_identity(self, short_run):
        # exact on each step: midpoint rule for the linear interpolant
        dt = short_run.dt
        diff = sum(dt * (eval_tilde_u(short_run, (k - 0.5) * dt).values - eval_bar_u(short_run, (k - 0.5) * dt).values)
                   for k in range(1, short_run.j + 1))
        want = -0.5 * dt * (short_run.states[-1].u.values - short_run.u0.values)
        np.testing.assert_allclose(diff, want, atol=1e-14)


class TestCauchy:
    def test_self_and_constant(self, short_run):
        assert refinement_cauchy(short_run, short_run, 3.0) == 0.0
        par = ModelParams.coupled(3.0, 1.0, 1.0, 0.1)
        a = advance(ScalarField.constant(G8, 1.0), 0.2, 2, par)
        b = advance(ScalarField.constant(G8, 1.0), 0.2, 4, par)
        # the splu solve leaves roundoff-level gradients on constant states
        assert refinement_cauchy(a, b, 3.0) <= 1e-12

    def test_mismatch_rejected(self, short_run):
        par = ModelParams.coupled(3.0, 1.0, 1.0, 0.1)
        other = advance(ScalarField.zeros(GridSpec(4, 4, 0.5, 0.5)), 0.1, 5, par)
        with pytest.raises(ValueError):
            refinement_cauchy(short_run, other, 3.0)
        tri = advance(bump(G8), 0.1, 3, ModelParams.coupled(3.0, 1.0, 2.0, 0.02))
        with pytest.raises(ValueError):
            refinement_cauchy(short_run, tri, 3.0)

    def test_hand_value_two_steps(self):
        # j = 1 against j = 2: one coarse state compared on both fine steps
        par = ModelParams.coupled(2.0, 0.0, 0.0, 0.1)
        g = GridSpec(4, 4, 0.25, 0.25)
        a = advance(bump(g), 0.2, 1, par)
        b = advance(bump(g), 0.2, 2, par)
        from crystal_relax.grid import gradient, lp_norm_faces
        Ga = gradient(a.states[1].u)
        parts = [lp_norm_faces(gradient(b.states[n].u) - Ga, 2.0) ** 2 for n in (1, 2)]
        assert refinement_cauchy(a, b, 2.0) == pytest.approx(math.sqrt(0.1 * sum(parts)), rel=1e-13)


class TestExport:
    def test_snapshot_steps(self):
        assert snapshot_steps(50) == list(range(0, 51, 5))
        assert snapshot_steps(7) == list(range(8))
        assert snapshot_steps(25) == [0, 3, 6, 9, 12, 15, 18, 21, 24, 25]
        assert snapshot_steps(10, every=4) == [0, 4, 8, 10]

    def test_diag_csv(self, short_run, tmp_path):
        export_trajectory(short_run, tmp_path)
        with open(tmp_path / "diag.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == DIAG_COLUMNS
        assert len(rows) == short_run.j + 2
        assert float(rows[-1][2]) == short_run.states[-1].diagnostics.lyapunov
        assert (tmp_path / "u_0005.csv").exists() and (tmp_path / "v_0000.csv").exists()
