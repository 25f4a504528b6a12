import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crystal_relax.model import ModelParams
from crystal_relax.oracles import (
    CATALOG,
    SUITE,
    SampleConfig,
    check_oden_high_p,
    check_young,
    failures_csv,
    oracle_flux_monotone,
    oracle_increasing_antideriv,
    oracle_mobility_bounds,
    oracle_oden_high_p,
    oracle_oden_low_p,
    oracle_power_convexity,
    oracle_young,
    power_direction,
    run_suite,
    young_closest_b,
    young_min_gap,
)

vec = st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)).map(np.array)


class TestTrivialCases:
    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
    def test_power_convexity(self, p):
        x = np.array([0.3, -1.7])
        assert oracle_power_convexity(x, x, p)
        assert oracle_power_convexity(x, np.zeros(2), p)

    def test_young_unit(self):
        assert oracle_young(1.0, 1.0, 1.0, 2.0, 2.0)
        ok, lhs, rhs = check_young(1.0, 1.0, 1.0, 2.0)
        assert (lhs, rhs) == (1.0, 2.0)

    def test_young_preconditions(self):
        with pytest.raises(ValueError):
            oracle_young(1.0, 1.0, 1.0, 3.0, 2.0)
        with pytest.raises(ValueError):
            oracle_young(0.0, 1.0, 1.0, 2.0)

    @pytest.mark.parametrize("fn", CATALOG, ids=lambda f: f.name)
    def test_antideriv_diagonal(self, fn):
        assert oracle_increasing_antideriv(fn, 0.7, 0.7)

    def test_identity_antideriv_is_square(self):
        ident = CATALOG[0]
        s, t = 3.0, -1.0
        lhs = ident.f(s) * (s - t)
        assert lhs - (ident.F(s) - ident.F(t)) == pytest.approx(0.5 * (s - t) ** 2)

    @pytest.mark.parametrize("p", [2.5, 3.0, 4.0])
    def test_oden_high_antipodal(self, p):
        x = np.array([0.6, 0.8])
        ok, lhs, rhs = check_oden_high_p(x, -x, p)
        assert ok
        assert lhs == pytest.approx(4.0)
        assert rhs == pytest.approx(2.0)

    def test_oden_low_p2_is_equality(self):
        x, y = np.array([1.0, 2.0]), np.array([-0.5, 0.25])
        assert oracle_oden_low_p(x, y, 2.0)
        assert oracle_oden_low_p(x, x, 1.5)

    def test_regime_preconditions(self):
        with pytest.raises(ValueError):
            oracle_oden_high_p(np.ones(2), np.zeros(2), 2.0)
        with pytest.raises(ValueError):
            oracle_oden_low_p(np.ones(2), np.zeros(2), 2.5)

    def test_flux_trivial(self):
        par = ModelParams.coupled(1.2, 5.0, 0.0, 1e-3)
        xi = np.array([2.0, -3.0])
        assert oracle_flux_monotone(xi, xi, par)
        assert oracle_flux_monotone(xi, np.zeros(2), par)

    def test_mobility_identity_and_aligned(self):
        assert oracle_mobility_bounds(3.0, 4.0, 0.0, np.array([1.0, 2.0]))
        assert oracle_mobility_bounds(3.0, 4.0, 2.0, np.array([3.0, 4.0]))


class TestYoungClosestApproach:
    @pytest.mark.parametrize("p", [1.2, 1.5, 2.0, 3.0, 4.0])
    @pytest.mark.parametrize("eps", [1e-2, 1.0, 50.0])
    def test_min_gap_closed_form(self, p, eps):
        a = 1.7
        q = p / (p - 1)
        gap = lambda b: eps * a**p + eps ** (-q / p) * b**q - a * b  # noqa: E731
        b = young_closest_b(a, eps, p)
        assert gap(b) == pytest.approx(young_min_gap(a, eps, p), rel=1e-10)
        assert gap(b * 1.01) > gap(b) and gap(b * 0.99) > gap(b)
        assert young_min_gap(a, eps, p) > 0

    def test_p2_value(self):
        # p = q = 2: min gap eps a^2 (1 - 1/4)
        assert young_min_gap(2.0, 0.5, 2.0) == pytest.approx(1.5)


class TestPowerDirection:
    def test_origin_is_zero(self):
        for p in (1.2, 1.5, 2.0, 3.0):
            assert not power_direction(np.zeros(2), p).any()

    @settings(max_examples=100, deadline=None)
    @given(x=vec, p=st.sampled_from([1.5, 2.0, 3.0]))
    def test_magnitude(self, x, p):
        r = math.hypot(*x)
        assert np.hypot(*power_direction(x, p)) == pytest.approx(r ** (p - 1), rel=1e-12, abs=1e-300)


class TestSuite:
    def test_small_run_passes(self):
        results = run_suite(SampleConfig(samples=5000))
        assert [r.name for r in results] == [name for name, _ in SUITE]
        assert all(r.passed for r in results)

    def test_chunking_does_not_change_samples(self, monkeypatch):
        import crystal_relax.oracles as orc

        seen = {}

        def spy(name, ok, lhs, rhs, inputs, start=0, limit=100):
            seen.setdefault(name, []).append(np.asarray(lhs).copy())
            return []

        monkeypatch.setattr(orc, "_failures", spy)
        run_suite(SampleConfig(samples=1000, chunk=1000))
        whole = {k: v[0] for k, v in seen.items()}
        seen.clear()
        run_suite(SampleConfig(samples=1000, chunk=333))
        for k, parts in seen.items():
            assert len(parts) == 4
            assert np.array_equal(np.concatenate(parts), whole[k])

    def test_seed_changes_samples(self, monkeypatch):
        import crystal_relax.oracles as orc

        seen = []
        monkeypatch.setattr(orc, "_failures", lambda name, ok, lhs, *a, **k: seen.append(lhs.copy()) or [])
        run_suite(SampleConfig(samples=100, seed=1), only=("young",))
        run_suite(SampleConfig(samples=100, seed=2), only=("young",))
        assert not np.array_equal(seen[0], seen[1])

    def test_failures_reported_verbatim(self, monkeypatch):
        import crystal_relax.oracles as orc

        def broken(n, s):
            a = s.uniform(n)
            return a < 0.5, a, np.zeros(n), dict(a=a)

        monkeypatch.setattr(orc, "SUITE", (("broken", broken),))
        (res,) = run_suite(SampleConfig(samples=2000, chunk=700), limit=10)
        assert not res.passed
        assert len(res.failures) == 10
        assert len(res.failures) + res.extra_failures == pytest.approx(1000, rel=0.15)
        text = failures_csv([res])
        lines = text.splitlines()
        assert lines[0] == "oracle,sample,lhs,rhs,inputs"
        name, idx, lhs, _, inputs = lines[1].split(",")
        assert name == "broken" and inputs == f"a={float(lhs)!r}"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SampleConfig(samples=0)
        with pytest.raises(ValueError):
            SampleConfig(lo=1.0, hi=0.5)
