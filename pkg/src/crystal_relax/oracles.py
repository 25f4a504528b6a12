"""Randomized checks of the elementary inequalities the scheme relies on.

Every check is vectorized over samples and uses a relative tolerance scaled by
the magnitudes of the terms involved, so log-uniform samples spanning sixteen
decades do not trip on roundoff.  Samples are drawn from a counter-based
generator (Philox) keyed by the seed and the oracle, so the stream does not
depend on how a batch is split.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, flux_coeff, mobility_entries

RTOL = 1e-12


@dataclass(frozen=True)
class SampleConfig:
    samples: int = 10**6
    seed: int = 20240611
    lo: float = 1e-8
    hi: float = 1e8
    chunk: int = 2**17

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if self.chunk < 1:
            raise ValueError("chunk must be at least 1")
        if not (0 < self.lo < self.hi):
            raise ValueError("magnitude range must satisfy 0 < lo < hi")


# --------------------------------------------------------------------------
# helpers


def _norm(x):
    # hypot avoids underflow of the squares for subnormal components
    return np.hypot.reduce(np.asarray(x, dtype=float), axis=-1)


def _dot(x, y):
    return np.sum(np.asarray(x) * np.asarray(y), axis=-1)


def power_direction(x, p):
    """``|x|^(p-2) x``, taken as 0 at the origin."""
    x = np.asarray(x, dtype=float)
    r = _norm(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(r > 0, np.where(r > 0, r, 1.0) ** (p - 2.0), 0.0)
    return f[..., None] * x


# --------------------------------------------------------------------------
# checks; each returns (ok, lhs, rhs) arrays


def check_power_convexity(x, y, p):
    """``|x|^(p-2) x . (x - y) >= (|x|^p - |y|^p)/p``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    rx, ry = _norm(x), _norm(y)
    lhs = _dot(power_direction(x, p), x - y)
    rhs = (rx**p - ry**p) / p
    scale = rx ** (p - 1) * (rx + ry) + (rx**p + ry**p) / p
    return lhs >= rhs - RTOL * scale, lhs, rhs


def check_young(a, b, eps, p):
    """``a b <= eps a^p + eps^(-q/p) b^q`` with ``1/p + 1/q = 1``."""
    a, b, eps, p = (np.asarray(v, float) for v in (a, b, eps, p))
    q = p / (p - 1.0)
    lhs = a * b
    rhs = eps * a**p + eps ** (-q / p) * b**q
    return lhs <= rhs * (1 + RTOL), lhs, rhs


def young_closest_b(a, eps, p):
    """The ``b`` minimizing ``rhs - lhs`` of ``check_young`` for given ``a``."""
    q = p / (p - 1.0)
    return (a * eps ** (q / p) / q) ** (1.0 / (q - 1.0))


def young_min_gap(a, eps, p):
    """Closed-form minimum over ``b`` of ``eps a^p + eps^(-q/p) b^q - a b``."""
    q = p / (p - 1.0)
    return eps * a**p * (1.0 - (q - 1.0) / q**p)


@dataclass(frozen=True)
class IncreasingFunction:
    name: str
    f: callable
    F: callable  # an antiderivative
    domain: str  # "real", "nonneg" or "bounded"


def _logcosh(r):
    a = np.abs(r)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def _shifted_power(alpha, shift):
    return IncreasingFunction(
        f"(r+{shift:g})^{alpha:g}",
        lambda r: (r + shift) ** alpha,
        lambda r: (r + shift) ** (alpha + 1) / (alpha + 1),
        "nonneg",
    )


CATALOG = (
    IncreasingFunction("identity", lambda r: r, lambda r: 0.5 * r * r, "real"),
    IncreasingFunction("cube", lambda r: r**3, lambda r: 0.25 * r**4, "real"),
    IncreasingFunction("signed-sqrt", lambda r: np.sign(r) * np.sqrt(np.abs(r)),
                       lambda r: np.abs(r) ** 1.5 / 1.5, "real"),
    IncreasingFunction("arctan", np.arctan, lambda r: r * np.arctan(r) - 0.5 * np.log1p(r * r), "real"),
    IncreasingFunction("exp", np.exp, np.exp, "bounded"),
    IncreasingFunction("tanh", np.tanh, _logcosh, "bounded"),
    # flux-coefficient style powers of a shifted square gradient
    _shifted_power(0.5, 1e-2),
    _shifted_power(1.0, 1e-2),
    _shifted_power(1.5, 1e-4),
)


def check_increasing_antideriv(fn: IncreasingFunction, s, t):
    """``f(s)(s - t) >= F(s) - F(t)``."""
    s, t = np.asarray(s, float), np.asarray(t, float)
    fs = fn.f(s)
    lhs = fs * (s - t)
    Fs, Ft = fn.F(s), fn.F(t)
    rhs = Fs - Ft
    scale = np.abs(lhs) + np.abs(Fs) + np.abs(Ft)
    return lhs >= rhs - RTOL * scale, lhs, rhs


def _monotone_gap(x, y, p):
    x, y = np.asarray(x, float), np.asarray(y, float)
    gx, gy = power_direction(x, p), power_direction(y, p)
    gap = _dot(gx - gy, x - y)
    scale = (_norm(gx) + _norm(gy)) * _norm(x - y)
    return gap, scale


def check_oden_high_p(x, y, p):
    """``(|x|^(p-2)x - |y|^(p-2)y).(x-y) >= 2^(1-p) |x-y|^p`` for ``p > 2``."""
    lhs, scale = _monotone_gap(x, y, p)
    rhs = 2.0 ** (1.0 - p) * _norm(np.asarray(x, float) - np.asarray(y, float)) ** p
    return lhs >= rhs - RTOL * scale, lhs, rhs


def check_oden_low_p(x, y, p):
    """``(1+|x|^2+|y|^2)^((2-p)/2) (|x|^(p-2)x - |y|^(p-2)y).(x-y) >= (p-1)|x-y|^2``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    gap, scale = _monotone_gap(x, y, p)
    w = (1.0 + _norm(x) ** 2 + _norm(y) ** 2) ** ((2.0 - p) / 2.0)
    lhs = w * gap
    rhs = (p - 1.0) * _norm(x - y) ** 2
    return lhs >= rhs - RTOL * w * scale, lhs, rhs


def check_flux_monotone(xi, eta, p, beta, eps):
    """``(F(|xi|^2) xi - F(|eta|^2) eta).(xi - eta) >= 0``."""
    xi, eta = np.asarray(xi, float), np.asarray(eta, float)
    par = _Flux(p, beta, eps)
    fx = np.asarray(flux_coeff(_norm(xi) ** 2, par))[..., None] * xi
    fe = np.asarray(flux_coeff(_norm(eta) ** 2, par))[..., None] * eta
    lhs = _dot(fx - fe, xi - eta)
    scale = (_norm(fx) + _norm(fe)) * _norm(xi - eta)
    return lhs >= -RTOL * scale, lhs, np.zeros_like(lhs)


@dataclass(frozen=True)
class _Flux:
    # duck-typed stand-in for ModelParams allowing per-sample arrays
    p: object
    beta: object
    eps: object


def check_mobility_bounds(gx, gy, q, xi):
    """``|xi|^2/(1+q|g|) <= xi^T M(g) xi <= |xi|^2``."""
    xi = np.asarray(xi, float)
    m11, m12, m22 = mobility_entries(gx, gy, q)
    quad = m11 * xi[..., 0] ** 2 + 2 * m12 * xi[..., 0] * xi[..., 1] + m22 * xi[..., 1] ** 2
    n2 = _norm(xi) ** 2
    lower = n2 / (1.0 + np.asarray(q) * np.hypot(gx, gy))
    # the quadratic form is evaluated from entries of size one, so its roundoff
    # is relative to |xi|^2 rather than to the (possibly tiny) lower bound
    tol = RTOL * n2
    ok = (quad >= lower - tol) & (quad <= n2 + tol)
    return ok, quad, lower


# scalar conveniences ----------------------------------------------------------


def oracle_power_convexity(x, y, p) -> bool:
    return bool(np.all(check_power_convexity(x, y, p)[0]))


def oracle_young(a, b, eps, p, q=None) -> bool:
    if q is not None and abs(1 / p + 1 / q - 1) > 1e-12:
        raise ValueError("p and q must be conjugate exponents")
    if not (np.all(np.asarray(a) > 0) and np.all(np.asarray(b) > 0) and np.all(np.asarray(eps) > 0)):
        raise ValueError("a, b and eps must be positive")
    return bool(np.all(check_young(a, b, eps, p)[0]))


def oracle_increasing_antideriv(fn: IncreasingFunction, s, t) -> bool:
    return bool(np.all(check_increasing_antideriv(fn, s, t)[0]))


def oracle_oden_high_p(x, y, p) -> bool:
    if not p > 2:
        raise ValueError("p must exceed 2")
    return bool(np.all(check_oden_high_p(x, y, p)[0]))


def oracle_oden_low_p(x, y, p) -> bool:
    if not 1 < p <= 2:
        raise ValueError("p must lie in (1, 2]")
    return bool(np.all(check_oden_low_p(x, y, p)[0]))


def oracle_flux_monotone(xi, eta, params: ModelParams) -> bool:
    return bool(np.all(check_flux_monotone(xi, eta, params.p, params.beta, params.eps)[0]))


def oracle_mobility_bounds(gx, gy, q, xi) -> bool:
    return bool(np.all(check_mobility_bounds(gx, gy, q, xi)[0]))


# --------------------------------------------------------------------------
# sampling


class _Sampler:
    """Per-variable counter-based streams over a window of sample indices.

    Each call draws a fresh variable whose values are a function of
    ``(seed, oracle, variable, sample index)`` only, so a batch split into
    chunks reproduces the unsplit batch exactly.
    """

    def __init__(self, cfg: SampleConfig, stream: int, start: int = 0):
        self.cfg = cfg
        self.stream = stream
        self.start = start
        self._var = 0

    def _random(self, n):
        key = [self.cfg.seed, (self.stream << 16) | self._var]
        self._var += 1
        # Philox emits four 64-bit words per counter step; one word per double
        bg = np.random.Philox(key=key, counter=[self.start // 4, 0, 0, 0])
        skip = self.start % 4
        return np.random.Generator(bg).random(n + skip)[skip:]

    def uniform(self, n, lo=0.0, hi=1.0):
        return lo + (hi - lo) * self._random(n)

    def loguniform(self, n, lo=None, hi=None):
        lo = self.cfg.lo if lo is None else lo
        hi = self.cfg.hi if hi is None else hi
        return np.exp(self.uniform(n, np.log(lo), np.log(hi)))

    def vectors(self, n, lo=None, hi=None):
        r = self.loguniform(n, lo, hi)
        th = self.uniform(n, 0.0, 2 * np.pi)
        return np.column_stack([r * np.cos(th), r * np.sin(th)])

    def pairs(self, n, lo=None, hi=None):
        """Independent pairs, with a quarter replaced by near neighbours and some zeros."""
        x = self.vectors(n, lo, hi)
        y = self.vectors(n, lo, hi)
        near = self.uniform(n) < 0.25
        rel = self.loguniform(n, 1e-10, 1e-1)
        y = np.where(near[:, None], x * (1 + rel[:, None]) + rel[:, None] * _norm(x)[:, None] * self.vectors(n, 1.0, 1.0), y)
        zero = self.uniform(n) < 0.01
        x = np.where(zero[:, None], 0.0, x)
        return x, y

    def choice(self, n, options):
        idx = np.minimum((self.uniform(n) * len(options)).astype(int), len(options) - 1)
        return np.asarray(options, dtype=float)[idx]


@dataclass
class OracleResult:
    name: str
    samples: int
    failures: list = field(default_factory=list)
    seconds: float = 0.0
    extra_failures: int = 0  # counterexamples beyond the reported ones

    @property
    def passed(self) -> bool:
        return not self.failures


def _failures(name, ok, lhs, rhs, inputs: dict, start=0, limit=100):
    rows = []
    for i in np.flatnonzero(~ok)[:max(limit, 0)]:
        desc = ";".join(f"{k}={np.array2string(np.asarray(v[i]), precision=17, separator=' ')}" for k, v in inputs.items())
        rows.append((name, start + int(i), repr(float(lhs[i])), repr(float(rhs[i])), desc))
    return rows


def _run_power_convexity(n, s):
    p = s.choice(n, [1.5, 2.0, 3.0, 4.0])
    x, y = s.pairs(n)
    ok, lhs, rhs = check_power_convexity(x, y, p)
    return ok, lhs, rhs, dict(x=x, y=y, p=p)


def _run_young(n, s):
    p = s.choice(n, [1.2, 1.5, 2.0, 3.0, 4.0])
    a = s.loguniform(n)
    eps = s.loguniform(n, 1e-2, 1e2)
    b = s.loguniform(n)
    # a tenth of the samples sit on the closest-approach family
    closest = s.uniform(n) < 0.1
    b = np.where(closest, young_closest_b(a, eps, p), b)
    ok, lhs, rhs = check_young(a, b, eps, p)
    return ok, lhs, rhs, dict(a=a, b=b, eps=eps, p=p)


def _run_increasing(n, s):
    which = np.minimum((s.uniform(n) * len(CATALOG)).astype(int), len(CATALOG) - 1)
    sgn_s = np.where(s.uniform(n) < 0.5, -1.0, 1.0)
    sgn_t = np.where(s.uniform(n) < 0.5, -1.0, 1.0)
    ms, mt = s.loguniform(n), s.loguniform(n)
    bs, bt = s.uniform(n, -50, 50), s.uniform(n, -50, 50)
    ok = np.ones(n, bool)
    lhs = np.zeros(n)
    rhs = np.zeros(n)
    sv = np.zeros(n)
    tv = np.zeros(n)
    for i, fn in enumerate(CATALOG):
        m = which == i
        if fn.domain == "real":
            sv[m], tv[m] = sgn_s[m] * ms[m], sgn_t[m] * mt[m]
        elif fn.domain == "nonneg":
            sv[m], tv[m] = ms[m], mt[m]
        else:
            sv[m], tv[m] = bs[m], bt[m]
        ok[m], lhs[m], rhs[m] = check_increasing_antideriv(fn, sv[m], tv[m])
    names = np.array([fn.name for fn in CATALOG])[which]
    return ok, lhs, rhs, dict(f=names, s=sv, t=tv)


def _run_oden_high(n, s):
    p = s.choice(n, [2.5, 3.0, 4.0])
    x, y = s.pairs(n)
    ok, lhs, rhs = check_oden_high_p(x, y, p)
    return ok, lhs, rhs, dict(x=x, y=y, p=p)


def _run_oden_low(n, s):
    p = s.choice(n, [1.2, 1.5, 1.9, 2.0])
    x, y = s.pairs(n)
    ok, lhs, rhs = check_oden_low_p(x, y, p)
    return ok, lhs, rhs, dict(x=x, y=y, p=p)


def _run_flux(n, s):
    p = s.choice(n, [1.2, 2.0, 3.0])
    beta = s.choice(n, [0.0, 1.0, 5.0])
    eps = s.loguniform(n, 1e-6, 1.0)
    x, y = s.pairs(n)
    ok, lhs, rhs = check_flux_monotone(x, y, p, beta, eps)
    return ok, lhs, rhs, dict(xi=x, eta=y, p=p, beta=beta, eps=eps)


def _run_mobility(n, s):
    g = s.vectors(n)
    q = s.loguniform(n)
    q = np.where(s.uniform(n) < 0.05, 0.0, q)
    facet = s.uniform(n) < 0.02
    g = np.where(facet[:, None], 0.0, g)
    xi = s.vectors(n, 1e-4, 1e4)
    # some samples aligned with the gradient, where the lower bound is attained
    aligned = s.uniform(n) < 0.1
    xi = np.where(aligned[:, None], g * s.loguniform(n, 1e-4, 1e4)[:, None], xi)
    xi = np.where((aligned & facet)[:, None], s.vectors(n, 1.0, 1.0), xi)
    ok, lhs, rhs = check_mobility_bounds(g[:, 0], g[:, 1], q, xi)
    return ok, lhs, rhs, dict(g=g, q=q, xi=xi)


SUITE = (
    ("power_convexity", _run_power_convexity),
    ("young", _run_young),
    ("increasing_antideriv", _run_increasing),
    ("oden_high_p", _run_oden_high),
    ("oden_low_p", _run_oden_low),
    ("flux_monotone", _run_flux),
    ("mobility_bounds", _run_mobility),
)


def run_suite(cfg: SampleConfig = SampleConfig(), only: tuple | None = None,
              limit: int = 100) -> list[OracleResult]:
    """Run the oracles over ``cfg.samples`` samples each, in chunks of ``cfg.chunk``.

    At most ``limit`` counterexamples are kept per oracle.
    """
    results = []
    for stream, (name, runner) in enumerate(SUITE):
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        res = OracleResult(name, cfg.samples)
        for start in range(0, cfg.samples, cfg.chunk):
            n = min(cfg.chunk, cfg.samples - start)
            with np.errstate(over="ignore", invalid="ignore"):
                ok, lhs, rhs, inputs = runner(n, _Sampler(cfg, stream, start))
            # non-finite terms count as failures
            ok = ok & np.isfinite(lhs) & np.isfinite(rhs)
            shown = _failures(name, ok, lhs, rhs, inputs, start, limit - len(res.failures))
            res.failures += shown
            res.extra_failures += int(np.count_nonzero(~ok)) - len(shown)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


FAILURE_COLUMNS = ("oracle", "sample", "lhs", "rhs", "inputs")


def failures_csv(results) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(FAILURE_COLUMNS)
    for r in results:
        wr.writerows(r.failures)
    return buf.getvalue()
