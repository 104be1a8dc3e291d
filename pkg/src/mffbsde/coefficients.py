"""Coefficient bundles for one population and their runtime checks.

All coefficient callables are batched over particles:

=========  ==============================  =================
function   arguments                       returns
=========  ==============================  =================
h          t, x (N, m)                     (N, m)
b          t, x, y (N, n), z (N, n, d), m  (N, m)
sigma      t, x                            (N, m, d) or (m, d)
f          t, x, y, z, m                   (N, n)
g          x, m                            (N, n)
=========  ==============================  =================

``m`` is the list of per-population :class:`~mffbsde.measures.EmpiricalMeasure`
at the current time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .exceptions import SingularDiffusion
from .measures import EmpiricalMeasure


@dataclass(frozen=True)
class CoefficientBundle:
    h: Callable
    b: Callable
    sigma: Callable
    f: Callable
    g: Callable
    C_growth: float = 1.0
    r: float = 0.0
    ellipticity_eps: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if not self.ellipticity_eps > 0:
            raise ValueError("ellipticity_eps must be > 0")
        if self.C_growth < 0:
            raise ValueError("C_growth must be >= 0")
        if self.r < 0:
            raise ValueError("growth exponent r must be >= 0")

    def dimensions(self, x0, measures=None):
        """Probe every function at ``x0`` and return ``(m, n, d)``."""
        x = np.atleast_2d(np.asarray(x0, dtype=float))
        m = x.shape[1]
        if measures is None:
            measures = [EmpiricalMeasure(x)]
        sig = _sigma_batch(self.sigma(0.0, x), 1)
        if sig.shape[1] != m:
            raise ValueError(f"sigma has {sig.shape[1]} rows for state dimension {m}")
        d = sig.shape[2]
        gx = np.atleast_2d(self.g(x, measures))
        n = gx.shape[1]
        y = np.zeros((1, n))
        z = np.zeros((1, n, d))
        checks = {
            "h": (np.asarray(self.h(0.0, x)), m),
            "b": (np.asarray(self.b(0.0, x, y, z, measures)), m),
            "f": (np.asarray(self.f(0.0, x, y, z, measures)), n),
        }
        for key, (val, want) in checks.items():
            if np.atleast_2d(val).shape[-1] != want:
                raise ValueError(f"{key} returns dimension {np.atleast_2d(val).shape[-1]}, expected {want}")
        return m, n, d


@dataclass
class PopulationSystem:
    """H coupled populations, each with its own bundle and initial point."""

    bundles: list
    initial_points: list
    dims: list = field(init=False)

    def __post_init__(self):
        if len(self.bundles) < 1:
            raise ValueError("a population system needs H >= 1")
        if len(self.bundles) != len(self.initial_points):
            raise ValueError("one initial point per population")
        self.initial_points = [np.atleast_1d(np.asarray(x, dtype=float)) for x in self.initial_points]
        measures = [EmpiricalMeasure(x[None, :]) for x in self.initial_points]
        self.dims = [b.dimensions(x, measures) for b, x in zip(self.bundles, self.initial_points)]
        if len({d[0] for d in self.dims}) != 1:
            raise ValueError("all populations must share the state dimension m")

    @property
    def H(self):
        return len(self.bundles)


def _sigma_batch(sig, n):
    sig = np.asarray(sig, dtype=float)
    if sig.ndim == 2:
        return np.broadcast_to(sig, (n,) + sig.shape)
    return sig


def diffuse(sig, dw):
    """``sigma @ dW`` for batched or constant ``sigma``."""
    sig = np.asarray(sig, dtype=float)
    if sig.ndim == 2:
        return dw @ sig.T
    return np.einsum("nmd,nd->nm", sig, dw)


def _pinv_factor(sig, eps):
    # sigma^T (sigma sigma^T)^{-1}, batched over the leading axis
    a = sig @ np.swapaxes(sig, -1, -2)
    ev = np.linalg.eigvalsh(a)
    if np.any(ev[..., 0] <= 1e-12 * np.maximum(1.0, ev[..., -1])):
        raise SingularDiffusion("sigma sigma^T is numerically singular")
    return np.swapaxes(sig, -1, -2) @ np.linalg.inv(a)


def reduced_drift(bundle, t, x, y, z, m):
    """Girsanov integrand sigma^T (sigma sigma^T)^{-1} b, shape (N, d)."""
    x = np.atleast_2d(x)
    bval = np.atleast_2d(bundle.b(t, x, y, z, m))
    sig = np.asarray(bundle.sigma(t, x), dtype=float)
    if sig.ndim == 2:
        return bval @ _pinv_factor(sig, bundle.ellipticity_eps).T
    return np.einsum("ndm,nm->nd", _pinv_factor(sig, bundle.ellipticity_eps), bval)


def shifted_driver(bundle, t, x, y, z, m):
    """Backward driver after the measure change: f + z . btilde, shape (N, n)."""
    fval = np.atleast_2d(bundle.f(t, x, y, z, m))
    bt = reduced_drift(bundle, t, x, y, z, m)
    return fval + np.einsum("nij,nj->ni", np.asarray(z, dtype=float), bt)


reduced_drift_btilde = reduced_drift
shifted_driver_fbar = shifted_driver


@dataclass
class ProbeSpec:
    """Probe points for :func:`validate_assumptions`.

    ``x_offsets`` are added to each population's initial point along every
    coordinate axis; ``y_values`` and ``z_values`` fill all entries.
    """

    t_fractions: tuple = (0.0, 0.5, 1.0)
    x_offsets: tuple = (-10.0, -1.0, 0.0, 1.0, 10.0)
    y_values: tuple = (-1.0, 0.0, 1.0)
    z_values: tuple = (-1.0, 0.0, 1.0)
    T: float = 1.0
    n_directions: int = 16
    measure_size: int = 64
    jitters: tuple = (1e-1, 1e-2, 1e-3, 1e-4)

    def __post_init__(self):
        if not (self.t_fractions and self.x_offsets and self.y_values and self.z_values):
            raise ValueError("probe spec must be nonempty")


@dataclass
class CheckResult:
    name: str
    population: int
    passed: bool
    worst: float
    bound: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_dict(self):
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "population": c.population, "passed": c.passed,
                 "worst": c.worst, "bound": c.bound, "detail": c.detail}
                for c in self.checks
            ],
        }


def _probe_batch(x0, spec, n, d):
    m = x0.size
    xs = [x0.copy()]
    for j in range(m):
        for off in spec.x_offsets:
            if off != 0.0:
                p = x0.copy()
                p[j] += off
                xs.append(p)
    rows = []
    for t in spec.t_fractions:
        for x in xs:
            for y in spec.y_values:
                for z in spec.z_values:
                    rows.append((t * spec.T, x, np.full(n, y), np.full((n, d), z)))
    return rows


def validate_assumptions(system, probe_spec=None, seed=0):
    """Sampled falsification of ellipticity, growth and measure-continuity bounds.

    A failed check is definitive; a pass is only evidence.
    """
    spec = probe_spec or ProbeSpec()
    checks = []
    for i, (bundle, x0) in enumerate(zip(system.bundles, system.initial_points)):
        m, n, d = system.dims[i]
        gen = rng.generator(seed, rng.STREAM_PROBE, i)
        measures = [
            EmpiricalMeasure(xj + gen.standard_normal((spec.measure_size, xj.size)))
            for xj in system.initial_points
        ]
        rows = _probe_batch(x0, spec, n, d)
        eps = bundle.ellipticity_eps
        C, r = bundle.C_growth, bundle.r

        # (a) ellipticity over probes and random directions
        lo, hi = np.inf, 0.0
        dirs = gen.standard_normal((spec.n_directions, m))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for t, x, _, _ in rows:
            sig = _sigma_batch(bundle.sigma(t, x[None, :]), 1)[0]
            a = sig @ sig.T
            q = np.einsum("ij,jk,ik->i", dirs, a, dirs)
            lo, hi = min(lo, q.min()), max(hi, q.max())
        ok = bool(lo >= 1.0 / eps * (1 - 1e-12) and hi <= eps * (1 + 1e-12))
        checks.append(CheckResult("ellipticity", i, ok, float(min(lo * eps, eps / hi if hi > 0 else np.inf)), 1.0,
                                  f"quadratic form range [{lo:.6g}, {hi:.6g}] vs [{1 / eps:.6g}, {eps:.6g}]"))

        # (b) bounded drift, (c) growth of g and f
        worst_b = worst_g = worst_f = 0.0
        ratio_g = ratio_f = 0.0
        for t, x, y, z in rows:
            xb, yb, zb = x[None, :], y[None, :], z[None, :, :]
            bn = float(np.linalg.norm(bundle.b(t, xb, yb, zb, measures)))
            worst_b = max(worst_b, bn)
            xn = np.linalg.norm(x)
            gn = float(np.linalg.norm(bundle.g(xb, measures)))
            gb = C * (1 + xn ** r)
            ratio_g = max(ratio_g, gn / gb if gb > 0 else (np.inf if gn > 0 else 0.0))
            worst_g = max(worst_g, gn)
            fn = float(np.linalg.norm(bundle.f(t, xb, yb, zb, measures)))
            fb = C * (1 + xn ** r + np.linalg.norm(y) + np.linalg.norm(z))
            ratio_f = max(ratio_f, fn / fb if fb > 0 else (np.inf if fn > 0 else 0.0))
            worst_f = max(worst_f, fn)
        checks.append(CheckResult("drift_bound", i, worst_b <= C * (1 + 1e-12), worst_b, C, "|b| <= C_growth"))
        checks.append(CheckResult("terminal_growth", i, ratio_g <= 1 + 1e-12, worst_g, C,
                                  f"max |g| / C(1+|x|^r) = {ratio_g:.6g}"))
        checks.append(CheckResult("driver_growth", i, ratio_f <= 1 + 1e-12, worst_f, C,
                                  f"max |f| / C(1+|x|^r+|y|+|z|) = {ratio_f:.6g}"))

        # (d) continuity in the measure argument under shrinking sample jitter
        changes = []
        for jit in spec.jitters:
            jgen = rng.generator(seed, rng.STREAM_PROBE, 1000 + i)
            moved = [EmpiricalMeasure(mu.samples + jit * jgen.standard_normal(mu.samples.shape)) for mu in measures]
            worst = 0.0
            for t, x, y, z in rows[:: max(1, len(rows) // 64)]:
                xb, yb, zb = x[None, :], y[None, :], z[None, :, :]
                for fn in (lambda mm: bundle.b(t, xb, yb, zb, mm),
                           lambda mm: bundle.f(t, xb, yb, zb, mm),
                           lambda mm: bundle.g(xb, mm)):
                    worst = max(worst, float(np.max(np.abs(np.asarray(fn(moved)) - np.asarray(fn(measures))))))
            changes.append(worst)
        ok = changes[-1] <= 1e-2 * max(changes[0], 1.0)
        checks.append(CheckResult("measure_continuity", i, bool(ok), changes[-1], 1e-2 * max(changes[0], 1.0),
                                  "output change per jitter " + ", ".join(f"{c:.3g}" for c in changes)))
    return ValidationReport(checks)
