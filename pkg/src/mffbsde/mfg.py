"""Multi-population mean-field games through the Pontryagin adjoint system.

Callables of a :class:`Population` are batched over particles; ``a`` is a
control batch of shape ``(N, k)``:

=========  ===========================  ===========
function   arguments                    returns
=========  ===========================  ===========
h          t, x                         (N, m)
b          t, x, m, a                   (N, m)
sigma      t, x                         (m, d) or (N, m, d)
f          t, x, m, a                   (N,)
g          x, m                         (N,)
=========  ===========================  ===========

Optional gradient hooks (finite differences otherwise): ``dx_h -> (N, m, m)``,
``dx_b -> (N, m, m)``, ``da_b -> (N, m, k)``, ``dx_f -> (N, m)``,
``da_f -> (N, k)``, ``dx_g -> (N, m)``; ``argmin(t, x, y, m) -> (N, k)`` is a
closed-form Hamiltonian minimizer.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np

from . import rng
from .coefficients import CoefficientBundle, PopulationSystem, _pinv_factor, diffuse
from .exceptions import ControlOutOfSet, MissingGradient, NonConvergence
from .lsmc import evaluate_u

NEWTON_TOL = 1e-8
NEWTON_STEPS = 100


class ControlSet:
    """Compact box ``[lower, upper]`` in R^k."""

    def __init__(self, lower, upper):
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds need the same shape")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("control bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        self.lower, self.upper = lo, hi

    @property
    def dim(self):
        return self.lower.size

    def project(self, a):
        return np.clip(np.asarray(a, dtype=float), self.lower, self.upper)

    def contains(self, a, atol=0.0):
        a = np.asarray(a, dtype=float)
        return bool(np.all(a >= self.lower - atol) and np.all(a <= self.upper + atol))

    def grid(self, resolution):
        """Tensor grid in lexicographic order, shape (resolution^k, k)."""
        if resolution < 2:
            raise ValueError("grid resolution must be >= 2")
        axes = [np.linspace(l, u, resolution) for l, u in zip(self.lower, self.upper)]
        return np.array(list(product(*axes)))

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass
class Population:
    """One representative player: dynamics, costs, control set and hooks."""

    h: Callable
    b: Callable
    sigma: Callable
    f: Callable
    g: Callable
    control_set: ControlSet
    x0: np.ndarray
    dx_h: Optional[Callable] = None
    dx_b: Optional[Callable] = None
    da_b: Optional[Callable] = None
    dx_f: Optional[Callable] = None
    da_f: Optional[Callable] = None
    dx_g: Optional[Callable] = None
    argmin: Optional[Callable] = None
    fd_step: float = 1e-5
    allow_fd: bool = True
    C_growth: float = 1.0
    r: float = 0.0
    ellipticity_eps: float = 1.0
    name: str = "player"

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")


@dataclass
class GameSpec:
    populations: list

    def __post_init__(self):
        if not self.populations:
            raise ValueError("a game needs at least one population")

    @property
    def H(self):
        return len(self.populations)


def _rows(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def _fd_jacobian(fn, x, step, out_dim=None):
    """Central differences of ``fn`` (N, p) -> (N, q); returns (N, q, p)."""
    x = _rows(x)
    cols = []
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = step
        cols.append((np.asarray(fn(x + e), dtype=float) - np.asarray(fn(x - e), dtype=float)) / (2 * step))
    J = np.stack(cols, axis=-1)
    if J.ndim == 2:
        J = J[:, None, :]
    return J


def _need_fd(pop, what):
    if not pop.allow_fd:
        raise MissingGradient(f"no hook for {what} and finite differences are disabled")


def _drift(pop, t, x, m, a):
    return np.asarray(pop.h(t, x), dtype=float) + np.asarray(pop.b(t, x, m, a), dtype=float)


def hamiltonian(pop, t, x, y, m, a):
    """b(t, x, m, a) . y + f(t, x, m, a) for a batch of points."""
    x, y, a = _rows(x), _rows(y), _rows(a)
    if not pop.control_set.contains(a):
        raise ControlOutOfSet("control outside the admissible box")
    bval = _rows(pop.b(t, x, m, a))
    return np.sum(bval * y, axis=1) + np.asarray(pop.f(t, x, m, a), dtype=float).reshape(-1)


def _grad_a(pop, t, x, y, m, a):
    if pop.da_b is not None:
        gb = np.einsum("nmk,nm->nk", np.asarray(pop.da_b(t, x, m, a), dtype=float), y)
    else:
        _need_fd(pop, "da_b")
        gb = np.einsum("nmk,nm->nk", _fd_jacobian(lambda aa: pop.b(t, x, m, aa), a, pop.fd_step), y)
    if pop.da_f is not None:
        gf = _rows(pop.da_f(t, x, m, a)).reshape(a.shape)
    else:
        _need_fd(pop, "da_f")
        gf = _fd_jacobian(lambda aa: np.asarray(pop.f(t, x, m, aa)).reshape(-1, 1), a, pop.fd_step)[:, 0, :]
    return gb + gf


def _objective(pop, t, x, y, m, a):
    return np.sum(_rows(pop.b(t, x, m, a)) * y, axis=1) + np.asarray(pop.f(t, x, m, a), dtype=float).reshape(-1)


def minimize_hamiltonian(pop, t, x, y, m):
    """Pointwise minimizer of a -> H(t, x, y, m, a) over the control box.

    Uses the ``argmin`` hook when present, otherwise a batched projected Newton
    iteration with Armijo backtracking.
    """
    x, y = _rows(x), _rows(y)
    A = pop.control_set
    if pop.argmin is not None:
        return A.project(_rows(pop.argmin(t, x, y, m)).reshape(x.shape[0], A.dim))
    N, k = x.shape[0], A.dim
    a = np.broadcast_to(0.5 * (A.lower + A.upper), (N, k)).copy()
    lo, hi = A.lower, A.upper
    step = pop.fd_step
    for _ in range(NEWTON_STEPS):
        g = _grad_a(pop, t, x, y, m, a)
        pg = A.project(a - g) - a
        if np.max(np.linalg.norm(pg, axis=1)) <= NEWTON_TOL:
            return a
        Hs = _fd_jacobian(lambda aa: _grad_a(pop, t, x, y, m, aa), a, step)
        Hs = 0.5 * (Hs + np.swapaxes(Hs, 1, 2))
        free = ~(((a <= lo) & (g > 0)) | ((a >= hi) & (g < 0)))
        mask = free[:, :, None] & free[:, None, :]
        Hm = np.where(mask, Hs, 0.0) + np.eye(k)[None] * (~free)[:, :, None]
        rhs = np.where(free, -g, 0.0)
        try:
            d = np.linalg.solve(Hm, rhs[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            d = -g
        bad = np.sum(d * g, axis=1) >= 0
        d[bad] = -g[bad]
        f0 = _objective(pop, t, x, y, m, a)
        s = np.ones(N)
        new = A.project(a + d)
        for _ in range(40):
            fn = _objective(pop, t, x, y, m, new)
            ok = fn <= f0 + 1e-4 * np.sum(g * (new - a), axis=1) + 1e-14 * (1 + np.abs(f0))
            if np.all(ok):
                break
            s = np.where(ok, s, 0.5 * s)
            new = A.project(a + s[:, None] * d)
        a = new
    g = _grad_a(pop, t, x, y, m, a)
    res = float(np.max(np.linalg.norm(A.project(a - g) - a, axis=1)))
    if res > NEWTON_TOL:
        raise NonConvergence(f"projected Newton stopped with projected-gradient norm {res:.3g}")
    return a


def shifted_game_driver(pop, t, x, m, z, a):
    """f(t, x, m, a) + z . btilde(t, x, m, a) for a batch of controls at one point."""
    x, a = _rows(x), _rows(a)
    bval = _rows(pop.b(t, x, m, a))
    sig = np.asarray(pop.sigma(t, x), dtype=float)
    if sig.ndim == 3:
        sig = sig[0]
    bt = bval @ _pinv_factor(sig, pop.ellipticity_eps).T
    zz = np.asarray(z, dtype=float).reshape(-1)
    return np.asarray(pop.f(t, x, m, a), dtype=float).reshape(-1) + bt @ zz


def maximize_shifted_driver(pop, t, x, m, z, grid_resolution=101):
    """sup over the control box of the shifted driver at a single point.

    Exhaustive tensor-grid search (first maximizer in lexicographic order),
    then projected gradient ascent from the best grid point.

    Returns
    -------
    (a_hat, value)
    """
    A = pop.control_set
    x = _rows(x)[:1]
    cand = A.grid(grid_resolution)
    vals = shifted_game_driver(pop, t, np.repeat(x, len(cand), axis=0), m, z, cand)
    j = int(np.argmax(vals))  # first occurrence = lexicographically smallest
    a, best = cand[j].copy(), float(vals[j])
    h = pop.fd_step
    lr = float(np.max(A.upper - A.lower)) / (grid_resolution - 1)
    for _ in range(200):
        grad = np.array([
            (shifted_game_driver(pop, t, x, m, z, (a + e)[None])[0]
             - shifted_game_driver(pop, t, x, m, z, (a - e)[None])[0]) / (2 * h)
            for e in np.eye(A.dim) * h
        ])
        moved = False
        step = lr
        while step > 1e-12:
            trial = A.project(a + step * grad)
            v = float(shifted_game_driver(pop, t, x, m, z, trial[None])[0])
            if v > best + 1e-15:
                a, best, moved = trial, v, True
                break
            step *= 0.5
        if not moved:
            break
    return a, best


def _jac_x_drift(pop, t, x, m, a):
    if pop.dx_h is not None:
        Jh = np.asarray(pop.dx_h(t, x), dtype=float)
    else:
        _need_fd(pop, "dx_h")
        Jh = _fd_jacobian(lambda xx: pop.h(t, xx), x, pop.fd_step)
    if pop.dx_b is not None:
        Jb = np.asarray(pop.dx_b(t, x, m, a), dtype=float)
    else:
        _need_fd(pop, "dx_b")
        Jb = _fd_jacobian(lambda xx: pop.b(t, xx, m, a), x, pop.fd_step)
    return Jh.reshape(x.shape[0], x.shape[1], x.shape[1]) + Jb.reshape(x.shape[0], x.shape[1], x.shape[1])


def _grad_x_f(pop, t, x, m, a):
    if pop.dx_f is not None:
        return _rows(pop.dx_f(t, x, m, a)).reshape(x.shape)
    _need_fd(pop, "dx_f")
    return _fd_jacobian(lambda xx: np.asarray(pop.f(t, xx, m, a)).reshape(-1, 1), x, pop.fd_step)[:, 0, :]


def _grad_x_g(pop, x, m):
    if pop.dx_g is not None:
        return _rows(pop.dx_g(x, m)).reshape(x.shape)
    _need_fd(pop, "dx_g")
    return _fd_jacobian(lambda xx: np.asarray(pop.g(xx, m)).reshape(-1, 1), x, pop.fd_step)[:, 0, :]


def adjoint_driver(pop, t, x, y, m, a):
    """d/dx of the Hamiltonian with the drift h + b: J_x(h + b)^T y + grad_x f."""
    x, y = _rows(x), _rows(y)
    return np.einsum("nji,nj->ni", _jac_x_drift(pop, t, x, m, a), y) + _grad_x_f(pop, t, x, m, a)


def _pontryagin_bundle(pop):
    def control(t, x, y, m):
        return minimize_hamiltonian(pop, t, x, y, m)

    def b(t, x, y, z, m):
        x = _rows(x)
        return _rows(pop.b(t, x, m, control(t, x, y, m)))

    def f(t, x, y, z, m):
        x = _rows(x)
        return adjoint_driver(pop, t, x, y, m, control(t, x, y, m))

    def g(x, m):
        return _grad_x_g(pop, _rows(x), m)

    return CoefficientBundle(h=pop.h, b=b, sigma=pop.sigma, f=f, g=g, C_growth=pop.C_growth,
                             r=pop.r, ellipticity_eps=pop.ellipticity_eps, name=pop.name)


def assemble_pontryagin(game):
    """Coupled mean-field FBSDE whose fixed points give equilibrium candidates.

    Forward drift h + b(t, x, m, a*(t, x, y, m)); backward driver d/dx H at a*;
    terminal grad_x g.
    """
    for pop in game.populations:
        if not pop.allow_fd:
            missing = [n for n in ("dx_h", "dx_b", "dx_f", "dx_g") if getattr(pop, n) is None]
            if pop.argmin is None:
                missing += [n for n in ("da_b", "da_f") if getattr(pop, n) is None]
            if missing:
                raise MissingGradient(f"population {pop.name!r} lacks hooks {missing} and finite differences are disabled")
    return PopulationSystem([_pontryagin_bundle(p) for p in game.populations],
                            [p.x0 for p in game.populations])


@dataclass
class CostEstimate:
    mean: float
    se: float
    samples: np.ndarray = field(repr=False)


def estimate_cost(game, pop_index, control_fn, flow, n_particles, seed, n_threads=1):
    """Monte Carlo cost of one population's feedback control against a frozen flow.

    ``control_fn(t, x) -> (N, k)`` is projected into the control box. The
    running cost uses left-endpoint quadrature.
    """
    pop = game.populations[pop_index]
    grid = flow.grid
    A = pop.control_set
    x = np.broadcast_to(pop.x0, (n_particles, pop.x0.size)).copy()
    sig0 = np.asarray(pop.sigma(0.0, x[:1]), dtype=float)
    d = sig0.shape[-1]
    dW = rng.brownian_increments(seed, rng.STREAM_COST + pop_index, n_particles, grid.dt, d, n_threads)
    J = np.zeros(n_particles)
    for k in range(grid.n_steps):
        t, dt = grid.points[k], grid.dt[k]
        mk = flow.at(k)
        a = A.project(_rows(control_fn(t, x)).reshape(n_particles, A.dim))
        J += np.asarray(pop.f(t, x, mk, a), dtype=float).reshape(-1) * dt
        x = x + _drift(pop, t, x, mk, a) * dt + diffuse(pop.sigma(t, x), dW[:, k, :])
    J += np.asarray(pop.g(x, flow.at(grid.n_steps)), dtype=float).reshape(-1)
    se = float(J.std(ddof=1) / np.sqrt(n_particles)) if n_particles > 1 else float("nan")
    return CostEstimate(float(J.mean()), se, J)


def feedback_control(pop, backward, flow):
    """alpha*(t, x) = argmin of the Hamiltonian at the fitted adjoint u(t, x)."""
    grid = flow.grid

    def control(t, x):
        k = min(grid.index_of(t), grid.n_steps)
        x = _rows(x)
        return minimize_hamiltonian(pop, t, x, evaluate_u(backward, k, x), flow.at(k))

    return control


@dataclass
class EquilibriumResult:
    report: object
    controls: list
    costs: list
    tables: list
    verification: object = None

    @property
    def flow(self):
        return self.report.flow

    def control_table_csv(self, fh=None):
        buf = io.StringIO()
        buf.write("population,time,x,alpha\n")
        for i, (ts, xs, al) in enumerate(self.tables):
            for k, t in enumerate(ts):
                for j, xv in enumerate(xs):
                    row = [str(i), format(float(t), ".17g"), format(float(xv), ".17g")]
                    row += [format(float(v), ".17g") for v in np.atleast_1d(al[k, j])]
                    buf.write(",".join(row) + "\n")
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text

    def to_dict(self):
        out = {
            "fixed_point": self.report.to_dict(),
            "costs": [{"mean": c.mean, "se": c.se} for c in self.costs],
        }
        if self.verification is not None:
            out["verification"] = self.verification.to_dict()
        return out


def control_table(pop, control, flow, n_x=21):
    """alpha*(t, x) on the time grid times an x-grid spanning the flow's 1-99% range."""
    lo = min(m.quantile(0.01, 0) for m in flow.measures[0])
    hi = max(m.quantile(0.99, 0) for m in flow.measures[0])
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    xs = np.linspace(lo, hi, n_x)
    base = np.broadcast_to(pop.x0, (n_x, pop.x0.size)).copy()
    base[:, 0] = xs
    ts = flow.grid.points[:-1]
    table = np.array([control(t, base) for t in ts])
    return ts, xs, table


@dataclass
class DeviationGap:
    population: int
    gap: float
    se: float
    pooled_se: float
    direction: list
    window: tuple


@dataclass
class VerificationReport:
    gaps: list
    base_costs: list
    n_sigma: float = 3.0

    @property
    def worst(self):
        return min(self.gaps, key=lambda g: g.gap / max(g.pooled_se, 1e-300)) if self.gaps else None

    @property
    def passed(self):
        return all(g.gap >= -self.n_sigma * g.pooled_se for g in self.gaps)

    @property
    def max_improvement(self):
        return max((-g.gap for g in self.gaps), default=0.0)

    def to_dict(self):
        return {
            "passed": self.passed,
            "n_sigma": self.n_sigma,
            "max_improvement": self.max_improvement,
            "base_costs": [{"mean": c.mean, "se": c.se} for c in self.base_costs],
            "gaps": [
                {"population": g.population, "gap": g.gap, "se": g.se, "pooled_se": g.pooled_se,
                 "direction": g.direction, "window": list(g.window)}
                for g in self.gaps
            ],
        }


def _bump(t, lo, hi):
    s = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
    return np.sin(np.pi * s) ** 2


def verify_equilibrium(game, flow, controls, n_perturbations=10, magnitude=0.2, seed=0,
                       n_particles=100_000, n_sigma=3.0, n_threads=1):
    """Unilateral-deviation test of a candidate equilibrium.

    For each population, deviations ``alpha + magnitude * bump(t) * v`` (unit
    ``v`` in antithetic pairs, sin^2 bump on a random time window, projected
    into the box) are costed with common random numbers against the frozen
    ``flow``. PASS when no deviation lowers the cost by more than ``n_sigma``
    pooled standard errors.
    """
    gaps, bases = [], []
    T = flow.grid.T
    for i, pop in enumerate(game.populations):
        base = estimate_cost(game, i, controls[i], flow, n_particles, seed, n_threads)
        bases.append(base)
        gen = rng.generator(seed, rng.STREAM_COST + 1000 + i)
        k = pop.control_set.dim
        v = None
        for j in range(n_perturbations):
            if j % 2 == 0:
                v = gen.standard_normal(k)
                v /= np.linalg.norm(v)
                length = gen.uniform(0.25, 1.0) * T
                start = gen.uniform(0.0, T - length)
                window = (start, start + length)
            else:
                v = -v

            def dev(t, x, v=v, window=window, ctrl=controls[i]):
                return pop.control_set.project(_rows(ctrl(t, x)) + magnitude * _bump(t, *window) * v)

            c = estimate_cost(game, i, dev, flow, n_particles, seed, n_threads)
            diff = c.samples - base.samples
            gaps.append(DeviationGap(
                i, float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(diff.size)),
                float(np.hypot(c.se, base.se)), v.tolist(), tuple(float(w) for w in window)))
    return VerificationReport(gaps, bases, n_sigma)
