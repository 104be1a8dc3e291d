"""The flow map psi and its damped fixed-point iteration.

``psi_map`` freezes a candidate measure flow, solves the resulting FBSDE for
every population and returns the flow of marginal laws of the state. Fixed
points of psi solve the mean-field FBSDE. Two routes are available:

``girsanov``
    simulate the driftless reference process, solve the backward equation with
    the shifted driver f + z . btilde along it, and reweight the reference
    marginals with the stochastic exponential of btilde.
``direct``
    same backward solve, then simulate the forward equation in closed loop
    with the fitted decoupling fields and take plain empirical marginals.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .coefficients import diffuse, reduced_drift, shifted_driver
from .exceptions import GridMismatch, PopulationCountMismatch
from .forward import simulate_feedback, simulate_reference
from .girsanov import doleans_exponential, martingale_diagnostic, weighted_law
from .lsmc import PolynomialBasis, evaluate_d, evaluate_u, solve_bsde
from .measures import (
    EmpiricalMeasure,
    MeasureFlow,
    check_same_grid,
    flow_distance,
    flow_distance_profile,
    holder_modulus,
    wasserstein1,
)

MODES = ("girsanov", "direct")


@dataclass
class PsiConfig:
    mode: str = "girsanov"
    n_particles: int = 10_000
    basis_degree: int = 3
    basis_clip: float = None
    seed: int = 0
    damping: float = 1.0
    tol: float = 0.02
    max_iter: int = 20
    n_threads: int = 1
    n_projections: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        # tol = 0 is accepted on purpose: it forces a max-iteration report
        if not self.tol >= 0:
            raise ValueError("tol must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.basis_degree < 0:
            raise ValueError("basis_degree must be >= 0")
        if self.basis_clip is not None and not self.basis_clip > 0:
            raise ValueError("basis_clip must be positive")
        if self.n_threads < 1:
            raise ValueError("n_threads must be >= 1")

    @property
    def basis(self):
        return PolynomialBasis(self.basis_degree, clip=self.basis_clip)


@dataclass
class FBSDESolution:
    """(X, Y, Z) for one population plus the noise driving X.

    In girsanov mode ``paths`` holds the reference process, ``weights`` the
    measure change and ``integrand`` the reduced drift; the Brownian motion of
    the weak solution is then ``dW - integrand dt``.
    """

    paths: object
    y: np.ndarray
    z: np.ndarray
    backward: object
    weights: object = None
    integrand: np.ndarray = None

    def noise(self):
        dW = self.paths.increments
        if self.integrand is None:
            return dW
        return dW - self.integrand * self.paths.grid.dt[None, :, None]

    def law(self, k):
        if self.weights is None:
            return EmpiricalMeasure(self.paths.states[:, k, :].copy())
        return weighted_law(self.paths, self.weights, k)


def _grid_of(flow, system):
    if flow.n_populations != system.H:
        raise PopulationCountMismatch(f"flow has {flow.n_populations} populations, system has {system.H}")
    return flow.grid


def reference_paths(system, grid, config):
    """Reference ensembles (h and sigma only); they do not depend on the flow."""
    return [
        simulate_reference(b, x0, grid, config.n_particles, config.seed,
                           stream=rng.STREAM_REFERENCE + i, n_threads=config.n_threads)
        for i, (b, x0) in enumerate(zip(system.bundles, system.initial_points))
    ]


def _psi_population(system, i, mu, config, ref):
    bundle = system.bundles[i]
    grid = mu.grid

    def driver(t, x, y, z, m):
        return shifted_driver(bundle, t, x, y, z, m)

    back = solve_bsde(ref, driver, bundle.g, mu, config.basis)
    if config.mode == "girsanov":
        X = ref.states
        theta = np.empty(ref.increments.shape)
        for k in range(grid.n_steps):
            theta[:, k, :] = reduced_drift(bundle, grid.points[k], X[:, k, :],
                                           back.y_values[:, k, :], back.z_values[:, k, :, :], mu.at(k))
        weights = doleans_exponential(ref, theta)
        laws = [weighted_law(ref, weights, k) for k in range(len(grid))]
        sol = FBSDESolution(ref, back.y_values, back.z_values, back, weights, theta)
        return laws, sol

    def y_fn(t, x):
        return evaluate_u(back, grid.index_of(t), x)

    def z_fn(t, x):
        return evaluate_d(back, grid.index_of(t), x)

    paths = simulate_feedback(bundle, system.initial_points[i], grid, config.n_particles, config.seed,
                              y_fn, z_fn, mu, stream=rng.STREAM_FEEDBACK + i, n_threads=config.n_threads)
    X = paths.states
    y = np.stack([evaluate_u(back, k, X[:, k, :]) for k in range(len(grid))], axis=1)
    z = np.stack([evaluate_d(back, k, X[:, k, :]) for k in range(grid.n_steps)], axis=1)
    laws = [EmpiricalMeasure(X[:, k, :].copy()) for k in range(len(grid))]
    return laws, FBSDESolution(paths, y, z, back)


def psi_map(system, mu, config, references=None, return_solutions=False):
    """Law flow of the state solved with the measure argument frozen at ``mu``."""
    grid = _grid_of(mu, system)
    refs = references if references is not None else reference_paths(system, grid, config)
    for r in refs:
        check_same_grid(r.grid, grid)

    def run(i):
        return _psi_population(system, i, mu, config, refs[i])

    if config.n_threads > 1 and system.H > 1:
        with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
            results = list(pool.map(run, range(system.H)))
    else:
        results = [run(i) for i in range(system.H)]
    out = MeasureFlow(grid, [laws for laws, _ in results])
    if return_solutions:
        return out, [sol for _, sol in results]
    return out


def _systematic_indices(weights, n_out, offset):
    u = (offset + np.arange(n_out)) / n_out
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, u, side="right"), weights.size - 1)


def mix_flows(mu, image, damping, n_particles, seed, iteration):
    """Particle-level relaxation: a ``damping`` share of the budget is drawn
    from ``image``, the rest from ``mu``.

    Systematic resampling with one offset per population and iteration, shared
    by all grid points, so the selected particles move coherently in time.
    """
    check_same_grid(mu.grid, image.grid)
    n_new = int(round(damping * n_particles))
    rows = []
    for i in range(mu.n_populations):
        gen = rng.generator(seed, rng.STREAM_MIX + i, iteration)
        u_new, u_old = gen.random(), gen.random()
        row = []
        for k in range(len(mu.grid)):
            parts = []
            if n_new > 0:
                src = image.measures[i][k]
                parts.append(src.samples[_systematic_indices(src.weights, n_new, u_new)])
            if n_particles - n_new > 0:
                src = mu.measures[i][k]
                parts.append(src.samples[_systematic_indices(src.weights, n_particles - n_new, u_old)])
            row.append(EmpiricalMeasure(np.concatenate(parts)))
        rows.append(row)
    return MeasureFlow(mu.grid, rows)


@dataclass
class ResidualReport:
    forward: list
    backward: list
    terminal: list
    marginal: list

    def to_dict(self):
        return {"forward": self.forward, "backward": self.backward,
                "terminal": self.terminal, "marginal": self.marginal}


def residual_check(system, flow, solutions, n_projections=64):
    """Monte Carlo residual norms of the discretized mean-field FBSDE.

    Per population: max over steps of the RMS one-step forward and backward
    residuals, RMS terminal gap, and sup over the grid of the W1 gap between
    ``flow`` and the law of X.
    """
    grid = _grid_of(flow, system)
    if len(solutions) != system.H:
        raise PopulationCountMismatch("one solution per population is required")
    fwd, bwd, term, marg = [], [], [], []
    for i, (bundle, sol) in enumerate(zip(system.bundles, solutions)):
        check_same_grid(sol.paths.grid, grid)
        X, Y, Z = sol.paths.states, sol.y, sol.z
        dW = sol.noise()
        rf = rb = 0.0
        for k in range(grid.n_steps):
            t, dt = grid.points[k], grid.dt[k]
            mk = flow.at(k)
            xk, yk, zk = X[:, k, :], Y[:, k, :], Z[:, k, :, :]
            drift = np.asarray(bundle.h(t, xk)) + np.asarray(bundle.b(t, xk, yk, zk, mk))
            r = X[:, k + 1, :] - xk - drift * dt - diffuse(bundle.sigma(t, xk), dW[:, k, :])
            rf = max(rf, float(np.sqrt(np.mean(np.sum(r * r, axis=1)))))
            fv = np.atleast_2d(bundle.f(t, xk, yk, zk, mk))
            r = Y[:, k + 1, :] - yk + fv * dt - np.einsum("nij,nj->ni", zk, dW[:, k, :])
            rb = max(rb, float(np.sqrt(np.mean(np.sum(r * r, axis=1)))))
        gT = np.atleast_2d(bundle.g(X[:, -1, :], flow.at(grid.n_steps)))
        gap = Y[:, -1, :] - gT
        fwd.append(rf)
        bwd.append(rb)
        term.append(float(np.sqrt(np.mean(np.sum(gap * gap, axis=1)))))
        marg.append(max(wasserstein1(flow.measures[i][k], sol.law(k), n_projections) for k in range(len(grid))))
    return ResidualReport(fwd, bwd, term, marg)


@dataclass
class FixedPointReport:
    rho_history: list
    iterates: list
    converged: bool
    flow: MeasureFlow
    image: MeasureFlow
    residual: ResidualReport = None
    holder_modulus: float = float("nan")
    solutions: list = field(default=None, repr=False)
    weight_diagnostics: list = field(default=None, repr=False)

    @property
    def status(self):
        return "converged" if self.converged else "max_iter_exceeded"

    @property
    def n_iter(self):
        return len(self.rho_history)

    def to_dict(self):
        out = {
            "status": self.status,
            "converged": self.converged,
            "iterations": self.n_iter,
            "rho_history": list(self.rho_history),
            "holder_modulus": self.holder_modulus,
            "mean_flow": self.flow.summary().tolist(),
        }
        if self.residual is not None:
            out["residual"] = self.residual.to_dict()
        if self.weight_diagnostics:
            out["min_ess_ratio"] = [float(np.min(d.ess_ratio)) for d in self.weight_diagnostics]
        return out


def iterate(system, mu0, config, references=None, keep_solutions=True, compute_holder=True):
    """Damped Picard iteration mu <- mix(mu, psi(mu)) until rho(mu, psi(mu)) <= tol.

    Never raises on non-convergence; the report carries the status.
    """
    grid = _grid_of(mu0, system)
    refs = references if references is not None else reference_paths(system, grid, config)
    mu = mu0
    history, iterates = [], []
    converged = False
    for it in range(config.max_iter):
        image, sols = psi_map(system, mu, config, refs, return_solutions=True)
        r = flow_distance(mu, image, config.n_projections, config.seed)
        history.append(r)
        iterates.append(image.summary())
        if r <= config.tol:
            converged = True
            break
        if it < config.max_iter - 1:
            mu = mix_flows(mu, image, config.damping, config.n_particles, config.seed, it)
    residual = residual_check(system, mu, sols, config.n_projections)
    diags = [martingale_diagnostic(s.weights) for s in sols if s.weights is not None]
    hm = holder_modulus(mu, config.n_projections, config.seed) if compute_holder else float("nan")
    return FixedPointReport(history, iterates, converged, mu, image, residual, hm,
                            sols if keep_solutions else None, diags)


@dataclass
class MultiStartReport:
    reports: list
    clusters: list
    distances: np.ndarray
    verdict: str
    threshold: float

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "threshold": self.threshold,
            "n_clusters": len(self.clusters),
            "clusters": [
                {"members": c, "representative_mean_flow": self.reports[c[0]].flow.summary().tolist()}
                for c in self.clusters
            ],
            "distances": [[None if np.isnan(v) else float(v) for v in row] for row in self.distances],
            "runs": [r.to_dict() for r in self.reports],
        }


def multi_start(system, inits, config, compute_holder=False):
    """Run :func:`iterate` from several initial flows and cluster the limits.

    Converged limits closer than 3 * tol in rho share a cluster (single
    linkage). Verdict is ``unique-candidate``, ``multiple-fixed-points`` or
    ``inconclusive`` (some run did not converge).
    """
    if len(inits) < 2:
        raise ValueError("multi_start needs at least 2 initial flows")
    grid = _grid_of(inits[0], system)
    refs = reference_paths(system, grid, config)

    def run(mu0):
        return iterate(system, mu0, config, refs, keep_solutions=False, compute_holder=compute_holder)

    if config.n_threads > 1:
        with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
            reports = list(pool.map(run, inits))
    else:
        reports = [run(mu0) for mu0 in inits]

    n = len(reports)
    dist = np.full((n, n), np.nan)
    ok = [i for i, r in enumerate(reports) if r.converged]
    for a in ok:
        dist[a, a] = 0.0
        for b in ok:
            if b > a:
                dist[a, b] = dist[b, a] = flow_distance(reports[a].flow, reports[b].flow,
                                                        config.n_projections, config.seed)
    threshold = 3 * config.tol
    parent = {i: i for i in ok}

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for a in ok:
        for b in ok:
            if b > a and dist[a, b] <= threshold:
                parent[find(b)] = find(a)
    groups = {}
    for i in ok:
        groups.setdefault(find(i), []).append(i)
    clusters = sorted(groups.values())
    if len(ok) < n:
        verdict = "inconclusive"
    elif len(clusters) == 1:
        verdict = "unique-candidate"
    else:
        verdict = "multiple-fixed-points"
    return MultiStartReport(reports, clusters, dist, verdict, threshold)


def self_consistency(system, report, config, seed):
    """rho(mu*, psi(mu*)) re-evaluated with a fresh seed."""
    cfg = PsiConfig(**{**config.__dict__, "seed": seed})
    image = psi_map(system, report.flow, cfg)
    return flow_distance(report.flow, image, cfg.n_projections, cfg.seed)


def flow_gap_profile(mu, nu, n_projections=64):
    """Per-grid-point product distance (thin wrapper kept for reports)."""
    if mu.grid != nu.grid:
        raise GridMismatch("flows live on different grids")
    return flow_distance_profile(mu, nu, n_projections)
