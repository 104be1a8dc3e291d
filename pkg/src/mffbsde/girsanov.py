"""Doleans-Dade exponential weights and reweighted marginal laws."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .exceptions import GridMismatch, NonFiniteWeight
from .measures import EmpiricalMeasure, check_same_grid


@dataclass
class WeightEnsemble:
    """Per-particle log-weights on a grid; ``log_weights[:, 0] == 0``."""

    grid: object
    log_weights: np.ndarray
    compensation: np.ndarray

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def n_particles(self):
        return self.log_weights.shape[0]


def doleans_exponential(paths, integrand, start=0, log_init=None, comp_init=None):
    """Stochastic exponential of the integral of ``integrand`` against dW.

    ``integrand`` is either a callable ``(t, x) -> (N, d)`` evaluated along the
    paths, or a precomputed array of shape ``(N, n_steps, d)``. Accumulation is
    in log space with Kahan compensation. ``start`` restarts the exponential at
    grid index ``start`` (earlier entries stay 0); passing ``log_init`` and
    ``comp_init`` from a previous run at that index resumes it exactly.
    """
    grid = paths.grid
    N, K = paths.n_particles, grid.n_steps
    dW = paths.increments
    precomputed = not callable(integrand)
    if precomputed:
        integrand = np.asarray(integrand, dtype=float)
        if integrand.shape[:2] != (N, K):
            raise GridMismatch(f"integrand of shape {integrand.shape} does not match ({N}, {K}, d)")
    logw = np.zeros((N, K + 1))
    comp = np.zeros((N, K + 1))
    s = np.zeros(N) if log_init is None else np.asarray(log_init, dtype=float).copy()
    c = np.zeros(N) if comp_init is None else np.asarray(comp_init, dtype=float).copy()
    logw[:, start] = s
    comp[:, start] = c
    for k in range(start, K):
        th = integrand[:, k, :] if precomputed else np.asarray(integrand(grid.points[k], paths.states[:, k, :]), dtype=float)
        th = np.broadcast_to(th, (N, dW.shape[2]))
        if not np.all(np.isfinite(th)):
            raise NonFiniteWeight(f"non-finite integrand at step {k}")
        inc = np.sum(th * dW[:, k, :], axis=1) - 0.5 * np.sum(th * th, axis=1) * grid.dt[k]
        yk = inc - c
        tmp = s + yk
        c = (tmp - s) - yk
        s = tmp
        logw[:, k + 1] = s
        comp[:, k + 1] = c
    if not np.all(np.isfinite(logw)) or np.any(logw > 700):
        raise NonFiniteWeight("exponential weights overflow")
    return WeightEnsemble(grid, logw, comp)


def weighted_law(paths, weights, t_index):
    """Empirical law of the reference states at ``t_index`` under the weights."""
    check_same_grid(paths.grid, weights.grid)
    lw = weights.log_weights[:, t_index]
    w = np.exp(lw - lw.max())
    return EmpiricalMeasure(paths.states[:, t_index, :].copy(), w)


def effective_sample_size(w):
    """(sum w)^2 / sum w^2 for a raw weight vector."""
    w = np.asarray(w, dtype=float)
    s2 = np.sum(w * w)
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


def ess_ratio_se(w):
    """Delta-method standard error of ESS/N = (mean w)^2 / mean(w^2)."""
    w = np.asarray(w, dtype=float)
    n = w.size
    m1, m2 = w.mean(), np.mean(w * w)
    grad = np.array([2 * m1 / m2, -m1 * m1 / (m2 * m2)])
    cov = np.cov(np.vstack([w, w * w])) / n
    return float(np.sqrt(grad @ cov @ grad))


@dataclass
class MartingaleDiagnostic:
    time: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    second_moment: np.ndarray
    log_spread: np.ndarray
    ess: np.ndarray
    ess_ratio: np.ndarray
    degenerate: np.ndarray

    def to_csv(self, fh=None):
        buf = io.StringIO()
        buf.write("time,weight_mean,weight_se,ess\n")
        for row in zip(self.time, self.mean, self.se, self.ess):
            buf.write(",".join(format(float(v), ".17g") for v in row) + "\n")
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def martingale_diagnostic(weights, degeneracy=0.01):
    """Per-grid-point weight mean, SE, spread and ESS; flags ESS < degeneracy * N."""
    w = weights.weights
    N = w.shape[0]
    mean = w.mean(axis=0)
    se = w.std(axis=0, ddof=1) / np.sqrt(N) if N > 1 else np.zeros(w.shape[1])
    m2 = np.mean(w * w, axis=0)
    ess = mean * mean / m2 * N
    return MartingaleDiagnostic(
        time=weights.grid.points.copy(),
        mean=mean,
        se=se,
        second_moment=m2,
        log_spread=np.ptp(weights.log_weights, axis=0),
        ess=ess,
        ess_ratio=ess / N,
        degenerate=ess < degeneracy * N,
    )
