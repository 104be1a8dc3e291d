"""Empirical measures, measure flows and the distances between them.

A measure is a finite weighted sample cloud. Distances:

* ``wasserstein1_1d``: exact W1 on the line via the two cumulative
  distribution functions.
* ``wasserstein1_sliced``: average 1-D W1 over seeded random projections,
  used when the state dimension exceeds one.
* ``product_distance``: sum of per-population W1 distances.
* ``flow_distance``: supremum of ``product_distance`` over the time grid.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from functools import cached_property

import numpy as np

from . import rng
from .exceptions import (
    DimensionMismatch,
    EmptySamples,
    GridMismatch,
    LengthMismatch,
    NegativeWeight,
    PopulationCountMismatch,
)

SUMMARY_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class TimeGrid:
    """Strictly increasing time points starting at 0."""

    def __init__(self, points):
        points = np.asarray(points, dtype=float).ravel()
        if points.size < 2:
            raise ValueError("a time grid needs at least 2 points")
        if points[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if not np.all(np.diff(points) > 0):
            raise ValueError("time grid must be strictly increasing")
        self.points = points
        self.points.setflags(write=False)

    @classmethod
    def uniform(cls, T, dt=None, n_steps=None):
        if (dt is None) == (n_steps is None):
            raise ValueError("give exactly one of dt or n_steps")
        if T <= 0:
            raise ValueError("horizon T must be positive")
        if n_steps is None:
            if dt <= 0:
                raise ValueError("dt must be positive")
            n_steps = max(1, int(round(T / dt)))
        return cls(np.linspace(0.0, T, int(n_steps) + 1))

    @property
    def T(self):
        return float(self.points[-1])

    @property
    def n_steps(self):
        return self.points.size - 1

    @cached_property
    def dt(self):
        return np.diff(self.points)

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def __repr__(self):
        return f"TimeGrid(T={self.T:g}, n_steps={self.n_steps})"

    def index_of(self, t):
        """Grid index of the last point at or before ``t``."""
        k = int(np.searchsorted(self.points, t, side="right")) - 1
        return min(max(k, 0), self.n_steps)


def check_same_grid(a, b):
    if a != b:
        raise GridMismatch(f"time grids differ: {a!r} vs {b!r}")


class EmpiricalMeasure:
    """Weighted sample cloud in R^m with normalized weights."""

    def __init__(self, samples, weights=None):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise EmptySamples("an empirical measure needs at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("sample coordinates must be finite")
        if weights is None:
            w = np.full(samples.shape[0], 1.0 / samples.shape[0])
            self.uniform = True
        else:
            w = np.asarray(weights, dtype=float).ravel()
            if w.size != samples.shape[0]:
                raise LengthMismatch(f"{w.size} weights for {samples.shape[0]} samples")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise NegativeWeight("weights must be finite and nonnegative")
            total = w.sum()
            if total <= 0:
                raise NegativeWeight("weights sum to zero")
            w = w / total
            self.uniform = False
        self.samples = samples
        self.weights = w

    @classmethod
    def dirac(cls, point):
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :])

    @property
    def dim(self):
        return self.samples.shape[1]

    @property
    def size(self):
        return self.samples.shape[0]

    def mean(self):
        return self.weights @ self.samples

    def std(self):
        c = self.samples - self.mean()
        return np.sqrt(np.maximum(self.weights @ (c * c), 0.0))

    @cached_property
    def _sorted(self):
        # per-coordinate sort order and cumulative weights
        order = np.argsort(self.samples, axis=0, kind="stable")
        vals = np.take_along_axis(self.samples, order, axis=0)
        cum = np.cumsum(self.weights[order], axis=0)
        cum[-1] = 1.0
        return vals, cum

    def quantile(self, q, coord=0):
        """Generalized inverse CDF of one coordinate."""
        vals, cum = self._sorted
        idx = np.searchsorted(cum[:, coord], np.asarray(q, dtype=float), side="left")
        return vals[np.minimum(idx, self.size - 1), coord]

    def project(self, direction):
        direction = np.asarray(direction, dtype=float)
        return EmpiricalMeasure(self.samples @ direction, None if self.uniform else self.weights)

    def shifted(self, c):
        return EmpiricalMeasure(self.samples + c, None if self.uniform else self.weights)

    def __repr__(self):
        return f"EmpiricalMeasure(size={self.size}, dim={self.dim})"


def empirical_from_samples(samples, weights=None):
    """Build an :class:`EmpiricalMeasure`; uniform weights when ``weights`` is None."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise EmptySamples("no samples given")
    return EmpiricalMeasure(samples, weights)


def _w1_sorted(va, ca, vb, cb, uniform_equal):
    if uniform_equal:
        return float(np.mean(np.abs(va - vb)))
    allv = np.concatenate([va, vb])
    allv.sort(kind="stable")
    deltas = np.diff(allv)
    pts = allv[:-1]
    ia = np.searchsorted(va, pts, side="right")
    ib = np.searchsorted(vb, pts, side="right")
    Fa = np.concatenate([[0.0], ca])[ia]
    Fb = np.concatenate([[0.0], cb])[ib]
    return float(np.sum(np.abs(Fa - Fb) * deltas))


def wasserstein1_1d(mu, nu):
    """Exact 1-Wasserstein distance between two measures on the real line."""
    if mu.dim != 1 or nu.dim != 1:
        raise DimensionMismatch("wasserstein1_1d needs one-dimensional measures")
    va, ca = mu._sorted
    vb, cb = nu._sorted
    uniform_equal = mu.uniform and nu.uniform and mu.size == nu.size
    return _w1_sorted(va[:, 0], ca[:, 0], vb[:, 0], cb[:, 0], uniform_equal)


def _projections(dim, n_projections, seed):
    out = np.empty((n_projections, dim))
    for j in range(n_projections):
        v = rng.generator(seed, rng.STREAM_PROJECTION, j).standard_normal(dim)
        out[j] = v / np.linalg.norm(v)
    return out


def wasserstein1_sliced(mu, nu, n_projections=64, seed=0, n_threads=1):
    """Sliced W1: mean of exact 1-D W1 over seeded random unit directions."""
    if mu.dim != nu.dim:
        raise DimensionMismatch(f"dimensions differ: {mu.dim} vs {nu.dim}")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    dirs = _projections(mu.dim, n_projections, seed)

    def one(v):
        return wasserstein1_1d(mu.project(v), nu.project(v))

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            vals = list(pool.map(one, dirs))
    else:
        vals = [one(v) for v in dirs]
    return float(np.mean(vals))


def wasserstein1(mu, nu, n_projections=64, seed=0):
    """Exact W1 in one dimension, sliced W1 otherwise."""
    if mu.dim != nu.dim:
        raise DimensionMismatch(f"dimensions differ: {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        return wasserstein1_1d(mu, nu)
    return wasserstein1_sliced(mu, nu, n_projections, seed)


def product_distance(m1, m2, n_projections=64, seed=0):
    """Sum of per-population W1 distances between two measure vectors."""
    if len(m1) != len(m2):
        raise PopulationCountMismatch(f"{len(m1)} vs {len(m2)} populations")
    return float(sum(wasserstein1(a, b, n_projections, seed) for a, b in zip(m1, m2)))


class MeasureFlow:
    """Per-population empirical measures on a common time grid.

    ``measures[i][k]`` is the law of population ``i`` at ``grid.points[k]``.
    """

    def __init__(self, grid, measures):
        self.grid = grid
        self.measures = [list(row) for row in measures]
        if not self.measures:
            raise ValueError("a measure flow needs at least one population")
        for row in self.measures:
            if len(row) != len(grid):
                raise GridMismatch(f"{len(row)} measures for a grid of {len(grid)} points")

    @property
    def n_populations(self):
        return len(self.measures)

    def at(self, k):
        """Measure vector (one entry per population) at grid index ``k``."""
        return [row[k] for row in self.measures]

    def mean_path(self, population=0):
        return np.array([m.mean() for m in self.measures[population]])

    @classmethod
    def from_points(cls, grid, points):
        """Dirac flow; ``points[i]`` has shape ``(len(grid), m)``."""
        measures = []
        for p in points:
            p = np.asarray(p, dtype=float).reshape(len(grid), -1)
            measures.append([EmpiricalMeasure(row[None, :]) for row in p])
        return cls(grid, measures)

    @classmethod
    def from_paths(cls, grid, states, weights=None):
        """Flow of marginal laws of particle paths.

        ``states[i]`` has shape ``(N, len(grid), m)``; ``weights[i]`` (optional)
        has shape ``(N, len(grid))``.
        """
        measures = []
        for i, s in enumerate(states):
            w = None if weights is None else weights[i]
            measures.append([
                EmpiricalMeasure(s[:, k, :].copy(), None if w is None else w[:, k])
                for k in range(len(grid))
            ])
        return cls(grid, measures)

    def summary(self):
        """Mean path per population, shape ``(H, len(grid), m)``."""
        return np.array([self.mean_path(i) for i in range(self.n_populations)])

    def to_csv(self, fh=None):
        """Write per-(time, population) summary statistics; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        dim = self.measures[0][0].dim
        header = ["time", "population"]
        for j in range(dim):
            header += [f"mean_{j}", f"std_{j}"] + [f"q{int(round(q * 100)):02d}_{j}" for q in SUMMARY_QUANTILES]
        w.writerow(header)
        for k, t in enumerate(self.grid.points):
            for i in range(self.n_populations):
                m = self.measures[i][k]
                mean, std = m.mean(), m.std()
                row = [format(float(t), ".17g"), str(i)]
                for j in range(dim):
                    row += [format(float(mean[j]), ".17g"), format(float(std[j]), ".17g")]
                    row += [format(float(v), ".17g") for v in m.quantile(SUMMARY_QUANTILES, j)]
                w.writerow(row)
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _check_flows(mu, nu):
    check_same_grid(mu.grid, nu.grid)
    if mu.n_populations != nu.n_populations:
        raise PopulationCountMismatch(f"{mu.n_populations} vs {nu.n_populations} populations")


def flow_distance_profile(mu, nu, n_projections=64, seed=0):
    """``product_distance`` at every grid point."""
    _check_flows(mu, nu)
    return np.array([product_distance(mu.at(k), nu.at(k), n_projections, seed) for k in range(len(mu.grid))])


def flow_distance(mu, nu, n_projections=64, seed=0):
    """Supremum over the grid of the product distance between two flows."""
    return float(np.max(flow_distance_profile(mu, nu, n_projections, seed)))


def holder_modulus(flow, n_projections=64, seed=0):
    """max over grid pairs s < t of K(mu_t, mu_s) / sqrt(t - s)."""
    pts = flow.grid.points
    if pts.size < 2:
        raise GridMismatch("holder_modulus needs at least 2 grid points")
    best = 0.0
    for j in range(1, pts.size):
        for i in range(j):
            dist = product_distance(flow.at(j), flow.at(i), n_projections, seed)
            best = max(best, dist / np.sqrt(pts[j] - pts[i]))
    return float(best)
