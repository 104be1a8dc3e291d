"""Euler-Maruyama particle simulation of the forward state."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import rng
from .coefficients import diffuse
from .exceptions import GridMismatch, NonFiniteState
from .measures import check_same_grid


@dataclass
class PathEnsemble:
    """Particle paths with the Brownian increments that generated them.

    ``states`` has shape ``(N, len(grid), m)`` and ``increments`` has shape
    ``(N, len(grid) - 1, d)``.
    """

    grid: object
    states: np.ndarray
    increments: np.ndarray
    seed: int
    stream: int

    @property
    def n_particles(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[2]

    def to_csv(self, fh=None, max_particles=100):
        """Long-format dump (particle, time, coordinate, value); debug scale only."""
        if self.n_particles > max_particles:
            raise ValueError(f"refusing to dump {self.n_particles} paths (max_particles={max_particles})")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["particle", "time", "coordinate", "value"])
        for p in range(self.n_particles):
            for k, t in enumerate(self.grid.points):
                for j in range(self.dim):
                    w.writerow([p, format(float(t), ".17g"), j, format(float(self.states[p, k, j]), ".17g")])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _check_finite(x, k):
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        p = int(np.argmax(bad))
        raise NonFiniteState(f"non-finite state for particle {p} at step {k}", particle=p, step=k)


def _noise_dim(bundle, x0):
    sig = np.asarray(bundle.sigma(0.0, x0[None, :]), dtype=float)
    return sig.shape[-1]


def _simulate(bundle, x0, grid, n_particles, seed, stream, drift_extra, increments, n_threads):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    d = _noise_dim(bundle, x0)
    if increments is None:
        increments = rng.brownian_increments(seed, stream, n_particles, grid.dt, d, n_threads)
    elif increments.shape != (n_particles, grid.n_steps, d):
        raise GridMismatch(f"increments of shape {increments.shape} do not match the grid")
    states = np.empty((n_particles, len(grid), x0.size))
    states[:, 0, :] = x0
    x = states[:, 0, :].copy()
    for k in range(grid.n_steps):
        t, dt = grid.points[k], grid.dt[k]
        drift = np.asarray(bundle.h(t, x), dtype=float)
        if drift_extra is not None:
            drift = drift + drift_extra(k, t, x)
        x = x + drift * dt + diffuse(bundle.sigma(t, x), increments[:, k, :])
        _check_finite(x, k + 1)
        states[:, k + 1, :] = x
    return PathEnsemble(grid, states, increments, seed, stream)


def simulate_reference(bundle, x0, grid, n_particles, seed, stream=rng.STREAM_REFERENCE,
                       increments=None, n_threads=1):
    """Driftless reference process dX = h dt + sigma dW (no b term)."""
    return _simulate(bundle, x0, grid, n_particles, seed, stream, None, increments, n_threads)


def simulate_feedback(bundle, x0, grid, n_particles, seed, y_fn, z_fn, flow,
                      stream=rng.STREAM_REFERENCE, increments=None, n_threads=1):
    """Full process with drift h + b(t, X, y_fn(t, X), z_fn(t, X), flow_t).

    ``flow`` is frozen; ``y_fn`` and ``z_fn`` are closed-loop feedback maps.
    """
    check_same_grid(flow.grid, grid)

    def extra(k, t, x):
        return np.asarray(bundle.b(t, x, y_fn(t, x), z_fn(t, x), flow.at(k)), dtype=float)

    return _simulate(bundle, x0, grid, n_particles, seed, stream, extra, increments, n_threads)
