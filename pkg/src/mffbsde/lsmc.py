"""Least-squares Monte Carlo for the backward equation.

At every step the conditional expectations given ``X_k`` are projected on a
standardized polynomial basis, which yields the decoupling fields
``Y_k = u(t_k, X_k)`` and ``Z_k = d(t_k, X_k)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from .exceptions import IndexOutOfRange, NonFiniteState, RankDeficientRegression
from .measures import check_same_grid

RIDGE_FLOOR = 1e-8
_DEGENERATE_SCALE = 1e-12


class PolynomialBasis(TransformerMixin, BaseEstimator):
    """Total-degree monomials of standardized coordinates.

    Coordinates whose spread is numerically zero are dropped at fit time, so a
    deterministic state (e.g. the initial point) reduces to the intercept.

    Parameters
    ----------
    degree : int
        Maximal total degree.
    standardize : bool
        Center and scale each coordinate with the fitted mean and std.
    clip : float or None
        Clamp standardized coordinates to ``[-clip, clip]`` so the fitted
        surface is flat beyond ``clip`` standard deviations instead of
        following the polynomial tails.
    """

    def __init__(self, degree=3, standardize=True, clip=None):
        self.degree = degree
        self.standardize = standardize
        self.clip = clip

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = X.std(axis=0)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        spread = np.ptp(X, axis=0) if X.shape[0] > 1 else np.zeros(X.shape[1])
        self.active_ = np.flatnonzero(spread > _DEGENERATE_SCALE * np.maximum(1.0, np.abs(self.mean_)))
        if not np.all(np.isfinite(self.mean_)) or not np.all(np.isfinite(self.scale_)):
            raise NonFiniteState("non-finite standardization statistics")
        self.scale_ = np.where(self.scale_ > 0, self.scale_, 1.0)
        self.exponents_ = [()]
        for deg in range(1, self.degree + 1):
            self.exponents_ += list(combinations_with_replacement(range(self.active_.size), deg))
        return self

    @property
    def n_basis_nominal(self):
        m = getattr(self, "n_features_in_", 1)
        return comb(m + self.degree, self.degree)

    def transform(self, X):
        check_is_fitted(self, "exponents_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = (X[:, self.active_] - self.mean_[self.active_]) / self.scale_[self.active_]
        if self.clip is not None:
            U = np.clip(U, -self.clip, self.clip)
        out = np.empty((X.shape[0], len(self.exponents_)))
        for j, e in enumerate(self.exponents_):
            col = np.ones(X.shape[0])
            for c in e:
                col = col * U[:, c]
            out[:, j] = col
        return out


class _LeastSquares:
    """Ridge-floored normal equations for one design matrix."""

    def __init__(self, Phi):
        n, p = Phi.shape
        G = Phi.T @ Phi / n
        if not np.all(np.isfinite(G)):
            raise RankDeficientRegression("non-finite Gram matrix")
        ev = np.linalg.eigvalsh(G)
        if ev[0] <= 1e-10 * max(ev[-1], 1e-300):
            raise RankDeficientRegression(
                f"regression design is singular (eigenvalues {ev[0]:.3g} .. {ev[-1]:.3g})")
        self.Phi = Phi
        self.n = n
        ridge = RIDGE_FLOOR * np.eye(p)
        ridge[0, 0] = 0.0  # intercept is not shrunk
        self.G = G + ridge

    def coef(self, target):
        target = target.reshape(self.n, -1)
        return np.linalg.solve(self.G, self.Phi.T @ target / self.n)


def _predict(Phi, coef):
    # row-local accumulation: the result for a row never depends on the batch
    out = Phi[:, 0:1] * coef[0]
    for j in range(1, coef.shape[0]):
        out = out + Phi[:, j:j + 1] * coef[j]
    return out


@dataclass
class BackwardSolution:
    """Fitted backward solution along one path ensemble.

    ``y_values``: (N, len(grid), n); ``z_values``: (N, len(grid) - 1, n, d);
    ``bases[k]`` and ``u_coeffs[k]`` define u(t_k, .) for k = 0..K;
    ``d_coeffs[k]`` defines d(t_k, .) for k = 0..K-1.
    """

    grid: object
    y_values: np.ndarray
    z_values: np.ndarray
    u_coeffs: list
    d_coeffs: list
    bases: list

    @property
    def n(self):
        return self.y_values.shape[2]

    @property
    def d(self):
        return self.z_values.shape[3]


def solve_bsde(paths, driver, terminal, flow, basis=None):
    """Backward Euler LSMC along ``paths``.

    Parameters
    ----------
    paths : PathEnsemble
    driver : callable (t, x, y, z, m) -> (N, n)
    terminal : callable (x, m) -> (N, n)
    flow : MeasureFlow
        Frozen flow supplying the measure argument at each grid point.
    basis : PolynomialBasis, optional
        Template cloned and refit at each step (default degree 3).

    Returns
    -------
    BackwardSolution
    """
    check_same_grid(flow.grid, paths.grid)
    basis = PolynomialBasis(3) if basis is None else basis
    grid = paths.grid
    X, dW = paths.states, paths.increments
    N, K = X.shape[0], grid.n_steps
    d = dW.shape[2]

    Y_next = np.atleast_2d(np.asarray(terminal(X[:, K, :], flow.at(K)), dtype=float))
    if Y_next.shape[0] != N:
        Y_next = np.broadcast_to(Y_next, (N, Y_next.shape[1])).copy()
    n = Y_next.shape[1]
    _finite(Y_next, K)
    y_values = np.empty((N, K + 1, n))
    z_values = np.empty((N, K, n, d))
    y_values[:, K, :] = Y_next
    u_coeffs = [None] * (K + 1)
    d_coeffs = [None] * K
    bases = [None] * (K + 1)

    bK = clone(basis).fit(X[:, K, :])
    bases[K] = bK
    u_coeffs[K] = _LeastSquares(bK.transform(X[:, K, :])).coef(Y_next)

    for k in range(K - 1, -1, -1):
        t, dt = grid.points[k], grid.dt[k]
        Xk = X[:, k, :]
        mk = flow.at(k)
        bk = clone(basis).fit(Xk)
        Phi = bk.transform(Xk)
        ls = _LeastSquares(Phi)

        y_cond = _predict(Phi, ls.coef(Y_next))
        # Z_k = E[Y_{k+1} dW^T | X_k] / dt; subtracting E[Y_{k+1} | X_k] leaves it unchanged
        zt = (Y_next - y_cond)[:, :, None] * dW[:, k, None, :] / dt
        cz = ls.coef(zt.reshape(N, n * d))
        Zk = _predict(Phi, cz).reshape(N, n, d)

        y0 = _predict(Phi, ls.coef(Y_next + _driver(driver, t, Xk, y_cond, Zk, mk, N) * dt))
        cy = ls.coef(Y_next + _driver(driver, t, Xk, y0, Zk, mk, N) * dt)
        Yk = _predict(Phi, cy)
        _finite(Yk, k)

        y_values[:, k, :] = Yk
        z_values[:, k, :, :] = Zk
        u_coeffs[k], d_coeffs[k], bases[k] = cy, cz, bk
        Y_next = Yk
    return BackwardSolution(grid, y_values, z_values, u_coeffs, d_coeffs, bases)


def _driver(driver, t, x, y, z, m, N):
    out = np.atleast_2d(np.asarray(driver(t, x, y, z, m), dtype=float))
    if out.shape[0] != N:
        out = np.broadcast_to(out, (N, out.shape[1]))
    return out


def _finite(v, k):
    if not np.all(np.isfinite(v)):
        raise NonFiniteState(f"non-finite backward value at step {k}", step=k)


def _check_index(sol, k, top):
    if not 0 <= k <= top:
        raise IndexOutOfRange(f"time index {k} outside 0..{top}")


def evaluate_u(solution, t_index, x):
    """Regression surrogate u(t_k, x); ``x`` is a point or an (M, m) batch."""
    _check_index(solution, t_index, solution.grid.n_steps)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Phi = solution.bases[t_index].transform(np.atleast_2d(x))
    out = _predict(Phi, solution.u_coeffs[t_index])
    return out[0] if single else out


def evaluate_d(solution, t_index, x):
    """Regression surrogate d(t_k, x) of shape (n, d) per point."""
    _check_index(solution, t_index, solution.grid.n_steps - 1)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Phi = solution.bases[t_index].transform(np.atleast_2d(x))
    out = _predict(Phi, solution.d_coeffs[t_index]).reshape(-1, solution.n, solution.d)
    return out[0] if single else out


def summary_to_csv(solution, fh=None):
    """Per-step (t, Y mean, Y std, Z mean) of the first component."""
    lines = ["time,y_mean,y_std,z_mean"]
    for k, t in enumerate(solution.grid.points):
        y = solution.y_values[:, k, 0]
        z = solution.z_values[:, k, 0, 0].mean() if k < solution.grid.n_steps else float("nan")
        lines.append(",".join(format(float(v), ".17g") for v in (t, y.mean(), y.std(), z)))
    text = "\n".join(lines) + "\n"
    if fh is not None:
        fh.write(text)
    return text
