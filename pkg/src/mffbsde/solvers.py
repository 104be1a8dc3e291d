"""Estimator-style front ends for the fixed-point and game solvers."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .lsmc import evaluate_u
from .measures import MeasureFlow, TimeGrid
from .mfg import (
    EquilibriumResult,
    assemble_pontryagin,
    control_table,
    estimate_cost,
    feedback_control,
    verify_equilibrium,
)
from .picard import PsiConfig, iterate, psi_map


def dirac_flow(system, grid):
    """Flow of Dirac masses at each population's initial point."""
    return MeasureFlow.from_points(grid, [np.tile(x0, (len(grid), 1)) for x0 in system.initial_points])


def solve_equilibrium(game, mu0, config, references=None, n_table=21):
    """Fixed point of the Pontryagin system plus feedback controls and costs."""
    system = assemble_pontryagin(game)
    report = iterate(system, mu0, config, references)
    controls = [feedback_control(pop, sol.backward, report.flow)
                for pop, sol in zip(game.populations, report.solutions)]
    costs = [estimate_cost(game, i, controls[i], report.flow, config.n_particles, config.seed, config.n_threads)
             for i in range(game.H)]
    tables = [control_table(pop, c, report.flow, n_table) for pop, c in zip(game.populations, controls)]
    return EquilibriumResult(report, controls, costs, tables)


class _FixedPointParams(BaseEstimator):
    def __init__(self, mode="girsanov", n_particles=10_000, basis_degree=3, basis_clip=None, seed=0,
                 damping=1.0, tol=0.02, max_iter=20, n_projections=64, n_threads=1):
        self.mode = mode
        self.n_particles = n_particles
        self.basis_degree = basis_degree
        self.basis_clip = basis_clip
        self.seed = seed
        self.damping = damping
        self.tol = tol
        self.max_iter = max_iter
        self.n_projections = n_projections
        self.n_threads = n_threads

    def psi_config(self):
        return PsiConfig(mode=self.mode, n_particles=self.n_particles, basis_degree=self.basis_degree,
                         basis_clip=self.basis_clip, seed=self.seed, damping=self.damping, tol=self.tol,
                         max_iter=self.max_iter, n_threads=self.n_threads, n_projections=self.n_projections)

    @staticmethod
    def _initial(system, init, grid):
        if init is not None:
            return init
        if grid is None:
            raise ValueError("pass either an initial flow or a time grid")
        if not isinstance(grid, TimeGrid):
            grid = TimeGrid(grid)
        return dirac_flow(system, grid)


class MeanFieldFBSDESolver(_FixedPointParams):
    """Damped Picard solver for a coupled mean-field FBSDE.

    Attributes after ``fit``: ``flow_`` (fixed-point candidate), ``report_``
    (:class:`~mffbsde.picard.FixedPointReport`), ``solutions_`` (per-population
    (X, Y, Z) at the final iterate).
    """

    def fit(self, system, init=None, grid=None):
        mu0 = self._initial(system, init, grid)
        self.system_ = system
        self.report_ = iterate(system, mu0, self.psi_config())
        self.flow_ = self.report_.flow
        self.solutions_ = self.report_.solutions
        self.converged_ = self.report_.converged
        return self

    def transform(self, flow):
        """psi applied to ``flow`` with the fitted system."""
        check_is_fitted(self, "system_")
        return psi_map(self.system_, flow, self.psi_config())

    def predict(self, X, t_index, population=0):
        """Decoupling field u(t_k, x) of the fitted solution."""
        check_is_fitted(self, "solutions_")
        return evaluate_u(self.solutions_[population].backward, t_index, X)


class MeanFieldGameSolver(_FixedPointParams):
    """Equilibrium candidate of a mean-field game via its adjoint FBSDE."""

    def __init__(self, mode="girsanov", n_particles=10_000, basis_degree=3, basis_clip=None, seed=0,
                 damping=1.0, tol=0.02, max_iter=20, n_projections=64, n_threads=1, n_perturbations=10,
                 magnitude=0.2):
        super().__init__(mode, n_particles, basis_degree, basis_clip, seed, damping, tol, max_iter,
                         n_projections, n_threads)
        self.n_perturbations = n_perturbations
        self.magnitude = magnitude

    def fit(self, game, init=None, grid=None):
        self.game_ = game
        mu0 = self._initial(assemble_pontryagin(game), init, grid)
        self.equilibrium_ = solve_equilibrium(game, mu0, self.psi_config())
        self.report_ = self.equilibrium_.report
        self.flow_ = self.report_.flow
        self.controls_ = self.equilibrium_.controls
        return self

    def predict(self, X, t, population=0):
        """Equilibrium feedback alpha*(t, x)."""
        check_is_fitted(self, "controls_")
        return self.controls_[population](t, np.atleast_2d(X))

    def verify(self, controls=None, seed=None, n_particles=None):
        check_is_fitted(self, "controls_")
        rep = verify_equilibrium(self.game_, self.flow_, controls or self.controls_, self.n_perturbations,
                                 self.magnitude, self.seed if seed is None else seed,
                                 n_particles or self.n_particles, n_threads=self.n_threads)
        if controls is None:
            self.equilibrium_.verification = rep
        return rep
