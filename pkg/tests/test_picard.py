import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conftest import single, zero_bundle
from mffbsde import scenarios
from mffbsde.exceptions import GridMismatch, PopulationCountMismatch
from mffbsde.forward import PathEnsemble
from mffbsde.measures import EmpiricalMeasure, MeasureFlow, TimeGrid
from mffbsde.picard import (
    FBSDESolution,
    PsiConfig,
    flow_gap_profile,
    iterate,
    mix_flows,
    multi_start,
    psi_map,
    residual_check,
    self_consistency,
)


def mean_path(flow, i=0):
    return np.array([m.mean()[0] for m in flow.measures[i]])


def weighted_se(flow, i=0):
    out = []
    for m in flow.measures[i]:
        w = m.weights / m.weights.sum()
        x = m.samples[:, 0]
        mu = np.sum(w * x)
        out.append(np.sqrt(np.sum(w * w * (x - mu) ** 2)))
    return np.array(out)


def sine_flow(grid, c):
    return MeasureFlow.from_points(grid, [c * np.sin(grid.points)[:, None]])


def const_flow(grid, c):
    return MeasureFlow.from_points(grid, [np.full((len(grid), 1), c)])


@pytest.fixture(scope="module")
def counter():
    return scenarios.builtin("counterexample", n_particles=100_000)


@pytest.fixture(scope="module")
def brown():
    return scenarios.builtin("brownian", n_particles=5000)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(damping=0.0), dict(damping=1.5), dict(tol=-1.0), dict(max_iter=0),
                                    dict(mode="exact"), dict(n_particles=0), dict(basis_clip=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PsiConfig(**kw)

    def test_zero_tol_allowed(self):
        assert PsiConfig(tol=0.0).tol == 0.0


class TestPsi:
    def test_uncoupled_is_flow_independent(self, brown):
        cfg = brown.psi_config()
        a = psi_map(brown.system, const_flow(brown.grid, 0.0), cfg)
        b = psi_map(brown.system, sine_flow(brown.grid, 3.0), cfg)
        for ma, mb in zip(a.measures[0], b.measures[0]):
            np.testing.assert_array_equal(ma.samples, mb.samples)
            np.testing.assert_array_equal(ma.weights, mb.weights)

    @pytest.mark.parametrize("mode", ["girsanov", "direct"])
    @pytest.mark.parametrize("c", [0.0, 0.4])
    def test_counterexample_family_fixed(self, counter, mode, c):
        cfg = counter.psi_config(mode=mode)
        out = psi_map(counter.system, sine_flow(counter.grid, c), cfg)
        target = c * np.sin(counter.grid.points)
        se = weighted_se(out)
        # the initial point is a Dirac mass with zero spread
        assert np.all(np.abs(mean_path(out) - target)[1:] <= 3 * se[1:])
        assert mean_path(out)[0] == 0.0

    def test_deterministic(self, brown):
        sys = scenarios.builtin("lipschitz_mean_field", n_particles=3000)
        mu = const_flow(sys.grid, 0.3)
        for mode in ("girsanov", "direct"):
            a = psi_map(sys.system, mu, sys.psi_config(mode=mode))
            b = psi_map(sys.system, mu, sys.psi_config(mode=mode))
            c = psi_map(sys.system, mu, sys.psi_config(mode=mode, n_threads=4))
            for k in (0, 50, 100):
                np.testing.assert_array_equal(a.measures[0][k].samples, b.measures[0][k].samples)
                np.testing.assert_array_equal(a.measures[0][k].weights, c.measures[0][k].weights)

    def test_population_mismatch(self, brown):
        two = MeasureFlow.from_points(brown.grid, [np.zeros((len(brown.grid), 1))] * 2)
        with pytest.raises(PopulationCountMismatch):
            psi_map(brown.system, two, brown.psi_config())


class TestMix:
    def test_full_damping_returns_image(self, brown):
        img = psi_map(brown.system, const_flow(brown.grid, 0.0), brown.psi_config())
        mixed = mix_flows(const_flow(brown.grid, 5.0), img, 1.0, 5000, 0, 0)
        for a, b in zip(mixed.measures[0], img.measures[0]):
            np.testing.assert_array_equal(a.samples, b.samples)

    def test_half_damping(self, brown):
        mixed = mix_flows(const_flow(brown.grid, 0.0), const_flow(brown.grid, 1.0), 0.5, 1000, 0, 0)
        assert mixed.measures[0][7].mean()[0] == pytest.approx(0.5)
        assert mixed.measures[0][7].size == 1000

    def test_weighted_resampling_mean(self):
        grid = TimeGrid.uniform(1.0, n_steps=1)
        x = np.arange(10.0)[:, None]
        w = np.arange(1.0, 11.0)
        img = MeasureFlow(grid, [[EmpiricalMeasure(x, w), EmpiricalMeasure(x, w)]])
        mixed = mix_flows(img, img, 1.0, 5500, 3, 0)
        target = np.sum(w * x[:, 0]) / w.sum()
        assert abs(mixed.measures[0][1].mean()[0] - target) <= 10 / 5500

    def test_grid_mismatch(self, brown):
        with pytest.raises(GridMismatch):
            mix_flows(const_flow(brown.grid, 0.0), const_flow(TimeGrid.uniform(1.0, n_steps=3), 0.0),
                      1.0, 10, 0, 0)


class TestIterate:
    def test_uncoupled_converges_immediately(self, brown):
        rep = iterate(brown.system, const_flow(brown.grid, 2.0), brown.psi_config())
        assert rep.converged and rep.n_iter == 2 and rep.rho_history[-1] == 0.0

    def test_counterexample_stays_on_family(self, counter):
        cfg = counter.psi_config()
        rep = iterate(counter.system, sine_flow(counter.grid, 0.4), cfg)
        assert rep.converged and rep.status == "converged"
        assert np.max(np.abs(mean_path(rep.flow) - 0.4 * np.sin(counter.grid.points))) <= 0.05
        assert rep.rho_history[-1] <= cfg.tol
        assert len(rep.iterates) == rep.n_iter
        assert np.isfinite(rep.holder_modulus)
        d = rep.to_dict()
        assert d["status"] == "converged" and len(d["rho_history"]) == rep.n_iter

    def test_zero_tol_reports_max_iter(self):
        sc = scenarios.builtin("counterexample", n_particles=2000)
        rep = iterate(sc.system, sine_flow(sc.grid, 0.4), sc.psi_config(tol=0.0, max_iter=2))
        assert not rep.converged and rep.status == "max_iter_exceeded" and rep.n_iter == 2

    def test_damping_still_converges(self):
        sc = scenarios.builtin("lipschitz_mean_field", n_particles=20_000)
        rep = iterate(sc.system, const_flow(sc.grid, 0.0), sc.psi_config(damping=0.7, max_iter=30))
        assert rep.converged

    def test_self_consistency(self):
        sc = scenarios.builtin("lipschitz_mean_field", n_particles=20_000)
        cfg = sc.psi_config()
        rep = iterate(sc.system, const_flow(sc.grid, 0.0), cfg)
        assert rep.converged
        fresh = np.array([self_consistency(sc.system, rep, cfg, seed=s) for s in range(1, 6)])
        assert np.all(fresh <= cfg.tol + 3 * fresh.std(ddof=1))

    def test_mode_agreement(self):
        sc = scenarios.builtin("lipschitz_mean_field", n_particles=20_000)
        flows = {}
        for mode in ("girsanov", "direct"):
            # tol just above the noise floor; the image psi(mu*) is one Picard step closer
            # to the fixed point than the input iterate
            rep = iterate(sc.system, const_flow(sc.grid, 0.0), sc.psi_config(mode=mode, tol=0.005))
            assert rep.converged
            flows[mode] = rep.image
        diff = np.abs(mean_path(flows["girsanov"]) - mean_path(flows["direct"]))
        pooled = np.hypot(weighted_se(flows["girsanov"]), weighted_se(flows["direct"]))
        assert np.all(diff[1:] <= 3 * pooled[1:])


class TestResidual:
    def test_analytic_injection(self):
        # X = C' sin t + W, Y = C' cos t, Z = 0 on the exact increments
        Cp, N = 0.4, 2000
        grid = TimeGrid.uniform(np.pi / 4, n_steps=785)
        sc = scenarios.builtin("counterexample", n_particles=N)
        dW = np.random.default_rng(0).standard_normal((N, grid.n_steps, 1)) * np.sqrt(grid.dt)[None, :, None]
        W = np.concatenate([np.zeros((N, 1, 1)), np.cumsum(dW, axis=1)], axis=1)
        # centered so the empirical mean flow is exactly C' sin t and the terminal gap vanishes
        W -= W.mean(axis=0)
        dW = np.diff(W, axis=1)
        X = Cp * np.sin(grid.points)[None, :, None] + W
        Y = np.broadcast_to(Cp * np.cos(grid.points)[None, :, None], (N, len(grid), 1)).copy()
        sol = FBSDESolution(PathEnsemble(grid, X, dW, 0, 0), Y, np.zeros((N, grid.n_steps, 1, 1)), None)
        flow = MeasureFlow.from_paths(grid, [X])
        rep = residual_check(sc.system, flow, [sol])
        assert rep.forward[0] <= 2e-3 and rep.backward[0] <= 2e-3
        assert rep.terminal[0] <= 1e-12
        assert rep.marginal[0] <= 1e-12

    def test_zero_system(self):
        grid = TimeGrid.uniform(1.0, n_steps=10)
        system = single(zero_bundle(sigma=0.0), 0.0)
        N = 50
        X = np.zeros((N, 11, 1))
        sol = FBSDESolution(PathEnsemble(grid, X, np.zeros((N, 10, 1)), 0, 0), np.zeros((N, 11, 1)),
                            np.zeros((N, 10, 1, 1)), None)
        rep = residual_check(system, MeasureFlow.from_paths(grid, [X]), [sol])
        assert rep.forward == rep.backward == rep.terminal == rep.marginal == [0.0]

    def test_wrong_flow_marginal_gap(self, brown):
        cfg = brown.psi_config()
        _, sols = psi_map(brown.system, const_flow(brown.grid, 0.0), cfg, return_solutions=True)
        rep = residual_check(brown.system, const_flow(brown.grid, 1.0), sols)
        # E|N(0, 1) - 1| = 1.0833 at T = 1
        assert rep.marginal[0] >= 0.5

    def test_converged_report_residuals_small(self, brown):
        rep = iterate(brown.system, const_flow(brown.grid, 0.0), brown.psi_config())
        assert rep.residual.terminal[0] == 0.0
        assert rep.residual.marginal[0] <= 1e-12


class TestMultiStart:
    def test_uncoupled_single_cluster(self, brown):
        ms = multi_start(brown.system, brown.multistart_inits(), brown.psi_config())
        assert ms.verdict == "unique-candidate" and len(ms.clusters) == 1
        assert ms.to_dict()["n_clusters"] == 1

    def test_needs_two_inits(self, brown):
        with pytest.raises(ValueError):
            multi_start(brown.system, brown.multistart_inits()[:1], brown.psi_config())

    def test_counterexample_two_clusters(self, counter):
        ms = multi_start(counter.system, counter.multistart_inits(), counter.psi_config())
        assert ms.verdict == "multiple-fixed-points" and len(ms.clusters) == 2
        assert ms.distances[0, 1] >= 0.25
        assert ms.threshold == pytest.approx(3 * counter.solver.tol)

    def test_lipschitz_single_cluster(self):
        sc = scenarios.builtin("lipschitz_mean_field", n_particles=20_000)
        ms = multi_start(sc.system, sc.multistart_inits(), sc.psi_config())
        assert ms.verdict == "unique-candidate"
        # independent oracle: the mean solves m' = -m + 0.5 sin m + 1
        ode = solve_ivp(lambda t, m: -m + 0.5 * np.sin(m) + 1, (0, 1), [0.0], rtol=1e-10, atol=1e-12)
        for r in ms.reports:
            assert abs(mean_path(r.flow)[-1] - ode.y[0, -1]) <= 0.05

    def test_nonconverged_is_inconclusive(self):
        sc = scenarios.builtin("counterexample", n_particles=2000)
        ms = multi_start(sc.system, sc.multistart_inits(), sc.psi_config(tol=0.0, max_iter=1))
        assert ms.verdict == "inconclusive" and ms.clusters == []


def test_flow_gap_profile(brown):
    prof = flow_gap_profile(const_flow(brown.grid, 0.0), const_flow(brown.grid, 2.0))
    np.testing.assert_allclose(prof, 2.0)
    with pytest.raises(GridMismatch):
        flow_gap_profile(const_flow(brown.grid, 0.0), const_flow(TimeGrid.uniform(1.0, n_steps=3), 0.0))
