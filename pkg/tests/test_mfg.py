import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mffbsde import mfg, scenarios
from mffbsde.exceptions import ControlOutOfSet, MissingGradient, NonConvergence
from mffbsde.measures import MeasureFlow, TimeGrid
from mffbsde.mfg import (
    ControlSet,
    GameSpec,
    Population,
    assemble_pontryagin,
    estimate_cost,
    hamiltonian,
    maximize_shifted_driver,
    minimize_hamiltonian,
    verify_equilibrium,
)
from mffbsde.solvers import MeanFieldGameSolver, dirac_flow, solve_equilibrium

X1 = np.zeros((1, 1))


def col(x):
    return np.atleast_2d(x)[:, 0]


def player(b=None, f=None, g=None, lower=0.0, upper=10.0, sigma=1.0, **kw):
    return Population(
        h=lambda t, x: np.zeros_like(x),
        b=b or (lambda t, x, m, a: -a),
        sigma=lambda t, x: sigma * np.eye(1),
        f=f or (lambda t, x, m, a: np.sum(a * a, axis=1)),
        g=g or (lambda x, m: np.zeros(np.atleast_2d(x).shape[0])),
        control_set=ControlSet([lower], [upper]),
        x0=[0.0],
        **kw,
    )


def lq_player():
    # b = a, f = a^2 + x^2, g = 0: alpha* = -y / 2, adjoint driver 2x
    return player(b=lambda t, x, m, a: a, f=lambda t, x, m, a: np.sum(a * a, axis=1) + x[:, 0] ** 2,
                  lower=-10.0, upper=10.0)


def flow_on(grid, value=0.0):
    return MeasureFlow.from_points(grid, [np.full((len(grid), 1), value)])


class TestControlSet:
    def test_project_and_contains(self):
        A = ControlSet([0.0, -1.0], [1.0, 1.0])
        np.testing.assert_array_equal(A.project([[2.0, -3.0]]), [[1.0, -1.0]])
        assert A.contains([[0.5, 0.0]]) and not A.contains([[1.5, 0.0]])

    def test_grid_lexicographic(self):
        g = ControlSet([0.0, 0.0], [1.0, 1.0]).grid(2)
        np.testing.assert_array_equal(g, [[0, 0], [0, 1], [1, 0], [1, 1]])

    @pytest.mark.parametrize("lo,hi", [([1.0], [0.0]), ([0.0], [np.inf]), ([0.0, 1.0], [1.0])])
    def test_invalid(self, lo, hi):
        with pytest.raises(ValueError):
            ControlSet(lo, hi)


class TestHamiltonian:
    def test_example_value(self):
        assert hamiltonian(player(), 0.0, X1, [[1.0]], None, [[0.3]])[0] == pytest.approx(-0.21)

    def test_zero_adjoint_zero_cost(self):
        p = player(f=lambda t, x, m, a: np.zeros(len(a)))
        assert hamiltonian(p, 0.0, X1, [[0.0]], None, [[4.0]])[0] == 0.0

    def test_affine_in_y(self):
        p = player(f=lambda t, x, m, a: np.sum(a * a, axis=1) + 1.0)
        H = lambda y: hamiltonian(p, 0.0, X1, [[y]], None, [[0.7]])[0]
        assert H(2.0) - 2 * H(1.0) + H(0.0) == pytest.approx(0.0, abs=1e-12)

    def test_out_of_set(self):
        with pytest.raises(ControlOutOfSet):
            hamiltonian(player(), 0.0, X1, [[1.0]], None, [[11.0]])


class TestMinimize:
    @pytest.mark.parametrize("y,expected", [(1.0, 0.5), (-2.0, 0.0)])
    def test_newton_matches_closed_form(self, y, expected):
        a = minimize_hamiltonian(player(), 0.0, X1, [[y]], None)
        assert a[0, 0] == pytest.approx(expected, abs=1e-8)

    def test_hook_used(self):
        p = player(argmin=lambda t, x, y, m: np.maximum(y, 0) / 2)
        np.testing.assert_array_equal(minimize_hamiltonian(p, 0.0, np.zeros((2, 1)), [[1.0], [-2.0]], None),
                                      [[0.5], [0.0]])

    def test_box_boundary(self):
        p = player(b=lambda t, x, m, a: np.zeros_like(a), f=lambda t, x, m, a: (a[:, 0] - 3) ** 2, upper=1.0)
        assert minimize_hamiltonian(p, 0.0, X1, [[0.0]], None)[0, 0] == pytest.approx(1.0)

    def test_constant_shift_invariance(self):
        base = player(f=lambda t, x, m, a: np.sum(a * a, axis=1) + np.sin(a[:, 0]))
        shifted = player(f=lambda t, x, m, a: np.sum(a * a, axis=1) + np.sin(a[:, 0]) + 5.0)
        y = np.array([[-3.0], [0.4], [2.5]])
        x = np.zeros((3, 1))
        np.testing.assert_allclose(minimize_hamiltonian(base, 0, x, y, None),
                                   minimize_hamiltonian(shifted, 0, x, y, None), atol=1e-8)

    def test_first_order_condition(self):
        p = player(f=lambda t, x, m, a: np.sum(a * a, axis=1) + 0.3 * np.sin(a[:, 0]), lower=-5.0, upper=5.0)
        a = minimize_hamiltonian(p, 0.0, X1, [[1.3]], None)
        h = 1e-6
        grad = (hamiltonian(p, 0, X1, [[1.3]], None, a + h) - hamiltonian(p, 0, X1, [[1.3]], None, a - h)) / (2 * h)
        assert abs(grad[0]) <= 1e-6

    def test_nonconvergence(self, monkeypatch):
        # Newton converges only linearly on a quartic, so a 3-step cap is not enough
        monkeypatch.setattr(mfg, "NEWTON_STEPS", 3)
        p = player(b=lambda t, x, m, a: np.zeros_like(a), f=lambda t, x, m, a: (a[:, 0] - 0.2) ** 4,
                   lower=-1.0, upper=2.0)
        with pytest.raises(NonConvergence):
            minimize_hamiltonian(p, 0.0, X1, [[0.0]], None)

    @settings(max_examples=40, deadline=None)
    @given(y=st.floats(-50, 50), lo=st.floats(-3, 0), width=st.floats(0.1, 5))
    def test_projection_validity(self, y, lo, width):
        p = player(lower=lo, upper=lo + width)
        a = minimize_hamiltonian(p, 0.0, X1, [[y]], None)
        assert p.control_set.contains(a)
        assert a[0, 0] == pytest.approx(np.clip(y / 2, lo, lo + width), abs=1e-7)


class TestMaximize:
    def test_tie_break(self):
        p = Population(h=lambda t, x: np.zeros_like(x), b=lambda t, x, m, a: np.zeros((len(a), 1)),
                       sigma=lambda t, x: np.eye(1), f=lambda t, x, m, a: np.full(len(a), 0.7),
                       g=lambda x, m: np.zeros(1), control_set=ControlSet([-1.0, 2.0], [1.0, 3.0]), x0=[0.0])
        a, v = maximize_shifted_driver(p, 0.0, X1, None, np.zeros(1))
        np.testing.assert_array_equal(a, [-1.0, 2.0])
        assert v == 0.7

    def test_concave_quadratic(self):
        p = player(b=lambda t, x, m, a: np.zeros_like(a), f=lambda t, x, m, a: -(a[:, 0] - 0.37) ** 2, upper=1.0)
        a, v = maximize_shifted_driver(p, 0.0, X1, None, np.zeros(1), 101)
        assert abs(a[0] - 0.37) <= 1e-6 and v == pytest.approx(0.0, abs=1e-12)

    def test_linear_over_box(self):
        p = player(b=lambda t, x, m, a: a, f=lambda t, x, m, a: np.zeros(len(a)), lower=-1.0, upper=1.0)
        a, v = maximize_shifted_driver(p, 0.0, X1, None, np.array([2.0]))
        assert a[0] == 1.0 and v == pytest.approx(2.0)


class TestAssembly:
    def test_linear_quadratic(self):
        system = assemble_pontryagin(GameSpec([lq_player()]))
        bundle = system.bundles[0]
        x = np.array([[-1.0], [0.5], [2.0]])
        y = np.array([[1.0], [-4.0], [0.2]])
        np.testing.assert_allclose(bundle.f(0.0, x, y, None, None), 2 * x, atol=1e-6)
        np.testing.assert_allclose(bundle.b(0.0, x, y, None, None), -y / 2, atol=1e-7)
        np.testing.assert_allclose(bundle.g(x, None), 0.0, atol=1e-10)

    def test_bounded_adjoint_example(self):
        sc = scenarios.builtin("bounded_adjoint_game", n_particles=100)
        pop = sc.game.populations[0]
        bundle = sc.system.bundles[0]
        grid = TimeGrid.uniform(1.0, n_steps=2)
        m = flow_on(grid, 0.3).at(0)
        x = np.array([[-1.0], [0.2], [0.5]])
        y = np.array([[0.5], [1.0], [-1.0]])
        # right derivatives: d+h = -3/4 (x < 0), -1/4 (x >= 0); d+f = 1{x >= E X}
        dh = np.where(x >= 0, -0.25, -0.75)
        np.testing.assert_allclose(bundle.f(0, x, y, None, m), dh * y + (x >= 0.3), atol=1e-12)
        drift = 0.3 * np.tanh(0.3) - np.maximum(y, 0) / 2
        np.testing.assert_allclose(bundle.b(0, x, y, None, m), drift, atol=1e-12)
        np.testing.assert_allclose(pop.control_set.project(np.maximum(y, 0) / 2), np.maximum(y, 0) / 2)

    def test_state_independent_zero_adjoint(self):
        p = player(f=lambda t, x, m, a: np.sum((a - 0.25) ** 2, axis=1))
        bundle = assemble_pontryagin(GameSpec([p])).bundles[0]
        x = np.linspace(-2, 2, 5)[:, None]
        np.testing.assert_allclose(bundle.f(0, x, np.zeros_like(x), None, None), 0.0, atol=1e-9)
        np.testing.assert_allclose(bundle.g(x, None), 0.0, atol=1e-9)
        np.testing.assert_allclose(minimize_hamiltonian(p, 0, x, np.zeros_like(x), None), 0.25, atol=1e-8)

    def test_missing_gradient(self):
        with pytest.raises(MissingGradient):
            assemble_pontryagin(GameSpec([player(allow_fd=False)]))

    def test_hooks_suffice_without_fd(self):
        sc = scenarios.builtin("bounded_adjoint_game", n_particles=100)
        sc.game.populations[0].allow_fd = False
        assemble_pontryagin(sc.game)


class TestCost:
    def test_constant_running_cost(self):
        grid = TimeGrid.uniform(1.0, dt=0.01)
        p = player(f=lambda t, x, m, a: np.ones(len(x)))
        c = estimate_cost(GameSpec([p]), 0, lambda t, x: np.zeros((len(x), 1)), flow_on(grid), 1000, 0)
        assert c.mean == pytest.approx(1.0, abs=1e-12) and c.se == pytest.approx(0.0, abs=1e-12)

    def test_martingale_terminal(self):
        grid = TimeGrid.uniform(1.0, dt=0.01)
        p = player(b=lambda t, x, m, a: np.zeros_like(x), f=lambda t, x, m, a: np.zeros(len(x)),
                   g=lambda x, m: x[:, 0])
        c = estimate_cost(GameSpec([p]), 0, lambda t, x: np.zeros((len(x), 1)), flow_on(grid), 100_000, 1)
        assert abs(c.mean) <= 3 * c.se

    def test_controls_projected(self):
        grid = TimeGrid.uniform(1.0, n_steps=10)
        p = player()
        c = estimate_cost(GameSpec([p]), 0, lambda t, x: np.full((len(x), 1), 50.0), flow_on(grid), 10, 0)
        assert c.mean == pytest.approx(100.0)


@pytest.fixture(scope="module")
def game_solution():
    sc = scenarios.builtin("bounded_adjoint_game", n_particles=20_000)
    cfg = sc.psi_config()
    res = solve_equilibrium(sc.game, sc.init_flow(), cfg)
    return sc, cfg, res


class TestEquilibrium:
    def test_converged_and_admissible(self, game_solution):
        sc, _, res = game_solution
        assert res.report.converged
        ts, xs, table = res.tables[0]
        assert np.all(table >= 0.0) and np.all(table <= 10.0)
        assert all(np.isfinite(c.mean) for c in res.costs)

    def test_optimal_beats_zero_control(self, game_solution):
        sc, cfg, res = game_solution
        J0 = estimate_cost(sc.game, 0, lambda t, x: np.zeros((len(x), 1)), res.flow, cfg.n_particles, cfg.seed)
        Js = res.costs[0]
        assert Js.mean <= J0.mean + 3 * np.hypot(Js.se, J0.se)

    def test_verification_passes(self, game_solution):
        sc, cfg, res = game_solution
        rep = verify_equilibrium(sc.game, res.flow, res.controls, 10, 0.2, seed=0, n_particles=20_000)
        assert rep.passed and len(rep.gaps) == 10
        assert rep.to_dict()["passed"] is True

    def test_upper_bound_control_fails(self, game_solution):
        sc, cfg, res = game_solution
        upper = lambda t, x: np.full((len(x), 1), 10.0)
        rep = verify_equilibrium(sc.game, res.flow, [upper], 10, 0.2, seed=0, n_particles=20_000)
        assert not rep.passed and rep.max_improvement > 0

    def test_outputs(self, game_solution):
        _, _, res = game_solution
        lines = res.control_table_csv().splitlines()
        assert lines[0] == "population,time,x,alpha" and len(lines) == 1 + 100 * 21
        d = res.to_dict()
        assert d["fixed_point"]["status"] == "converged" and len(d["costs"]) == 1


def test_zero_cost_game_gaps_vanish():
    p = player(f=lambda t, x, m, a: np.zeros(len(x)))
    grid = TimeGrid.uniform(1.0, n_steps=20)
    rep = verify_equilibrium(GameSpec([p]), flow_on(grid), [lambda t, x: np.ones((len(x), 1))], 4, 0.2,
                             n_particles=500)
    assert all(g.gap == 0.0 for g in rep.gaps) and rep.passed


def test_linear_quadratic_riccati():
    # V = P(t) x^2 with P = tanh(T - t) gives alpha*(t, x) = -tanh(T - t) x
    game = GameSpec([lq_player()])
    grid = TimeGrid.uniform(1.0, dt=0.01)
    est = MeanFieldGameSolver(n_particles=20_000, seed=0).fit(game, grid=grid)
    assert est.report_.converged
    # at t = 0 every particle sits at x0, so u(0, .) is identified only there
    for t in (0.25, 0.5, 0.75):
        xs = np.linspace(-1, 1, 5)[:, None]
        np.testing.assert_allclose(est.predict(xs, t)[:, 0], -np.tanh(1 - t) * xs[:, 0], atol=0.05)
    assert isinstance(dirac_flow(assemble_pontryagin(game), grid), MeasureFlow)
