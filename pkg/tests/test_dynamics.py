import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgr.dynamics import (
    BarrierShape,
    ConfigurationError,
    CoordinationModel,
    Formation,
    UnsafeSet,
    barrier_intervals,
    control_input,
    lyapunov_rate,
    lyapunov_value,
    mu_max,
    q_to_states,
    simulate,
    states_to_q,
    transform,
    unsafe_membership,
    validate_barrier_numeric,
)
from sgr.graph import Geometry, WeightedGraph, initial_graph

GEO = Geometry(r_a=0.75, r_c=0.9375, r_z=3.5, r_s=11.0, eps=0.1, d_s=1.921875)

# obstacle and road boundaries of the platooning example, written as "all > 0" blocks
ROAD = UnsafeSet.parse(
    [["-x1^2 + 16*x1 - x2^2 + 8*x2 - 76"], ["x1 - 7", "-2 - x2"], ["-x1", "x2 - 2"], ["-6 - x2"], ["x2 - 6"]], 2
)


def pair_model(tau2=5.0, edges=(), anchor=0.0):
    form = Formation(np.array([[0.0], [tau2]]), np.zeros(1), frozenset(edges))
    iv = barrier_intervals(GEO, form)
    be = BarrierShape.connectivity_quartic(50.0, iv.r_hat_s)
    bc = BarrierShape.collision_quartic(50.0, iv.d_hat_s, iv.r_tilde)
    return CoordinationModel(form, GEO, be, bc, anchor_gain=anchor)


class TestTransform:
    def test_formation_maps_to_origin(self):
        form = Formation(np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([1.0, 0.0]), frozenset())
        q = states_to_q(form.tau, np.tile(form.rho_star, (2, 1)), form)
        assert not q.any()

    def test_one_agent_subtraction(self):
        form = Formation(np.array([[2.0]]), np.zeros(1), frozenset())
        assert transform([[3.0]], [[1.0]], form).q.tolist() == [1.0, 1.0]

    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**20))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, N, n, seed):
        rng = np.random.default_rng(seed)
        form = Formation(rng.normal(size=(N, n)), rng.normal(size=n), frozenset())
        x, rho = rng.normal(size=(N, n)), rng.normal(size=(N, n))
        x2, rho2 = q_to_states(states_to_q(x, rho, form), form)
        assert np.max(np.abs(x2 - x)) < 1e-12 and np.max(np.abs(rho2 - rho)) < 1e-12


class TestBarrierShapes:
    def test_quartic_connectivity_valid(self):
        r_hat = GEO.r_s - 4.0
        assert validate_barrier_numeric(BarrierShape.connectivity_quartic(50.0, r_hat), GEO, 4.0)

    def test_negative_barrier_rejected(self):
        chk = validate_barrier_numeric(BarrierShape("connectivity", (0.0, -1.0), 50.0), GEO, 4.0)
        assert not chk and chk.witness is not None

    def test_sextic_valid(self):
        r_hat = GEO.r_s - 4.0
        b = BarrierShape("connectivity", (0.0, 0.0, 0.0, 50.0 / r_hat**6), 50.0)
        assert validate_barrier_numeric(b, GEO, 4.0)

    def test_quartic_collision_valid(self):
        form = Formation(np.array([[0.0], [4.0]]), np.zeros(1), frozenset({(0, 1)}))
        iv = barrier_intervals(GEO, form)
        b = BarrierShape.collision_quartic(50.0, iv.d_hat_s, iv.r_tilde)
        assert validate_barrier_numeric(b, GEO, 4.0, iv.z_max)

    def test_odd_powers_rejected(self):
        from sgr.polynomial import Polynomial

        with pytest.raises(ValueError):
            BarrierShape.from_polynomial("connectivity", Polynomial.parse("x1^3", 1), 1.0)


class TestController:
    def test_equilibrium(self):
        m = pair_model(4.0, [(0, 1)])
        g = WeightedGraph.from_edges(2, [(0, 1)])
        for i in range(2):
            assert not control_input(i, m.formation.tau, np.zeros((2, 1)), g, m).any()

    def test_pair_without_barriers(self):
        m = pair_model(5.0)
        g = WeightedGraph.from_edges(2, [(0, 1)])
        x = np.array([[1.0], [5.0]])
        rho = np.zeros((2, 1))
        assert control_input(0, x, rho, g, m)[0] == pytest.approx(-1.0)
        assert control_input(1, x, rho, g, m)[0] == pytest.approx(1.0)

    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_mirror_antisymmetry(self, dy, dv):
        m = pair_model(4.0, [(0, 1)])
        g = WeightedGraph.from_edges(2, [(0, 1)])
        x = np.array([[dy], [4.0 - dy]])
        rho = np.array([[dv], [-dv]])
        u0, u1 = control_input(0, x, rho, g, m), control_input(1, x, rho, g, m)
        assert u0[0] == pytest.approx(-u1[0], abs=1e-12)


class TestLyapunov:
    def test_zero_at_formation(self):
        m = pair_model(5.0, [(0, 1)])
        g = WeightedGraph.from_edges(2, [(0, 1)])
        assert lyapunov_value(m.formation.tau, np.zeros((2, 1)), g, m) == pytest.approx(0.0, abs=1e-12)

    def test_consensus_quadratic(self):
        # 1/2 y^T L y with y = (1, 0) and a unit edge
        m = pair_model(5.0)
        g = WeightedGraph.from_edges(2, [(0, 1)])
        assert lyapunov_value([[1.0], [5.0]], np.zeros((2, 1)), g, m) == pytest.approx(0.5)

    def test_rate_examples(self):
        g = WeightedGraph.from_edges(2, [(0, 1)])
        assert lyapunov_rate([[1.0], [0.0]], g) == pytest.approx(-1.0)
        assert lyapunov_rate([[0.7], [0.7]], g) == pytest.approx(0.0)
        assert lyapunov_rate([[3.0], [-2.0]], WeightedGraph.empty(2)) == 0.0

    def test_mu_max_single_agent(self):
        form = Formation(np.zeros((1, 1)), np.zeros(1), frozenset())
        m = CoordinationModel(form, GEO, BarrierShape("connectivity", (0.0, 1.0), 1.0),
                              BarrierShape("collision", (1.0,), 1.0))
        rho0 = np.array([[1.5]])
        assert mu_max([[0.3]], rho0, WeightedGraph.empty(1), m) == pytest.approx(0.5 * 1.5**2)

    def test_mu_max_at_formation_keeps_barrier_caps_only(self):
        m = pair_model(4.0, [(0, 1)])
        g = WeightedGraph.from_edges(2, [(0, 1)])
        eps_hat = 0.02
        iv = barrier_intervals(GEO, m.formation)
        expected = 2 * 0.5 * m.barrier_e.value(iv.r_hat_s - eps_hat) + 2 * m.barrier_c.value(iv.d_hat_s - eps_hat)
        assert mu_max(m.formation.tau, np.zeros((2, 1)), g, m, eps_hat) == pytest.approx(float(expected))

    def test_mu_max_platoon_regression(self):
        from sgr.scenario import parse_scenario
        from conftest import SCENARIOS

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = parse_scenario(SCENARIOS / "platoon_3car.json")
        g = initial_graph(cfg.x0, cfg.model.geometry, cfg.model.base_weights)
        assert mu_max(cfg.x0, cfg.rho0, g, cfg.model) == pytest.approx(405.88371644427997, rel=1e-9)


class TestUnsafe:
    def test_obstacle_centre(self):
        inside, first = unsafe_membership(np.array([[8.0, 4.0]]), ROAD)
        assert inside[0] and first[0] == 0

    def test_corridor_origin_safe(self):
        inside, _ = unsafe_membership(np.array([[0.0, 0.0]]), ROAD)
        assert not inside[0]

    def test_road_edge(self):
        inside, first = unsafe_membership(np.array([[0.0, 7.0]]), ROAD)
        assert inside[0] and first[0] in (2, 4)


class TestSimulate:
    def test_stationary_at_formation(self):
        m = pair_model(4.0, [(0, 1)], anchor=1.0)
        traj = simulate(m, m.formation.tau, np.zeros((2, 1)), horizon=1.0, dt=1e-2)
        assert np.max(np.abs(traj.W)) < 1e-14
        assert np.max(np.abs(traj.x - m.formation.tau)) < 1e-14

    def test_disconnected_start_rejected(self):
        m = pair_model(4.0, [(0, 1)])
        with pytest.raises(ConfigurationError):
            simulate(m, [[0.0], [40.0]], np.zeros((2, 1)), horizon=1.0)

    def test_energy_non_increasing_in_fixed_mode(self):
        m = pair_model(4.0, [(0, 1)], anchor=1.0)
        traj = simulate(m, [[0.3], [3.8]], [[0.1], [-0.2]], horizon=5.0, dt=1e-3)
        same = traj.mode[1:] == traj.mode[:-1]
        assert np.all(np.diff(traj.W)[same] <= 1e-10)
        assert np.all(traj.Wdot <= 1e-12)

    def test_edge_log_and_csv(self, tmp_path):
        m = pair_model(4.0, [(0, 1)], anchor=1.0)
        traj = simulate(m, [[0.3], [3.8]], [[0.1], [-0.2]], horizon=0.1, dt=1e-2)
        traj.write_csv(tmp_path / "t.csv")
        traj.write_edge_log(tmp_path / "e.csv")
        head = (tmp_path / "t.csv").read_text().splitlines()[0]
        assert head == "t,agent,x1,v1,lambda2,min_dist,W,Wdot,unsafe"
        assert (tmp_path / "e.csv").read_text().splitlines()[0] == "t,i,j,event"
