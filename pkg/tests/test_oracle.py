import numpy as np
import pytest

from conftest import toy_problem
from sgr.dynamics import BarrierShape, CoordinationModel, Formation, MultiAgentSystem, UnsafeSet, simulate
from sgr.graph import Geometry
from sgr.oracle import (
    OracleSettings,
    brute_force_region,
    classify_batch,
    classify_initial_state,
    containment_check,
    sample_sublevel,
    wdot_consistency,
)
from sgr.region.certify import estimate_c_gevp

GEO = Geometry(0.75, 0.9375, 3.5, 11.0, 0.1, 1.921875)
FAST = OracleSettings(horizon=20.0, dt=2e-2)


def road_system():
    form = Formation(np.array([[0.0, 0.0], [-4.0, 0.0]]), np.array([1.0, 0.0]), frozenset({(0, 1)}))
    be = BarrierShape.connectivity_quartic(50.0, 7.0)
    bc = BarrierShape.collision_quartic(50.0, 5.921875, 7.5)
    model = CoordinationModel(form, GEO, be, bc, anchor_gain=1.0)
    unsafe = UnsafeSet.parse([["-x1^2 + 16*x1 - x2^2 + 8*x2 - 76"]], 2)
    return model, MultiAgentSystem(model, unsafe)


class TestClassification:
    def test_equilibrium_in_region(self):
        assert classify_initial_state(np.zeros(2), toy_problem(), FAST).in_region

    def test_unsafe_at_start(self):
        _, sysm = road_system()
        # agent 1 sits at the obstacle centre (8, 4), agent 2 in sensing range at (6, 4)
        q0 = np.array([8.0, 4.0, -1.0, 0.0, 10.0, 4.0, -1.0, 0.0])
        res = classify_batch(sysm, q0, FAST).result(0)
        assert res.violation_kind == "unsafe" and res.first_violation_time == 0.0

    def test_disconnected_at_start(self):
        _, sysm = road_system()
        q0 = np.array([20.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        res = classify_batch(sysm, q0, FAST).result(0)
        assert res.violation_kind == "disconnect" and res.first_violation_time == 0.0

    def test_slow_convergence_flagged(self):
        res = classify_initial_state([2.0, 0.0], toy_problem(), OracleSettings(horizon=1.0, dt=1e-2))
        assert res.violation_kind == "no_convergence"


@pytest.fixture(scope="module")
def halfplane():
    return estimate_c_gevp(toy_problem([["x1 - 1"]]))


class TestContainment:
    def test_certified_toy_clean(self, halfplane):
        rep = containment_check(halfplane, n_samples=10_000, settings=FAST, seed=1)
        assert rep.ok and rep.n_samples == 10_000 and rep.sampling == "rejection"

    def test_inflated_level_caught(self, halfplane):
        rep = containment_check(halfplane, n_samples=10_000, settings=FAST, n_classify=500, seed=1,
                                c_override=1.5)
        assert not rep.ok
        ys = [f["q"][0] for f in rep.static_failures]
        assert min(ys) > 1.0 and max(ys) < np.sqrt(1.5) + 1e-9

    @pytest.mark.parametrize("c", [5.0, 50.0])
    def test_global_toy_any_level(self, c):
        region = estimate_c_gevp(toy_problem())
        rep = containment_check(region, n_samples=2000, settings=OracleSettings(horizon=40.0, dt=2e-2),
                                seed=2, c_override=c)
        assert rep.ok

    def test_ellipsoid_proposal_is_uniform(self):
        from sgr.polynomial import Polynomial

        W = Polynomial.parse("x1^2 + 4*x2^2 + x1^4", 2)
        pts, mode, _ = sample_sublevel(W, 1.0, 20_000, np.random.default_rng(3))
        assert mode == "rejection"
        assert np.all(np.asarray(W.evaluate(pts)) <= 1.0)
        # symmetric set: quadrant counts agree
        quad = np.bincount((pts[:, 0] > 0) * 2 + (pts[:, 1] > 0), minlength=4)
        assert quad.min() / quad.max() > 0.9

    def test_seed_determinism(self, halfplane):
        a = containment_check(halfplane, n_samples=500, n_classify=0, seed=7)
        b = containment_check(halfplane, n_samples=500, n_classify=0, seed=7)
        assert a.to_dict() == b.to_dict()

    def test_radial_fallback_for_thin_sets(self):
        from sgr.polynomial import Polynomial

        # singular quadratic part forces the box proposal, which is far too wide along x2
        W = Polynomial.parse("x1^2 + 1000000*x2^2 + x3^4 + x4^4 + x5^4 + x6^4", 6)
        pts, mode, _ = sample_sublevel(W, 1e-6, 200, np.random.default_rng(0), max_draw_factor=1)
        assert mode == "radial"
        assert np.all(np.asarray(W.evaluate(pts)) <= 1e-6 * (1 + 1e-9))


class TestGrid:
    def test_all_unsafe(self):
        prob = toy_problem([["1"]])
        grid = brute_force_region(prob, -1, 1, 0.5, settings=FAST)
        assert not grid.mask.any()

    def test_global_toy_all_in(self):
        grid = brute_force_region(toy_problem(), -2, 2, 0.5, settings=OracleSettings(horizon=40.0, dt=2e-2))
        assert grid.mask.all()

    def test_csv_header(self, tmp_path):
        grid = brute_force_region(toy_problem([["x1 - 1"]]), -1, 1, 1.0, settings=FAST)
        grid.write_csv(tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0] == "dim1,dim2,verdict,violation_kind,t_violation"
        assert len(lines) == 10

    def test_node_limit(self):
        with pytest.raises(ValueError):
            brute_force_region(toy_problem(), -3, 3, 0.001, max_nodes=1000)

    def test_refinement_stability(self):
        prob = toy_problem([["x1 - 1"]])
        coarse = brute_force_region(prob, -2, 2, 0.1, settings=FAST)
        fine = brute_force_region(prob, -2, 2, 0.05, settings=FAST)
        vol = [g.mask.mean() for g in (coarse, fine)]
        assert abs(vol[0] - vol[1]) / vol[1] < 0.02


class TestWdotConsistency:
    def test_equilibrium(self):
        model, _ = road_system()
        traj = simulate(model, model.formation.tau, np.tile(model.formation.rho_star, (2, 1)), 1.0, 1e-2)
        assert wdot_consistency(traj) < 1e-20

    def test_second_order_in_dt(self):
        model, _ = road_system()
        x0 = [[0.5, 0.3], [-4.2, -0.4]]
        rho0 = [[1.3, 0.1], [0.6, -0.2]]
        dev = [wdot_consistency(simulate(model, x0, rho0, 2.0, dt)) for dt in (2e-2, 1e-2)]
        assert 3.0 < dev[0] / dev[1] < 5.0
