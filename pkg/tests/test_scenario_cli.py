import json
import warnings

import numpy as np
import pytest

from conftest import SCENARIOS, load_raw, toy_problem
from sgr.cli import main
from sgr.contour import Polyline, slice_region
from sgr.polynomial import Polynomial
from sgr.scenario import ScenarioError, load_scenario, parse_scenario, with_overrides


def quiet_load(raw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return load_scenario(raw)


def write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw), encoding="utf-8")
    return str(p)


class TestScenario:
    def test_platoon_loads(self):
        with warnings.catch_warnings(record=True):
            warnings.simplefilter("always")
            cfg = parse_scenario(SCENARIOS / "platoon_3car.json")
        geo = cfg.model.geometry
        assert (geo.r_a, geo.r_s, geo.r_z, geo.eps) == (0.75, 11.0, 3.5, 0.1)
        assert geo.r_c == pytest.approx(1.25 * geo.r_a)
        assert geo.d_s > 2 * geo.r_c
        assert cfg.model.n_agents == 3 and cfg.model.dim == 2

    @pytest.mark.parametrize("name", ["toy_halfplane", "toy_annulus", "toy_global", "toy_cubic", "two_agent_line"])
    def test_shipped_files_load(self, name):
        assert quiet_load(load_raw(name)).name == name

    def test_geometry_ordering_rejected(self):
        raw = with_overrides(load_raw("platoon_3car"), {"geometry.r_z": 12.0})
        with pytest.raises(ScenarioError, match="ordering"):
            quiet_load(raw)

    def test_printed_energy_cap_rejected(self):
        raw = with_overrides(load_raw("platoon_3car"), {"barriers.mu_check": "printed"})
        with pytest.raises(ScenarioError, match="mu > mu_max"):
            quiet_load(raw)

    def test_missing_field_path(self):
        raw = load_raw("platoon_3car")
        del raw["geometry"]["d_s"]
        with pytest.raises(ScenarioError, match="geometry.d_s"):
            quiet_load(raw)

    def test_bad_polynomial_path(self):
        raw = with_overrides(load_raw("toy_halfplane"), {"W": "x1^2 + x9"})
        with pytest.raises(ScenarioError, match="W"):
            quiet_load(raw)

    def test_problem_matches_toy(self):
        cfg = quiet_load(load_raw("toy_halfplane"))
        prob = cfg.problem()
        assert prob.W.almost_equal(toy_problem().W)
        assert len(prob.unsafe_blocks) == 1

    def test_seed_is_stable(self):
        a, b = quiet_load(load_raw("toy_halfplane")), quiet_load(load_raw("toy_halfplane"))
        assert a.seed() == b.seed() and a.seed(5) == 5


class TestContour:
    def test_unit_circle_slice(self):
        W = Polynomial.parse("x1^2 + x2^2", 2)
        sl = slice_region(W, 1.0, (0, 1), np.zeros(2))
        assert len(sl.polylines) == 1
        pl = sl.polylines[0]
        assert pl.closed and not pl.self_intersects()
        assert sl.max_level_error < 1e-6
        assert np.allclose(np.linalg.norm(pl.vertices, axis=1), 1.0, atol=1e-6)

    def test_figure_eight_detected(self):
        v = np.array([[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]], dtype=float)
        assert Polyline(v, True).self_intersects()

    def test_same_dims_rejected(self):
        with pytest.raises(ValueError):
            slice_region(Polynomial.parse("x1^2 + x2^2", 2), 1.0, (0, 0), np.zeros(2))


class TestCli:
    def test_certify_writes_report(self, tmp_path):
        assert main(["certify", "--config", str(SCENARIOS / "toy_halfplane.json"), "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "region.json").read_text())
        assert rep["verified"] and rep["c"] == pytest.approx(1.0, abs=2e-4)

    def test_estimate_alias(self, tmp_path):
        assert main(["estimate", "--config", str(SCENARIOS / "toy_annulus.json"), "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "region.json").read_text())["c"] == pytest.approx(4.0, abs=2e-2)

    def test_refusal_exit_code(self, tmp_path, capsys):
        raw = with_overrides(load_raw("toy_halfplane"), {"vector_field": ["x1", "-x2"]})
        assert main(["certify", "--config", write(tmp_path, raw)]) == 3
        assert "refused" in capsys.readouterr().err

    def test_invalid_input_exit_code(self, tmp_path):
        raw = with_overrides(load_raw("toy_halfplane"), {"num_vars": 0})
        assert main(["certify", "--config", write(tmp_path, raw)]) == 2

    def test_simulate_is_deterministic(self, tmp_path):
        raw = with_overrides(load_raw("two_agent_line"), {"sim.horizon": 2})
        path = write(tmp_path, raw)
        for sub in ("a", "b"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                assert main(["simulate", "--config", path, "--out", str(tmp_path / sub)]) == 0
        for f in ("trajectory.csv", "edges.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_slice_outputs(self, tmp_path):
        out = tmp_path / "s"
        assert main(["slice", "--config", str(SCENARIOS / "toy_annulus.json"), "--out", str(out)]) == 0
        assert (out / "slice.csv").read_text().splitlines()[0] == "curve,vertex,y,v"
        rep = json.loads((out / "slice.json").read_text())
        curve = rep["curves"][0]
        assert curve["closed"] and not curve["self_intersecting"]
        assert curve["vertices_in_region"] == curve["vertices"] and not curve["inside_excluded_blocks"]
        assert rep["max_level_error"] < 1e-6

    def test_sweep(self, tmp_path):
        rc = main(["sweep", "--config", str(SCENARIOS / "toy_halfplane.json"), "--out", str(tmp_path),
                   "--set", "estimator.sigma2=0.5,1.0"])
        assert rc == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "estimator.sigma2,status,c,binding" and len(lines) == 3

    def test_solver_tolerance_env(self, monkeypatch):
        from sgr.sdp import default_tol_psd

        monkeypatch.setenv("SGR_SOLVER_TOL", "1e-7")
        assert default_tol_psd() == 1e-7


class TestMultiAgentSlices:
    @pytest.mark.parametrize("name,agent,dims", [("two_agent_line", 1, (1, 2)), ("platoon_3car", 1, (1, 2))])
    def test_slice_vertices_reverify(self, tmp_path, region_cache, name, agent, dims):
        from sgr.pipeline import run_slice

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = parse_scenario(SCENARIOS / f"{name}.json")
        rep = run_slice(cfg, tmp_path, agent, dims, "formation", region=region_cache(name))
        assert rep["curves"] and rep["max_level_error"] < 1e-6
        for curve in rep["curves"]:
            assert curve["closed"] and not curve["self_intersecting"]
            assert curve["vertices_in_region"] == curve["vertices"]
            assert not curve["inside_excluded_blocks"]
