"""Acceptance suite: one test per criterion, each recorded as a PASS/FAIL line."""

import json
import time
import warnings

import numpy as np
import pytest

from conftest import SCENARIOS, load_raw, toy_problem, unique_regions
from sgr.dynamics import (
    BarrierShape,
    CoordinationModel,
    Formation,
    MultiAgentSystem,
    barrier_intervals,
    simulate,
)
from sgr.graph import Geometry
from sgr.oracle import OracleSettings, brute_force_region, containment_check, wdot_consistency
from sgr.polynomial import (
    Polynomial,
    _pair_table,
    null_basis_entries,
    power_vector,
    smr_dimensions,
    smr_lift_entries,
    smr_of,
)
from sgr.region.barrier import barrier_validity_sos
from sgr.region.certify import CertificationRefused, estimate_c_gevp
from sgr.scenario import load_scenario, parse_scenario, with_overrides
from sgr.system import build_wdot, multi_agent_problem, reference_masks

GEO = Geometry(r_a=0.75, r_c=0.9375, r_z=3.5, r_s=11.0, eps=0.1, d_s=1.921875)


def quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# 1, 2: SMR
# ---------------------------------------------------------------------------


def test_c1_smr_example(record_criterion):
    t0 = time.perf_counter()
    form = smr_of(Polynomial.parse("3*x1^4 + 4*x1^3 + 6*x1^2 + 7", 1))
    elapsed = time.perf_counter() - t0
    # canonical order is ascending (1, x, x^2); reversing gives (x^2, x, 1)
    base = form.base[::-1, ::-1]
    null = [N.toarray()[::-1, ::-1] for N in form.null_basis]
    ok = (np.array_equal(base, [[3, 2, 0], [2, 6, 0], [0, 0, 7]]) and len(null) == 1
          and np.array_equal(null[0], [[0, 0, -1], [0, 2, 0], [-1, 0, 0]]) and elapsed < 1.0)
    record_criterion(1, ok, f"base {base.astype(int).tolist()}, null {[n.astype(int).tolist() for n in null]}, "
                            f"{elapsed * 1e3:.1f} ms")
    assert ok


def _random_poly(rng, n, deg):
    terms = {}
    for _ in range(rng.integers(1, 9)):
        d = int(rng.integers(0, deg + 1))
        cuts = np.sort(rng.integers(0, d + 1, size=n - 1))
        mono = tuple(int(v) for v in np.diff(np.concatenate([[0], cuts, [d]])))
        terms[mono] = float(rng.normal() * 10 ** rng.uniform(-2, 2))
    top = tuple([deg] + [0] * (n - 1))
    terms.setdefault(top, 1.0)
    return Polynomial(n, terms)


def _null_invariants(n, d, rng):
    """Null matrices vanish as quadratic forms and are independent (distinct free entries)."""
    l, theta = smr_dimensions(n, d)
    ks, rows, cols, vals = null_basis_entries(n, d)
    if theta == 0:
        return len(ks) == 0, 0.0
    if ks.max() + 1 != theta:
        return False, np.inf
    phi = power_vector(n, d)
    v = phi.evaluate(rng.uniform(-1.5, 1.5, size=(3, n)))
    contrib = vals[None] * v[:, rows] * v[:, cols]
    sums = np.zeros((theta, 3))
    np.add.at(sums, ks, contrib.T)
    scale = np.zeros((theta, 3))
    np.add.at(scale, ks, np.abs(contrib.T))
    err = float(np.max(np.abs(sums) / np.maximum(scale, 1.0)))
    canon = set(_pair_table(n, d).canonical.values())
    upper = rows <= cols
    free = [(int(k), int(r), int(c)) for k, r, c in zip(ks[upper], rows[upper], cols[upper]) if (r, c) not in canon]
    own = {}
    for k, r, c in free:
        own.setdefault((r, c), set()).add(k)
    distinct = len(own) == theta and all(len(s) == 1 for s in own.values())
    sym = all(np.isclose(vals[(ks == k) & (rows == r) & (cols == c)].sum(),
                         vals[(ks == k) & (rows == c) & (cols == r)].sum()) for k, r, c in free[:200])
    return distinct and sym, err


def test_c2_smr_round_trip(record_criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_rec, worst_null, bad = 0.0, 0.0, 0
    checked = {}
    for _ in range(1000):
        n, deg = int(rng.integers(1, 7)), int(rng.integers(0, 9))
        p = _random_poly(rng, n, deg)
        d = max(1, -(-p.degree // 2))
        phi = power_vector(n, d)
        r, c, v = smr_lift_entries(p, phi)
        scale = max(1.0, p.max_abs_coefficient())
        ks, nr, nc, nv = null_basis_entries(n, d)
        pick = rng.choice(int(ks.max()) + 1, size=min(10, int(ks.max()) + 1), replace=False) if len(ks) else []
        rr, cc, vv = [r], [c], [v]
        for k in pick:
            sel = ks == k
            w = rng.normal()
            rr.append(nr[sel])
            cc.append(nc[sel])
            vv.append(w * nv[sel])
        for with_null in (False, True):
            R = np.concatenate(rr if with_null else rr[:1])
            C = np.concatenate(cc if with_null else cc[:1])
            V = np.concatenate(vv if with_null else vv[:1])
            terms = {}
            for i, j, val in zip(R, C, V):
                m = tuple(a + b for a, b in zip(phi.monomials[i], phi.monomials[j]))
                terms[m] = terms.get(m, 0.0) + val
            err = max((abs(terms.get(m, 0.0) - p.coefficient(m)) for m in set(terms) | set(p.monomials())),
                      default=0.0) / scale
            worst_rec = max(worst_rec, err)
            bad += err > 1e-9
        if (n, d) not in checked:
            checked[(n, d)] = _null_invariants(n, d, rng)
            worst_null = max(worst_null, checked[(n, d)][1])
            bad += not checked[(n, d)][0]
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and worst_null <= 1e-9 and elapsed < 30.0
    record_criterion(2, ok, f"1000 polynomials, worst reconstruction {worst_rec:.2e}, worst null form "
                            f"{worst_null:.2e}, {len(checked)} (n, d) bases, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 3: Wdot identity
# ---------------------------------------------------------------------------


def _random_model(rng, N, n, anchor=0.0):
    tau = rng.uniform(-6, 6, size=(N, n))
    edges = {(i, j) for i in range(N) for j in range(i + 1, N) if rng.uniform() < 0.6}
    form = Formation(tau, rng.normal(size=n), frozenset(edges))
    W = np.triu(rng.uniform(0.3, 2.0, size=(N, N)), 1)
    be = BarrierShape("connectivity", (0.0, *rng.uniform(0, 1, 2)), 1.0)
    bc = BarrierShape("collision", tuple(rng.normal(size=3)), 1.0)
    return CoordinationModel(form, GEO, be, bc, base_weights=W + W.T, anchor_gain=anchor)


def _platoon_like(rng, N, n):
    tau = np.zeros((N, n))
    tau[:, 0] = -4.5 * np.arange(N)
    form = Formation(tau, np.eye(n)[0], frozenset((i, i + 1) for i in range(N - 1)))
    iv = barrier_intervals(GEO, form)
    be = BarrierShape.connectivity_quartic(50.0, iv.r_hat_s)
    bc = BarrierShape.collision_quartic(50.0, iv.d_hat_s, iv.r_tilde)
    model = CoordinationModel(form, GEO, be, bc, anchor_gain=float(rng.choice([0.0, 0.5])))
    x0 = tau + rng.uniform(-0.4, 0.4, size=tau.shape)
    rho0 = form.rho_star + rng.uniform(-0.3, 0.3, size=tau.shape)
    return model, x0, rho0


def test_c3_wdot_identity(record_criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        N, n = int(rng.choice([2, 3])), int(rng.choice([1, 2]))
        model = _random_model(rng, N, n)
        prob = multi_agent_problem(model, task_blocks=False)
        _, _, _, G = reference_masks(model)
        m = prob.num_vars
        v = [[Polynomial.variable(m, i * 2 * n + n + a) for a in range(n)] for i in range(N)]
        expected = Polynomial.zero(m)
        for i in range(N):
            for j in range(i + 1, N):
                for a in range(n):
                    d = v[i][a] - v[j][a]
                    expected = expected - (d * d).scale(G[i, j])
        diff = build_wdot(prob.W, prob) - expected
        worst = max(worst, diff.max_abs_coefficient() if not diff.is_zero() else 0.0)

    # finite differences of W along simulated runs: central-difference error is W''' dt^2 / 6
    fd_ok, ratios = True, []
    for _ in range(4):
        N, n = int(rng.choice([2, 3])), int(rng.choice([1, 2]))
        model, x0, rho0 = _platoon_like(rng, N, n)
        devs = []
        for dt in (2e-3, 1e-3):
            traj = simulate(model, x0, rho0, 3.0, dt)
            dev = wdot_consistency(traj)
            same = (traj.mode[:-2] == traj.mode[1:-1]) & (traj.mode[1:-1] == traj.mode[2:])
            w3 = np.abs(np.diff(traj.Wdot, 2) / dt**2)[same]
            bound = 2.0 * (w3.max() if w3.size else 0.0) * dt**2 / 6 + 1e-6
            fd_ok &= dev <= bound
            devs.append(dev)
        ratios.append(devs[0] / max(devs[1], 1e-300))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and fd_ok
    record_criterion(3, ok, f"100 configurations, max coefficient gap {worst:.2e}; finite-difference "
                            f"deviation within the dt^2 bound: {fd_ok}, halving ratios "
                            f"{[round(r, 2) for r in ratios]}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 4: platoon properties
# ---------------------------------------------------------------------------


def test_c4_platoon_properties(record_criterion):
    cfg = quiet(parse_scenario, SCENARIOS / "platoon_3car.json")
    t0 = time.perf_counter()
    traj = simulate(cfg.model, cfg.x0, cfg.rho0, cfg.sim.horizon, cfg.sim.dt, cfg.unsafe, record_every=1)
    elapsed = time.perf_counter() - t0
    l2, dmin = traj.lambda2.min(), traj.min_dist.min()
    spread = traj.velocity_spread()[-1]
    ferr = traj.formation_error(cfg.model.formation.tau)[-1]
    ok = l2 > 0 and dmin > cfg.model.geometry.d_s and spread < 1e-3 and ferr < 1e-2 and elapsed < 60.0
    record_criterion(4, ok, f"min lambda2 {l2:.4f}, min distance {dmin:.4f} > d_s {cfg.model.geometry.d_s}, "
                            f"final velocity spread {spread:.2e}, final formation error {ferr:.2e}, "
                            f"Wdot consistency {wdot_consistency(traj):.2e}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 5: GEVP desk oracles
# ---------------------------------------------------------------------------


def test_c5_gevp_toys(record_criterion):
    results = []
    for unsafe, target, tol in ((["x1 - 1"], 1.0, 5e-3), (["x1^2 + x2^2 - 4"], 4.0, 2e-2)):
        t0 = time.perf_counter()
        region = estimate_c_gevp(toy_problem([unsafe]))
        results.append((region.c, target, tol, time.perf_counter() - t0))
    ok = all(abs(c - t) <= tol and s < 60.0 for c, t, tol, s in results)
    record_criterion(5, ok, "; ".join(f"c = {c:.6f} (target {t} +- {tol:g}, {s:.1f} s)" for c, t, tol, s in results))
    assert ok


# ---------------------------------------------------------------------------
# 7: barrier optimisation
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c7_barrier_optimisation(record_criterion, tmp_path):
    from sgr.pipeline import run_optimize

    cfg = quiet(parse_scenario, SCENARIOS / "two_agent_line.json")
    assert cfg.estimator.n_iters == 10
    summary, res = run_optimize(cfg, tmp_path / "toy")
    traces = res.traces
    steps = np.diff(traces)
    mono = bool(np.all(steps <= 1e-6))
    better = res.kappa >= res.baseline_kappa

    raw = with_overrides(load_raw("platoon_3car"), {"estimator.d_b": 2, "estimator.n_iters": 5})
    budget_cfg = quiet(load_scenario, raw)
    t0 = time.perf_counter()
    budget, _ = run_optimize(budget_cfg, tmp_path / "platoon")
    budget_s = time.perf_counter() - t0
    ok = mono and better and budget_s < 600.0
    record_criterion(7, ok, f"{len(traces)} traces, max step {steps.max():.2e}, kappa {res.kappa:.6g} >= baseline "
                            f"{res.baseline_kappa:.6g}; platoon d_b = 2, 5 iterations in {budget_s:.1f} s "
                            f"(zeta {budget['zeta']:.4f}; reference zeta 16.3245 not asserted)")
    assert ok


# ---------------------------------------------------------------------------
# 8: brute-force containment
# ---------------------------------------------------------------------------


def test_c8_grid_containment(record_criterion, region_cache):
    region = region_cache("toy_halfplane")
    cfg = quiet(parse_scenario, SCENARIOS / "toy_halfplane.json")
    t0 = time.perf_counter()
    grid = brute_force_region(region.problem, -3.0, 3.0, 0.05, settings=cfg.sim.oracle)
    elapsed = time.perf_counter() - t0
    cert_in = region.contains(grid.states)
    bad = int((cert_in & ~grid.classification.in_region).sum())
    ok = bad == 0 and cert_in.sum() > 0 and elapsed < 300.0
    record_criterion(8, ok, f"{len(grid.points)} nodes, {int(cert_in.sum())} certified, "
                            f"{int(grid.classification.in_region.sum())} oracle-in, {bad} certified-in/oracle-out, "
                            f"{elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 9: fixed barrier validity
# ---------------------------------------------------------------------------


def test_c9_barrier_validity(record_criterion):
    cfg = quiet(parse_scenario, SCENARIOS / "platoon_3car.json")
    iv = barrier_intervals(cfg.model.geometry, cfg.model.formation)
    t0 = time.perf_counter()
    be = BarrierShape.connectivity_quartic(50.0, iv.r_hat_s)
    bc = BarrierShape.collision_quartic(50.0, iv.d_hat_s, iv.r_tilde)
    passed = []
    for shape, interval in ((be, (0.0, iv.r_hat_s)), (bc, (iv.d_hat_s, iv.z_max))):
        certs = barrier_validity_sos(shape, interval)
        passed.append(shape.degree == 4 and all(c.verify() for c in certs.values()))
    try:
        barrier_validity_sos(BarrierShape("connectivity", (0.0, -1.0, 1.0), 0.0), (0.0, 1.0))
        refused = False
    except CertificationRefused:
        refused = True
    elapsed = time.perf_counter() - t0
    ok = all(passed) and refused and elapsed < 30.0
    record_criterion(9, ok, f"connectivity quartic {passed[0]}, collision quartic {passed[1]}, "
                            f"z^4 - z^2 refused {refused}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 6: soundness gate over every region built in this session
# ---------------------------------------------------------------------------

SHIPPED = ("toy_halfplane", "toy_annulus", "toy_global", "toy_cubic", "two_agent_line", "platoon_3car")


@pytest.mark.runs_last
def test_c6_soundness_gate(record_criterion, region_cache):
    for name in SHIPPED:
        region_cache(name)
    regions = unique_regions()
    t0 = time.perf_counter()
    rows, failures = [], 0
    for k, region in enumerate(regions):
        multi = isinstance(region.problem.simulator, MultiAgentSystem)
        rep = containment_check(region, n_samples=100_000, settings=OracleSettings(),
                                n_classify=500 if multi else 2000, seed=1000 + k)
        failures += rep.n_failures
        rows.append(f"{region.problem.label}:{region.c:.4g}:{rep.n_failures}")
    toy = region_cache("toy_halfplane")
    neg = containment_check(toy, n_samples=100_000, n_classify=200, seed=99, c_override=1.5)
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and neg.n_failures >= 1 and elapsed < 300.0
    record_criterion(6, ok, f"{len(regions)} regions x 1e5 samples, {failures} violations; inflated c = 1.5 "
                            f"control: {neg.n_failures} violations; {elapsed:.1f} s")
    print(json.dumps(rows))
    assert ok
