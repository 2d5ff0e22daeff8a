"""Command implementations shared by the CLI and the tests.

Every command writes UTF-8 CSV/JSON artefacts into an output directory and
returns a summary dictionary.  Refusals propagate as
:class:`~sgr.region.certify.CertificationRefused`.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .contour import slice_region
from .dynamics import rk4_step, simulate
from .oracle import brute_force_region, classify_batch, containment_check, wdot_consistency
from .polynomial import PolyEvaluator
from .region.barrier import optimize_barriers
from .region.certify import CertificationRefused, CertifiedRegion, estimate_c_gevp
from .scenario import ScenarioConfig, load_scenario, with_overrides
from .system import build_wdot

log = logging.getLogger(__name__)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    return str(o)


def _out_dir(cfg: ScenarioConfig, out) -> Path:
    p = Path(out or cfg.outputs)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate_polynomial(cfg: ScenarioConfig, out: Path) -> dict:
    problem = cfg.problem()
    sysm = problem.simulator
    ev = PolyEvaluator([problem.W, build_wdot(problem.W, problem)])
    q = cfg.q0[None].copy()
    dt, n_steps = cfg.sim.dt, int(round(cfg.sim.horizon / cfg.sim.dt))
    rows = []
    violation = None
    for k in range(n_steps + 1):
        t = k * dt
        code = int(sysm.violation_codes(t, q, None)[0])
        if code and violation is None:
            violation = t
        if k % cfg.sim.record_every == 0 or k == n_steps:
            w, wd = ev(q)[0]
            rows.append([t, *q[0], w, wd, code])
        if k < n_steps:
            q = rk4_step(sysm, t, q, None, dt)
    names = list(problem.names)
    with open(out / "trajectory.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names, "W", "Wdot", "unsafe"])
        for r in rows:
            w.writerow([f"{r[0]:.6f}"] + [f"{v:.10g}" for v in r[1:-1]] + [r[-1]])
    return {"final_norm": float(np.linalg.norm(q)), "first_unsafe_time": violation, "steps": n_steps}


def run_simulate(cfg: ScenarioConfig, out=None) -> dict:
    out = _out_dir(cfg, out)
    if cfg.kind == "polynomial_system":
        summary = _simulate_polynomial(cfg, out)
    else:
        traj = simulate(cfg.model, cfg.x0, cfg.rho0, cfg.sim.horizon, cfg.sim.dt, cfg.unsafe,
                        record_every=cfg.sim.record_every)
        traj.write_csv(out / "trajectory.csv")
        traj.write_edge_log(out / "edges.csv")
        summary = {
            "min_pairwise_distance": float(traj.min_dist.min()),
            "d_s": cfg.model.geometry.d_s,
            "min_lambda2": float(traj.lambda2.min()),
            "final_velocity_spread": float(traj.velocity_spread()[-1]),
            "final_formation_error": float(traj.formation_error(cfg.model.formation.tau)[-1]),
            "unsafe_entries": int(traj.unsafe.any(axis=-1).sum()),
            "edge_events": len(traj.edge_events),
            "wdot_consistency": wdot_consistency(traj),
            "terminated": traj.terminated,
        }
    summary["scenario"] = cfg.name
    _write_json(out / "simulate.json", summary)
    return summary


# ---------------------------------------------------------------------------
# certify / optimize
# ---------------------------------------------------------------------------


def certify_fixed(cfg: ScenarioConfig, model=None) -> CertifiedRegion:
    est = cfg.estimator
    region = estimate_c_gevp(
        cfg.problem(model), sigma1=est.sigma1, sigma2=est.sigma2, degrees=est.degrees,
        bisect_tol=est.bisect_tol, inline_unsafe_terms=est.inline_unsafe_terms,
        exclusion=est.exclusion,
    )
    region.meta["scenario"] = cfg.name
    return region


def run_certify(cfg: ScenarioConfig, out=None) -> dict:
    out = _out_dir(cfg, out)
    t0 = time.perf_counter()
    region = certify_fixed(cfg)
    region.meta["wall_time_s"] = time.perf_counter() - t0
    region.write_json(out / "region.json")
    return {"scenario": cfg.name, "c": region.c, "meta": region.meta}


def run_optimize(cfg: ScenarioConfig, out=None):
    if cfg.kind != "multi_agent":
        raise ValueError("optimize needs a multi_agent scenario")
    out = _out_dir(cfg, out)
    est = cfg.estimator
    t0 = time.perf_counter()
    res = optimize_barriers(cfg.model, cfg.unsafe, est.degrees, est.n_iters, est.d_b, est.sigma1, est.sigma2,
                            est.bisect_tol, est.local_collision)
    summary = {
        "scenario": cfg.name, "zeta": res.zeta, "kappa": res.kappa, "baseline_kappa": res.baseline_kappa,
        "c": res.region.c, "traces": res.traces, "history": res.history,
        "barrier_connectivity_coeffs_s": list(res.barrier_e.coeffs),
        "barrier_collision_coeffs_s": list(res.barrier_c.coeffs), "d_b": est.d_b, "n_iters": est.n_iters,
        "wall_time_s": time.perf_counter() - t0,
    }
    res.region.write_json(out / "region_optimized.json")
    _write_json(out / "optimize.json", summary)
    return summary, res


def region_for(cfg: ScenarioConfig) -> CertifiedRegion:
    if cfg.kind == "multi_agent" and cfg.barrier_mode == "optimize":
        est = cfg.estimator
        return optimize_barriers(cfg.model, cfg.unsafe, est.degrees, est.n_iters, est.d_b, est.sigma1,
                                 est.sigma2, est.bisect_tol, est.local_collision).region
    return certify_fixed(cfg)


# ---------------------------------------------------------------------------
# verify / slice
# ---------------------------------------------------------------------------


def run_verify(cfg: ScenarioConfig, out=None, seed=None) -> dict:
    out = _out_dir(cfg, out)
    region = region_for(cfg)
    region.write_json(out / "region.json")
    rep = containment_check(region, cfg.problem(), cfg.verify.n_samples, cfg.sim.oracle,
                            n_classify=cfg.verify.n_classify, seed=cfg.seed(seed))
    summary = {"scenario": cfg.name, "c": region.c, "certificates_verified": region.verify(),
               "containment": rep.to_dict()}
    v = cfg.verify
    if v.grid_lo is not None and v.grid_hi is not None:
        grid = brute_force_region(cfg.problem(), v.grid_lo, v.grid_hi, v.grid_step, v.grid_dims,
                                  settings=cfg.sim.oracle)
        grid.write_csv(out / "grid.csv")
        certified_in = region.contains(grid.states)
        oracle_in = grid.classification.in_region
        summary["grid"] = {
            "nodes": len(grid.points), "oracle_in": int(oracle_in.sum()), "certified_in": int(certified_in.sum()),
            "certified_in_oracle_out": int((certified_in & ~oracle_in).sum()),
            "coverage_ratio": float(certified_in.sum() / max(oracle_in.sum(), 1)),
        }
    _write_json(out / "verify.json", summary)
    return summary


def _slice_frame(cfg: ScenarioConfig, agent: int | None, dims, fix_at: str):
    q0 = cfg.initial_q()
    base = np.zeros_like(q0) if fix_at == "formation" else q0.copy()
    if cfg.kind == "polynomial_system":
        d = tuple(k - 1 for k in (dims or (1, 2)))
        return d, base, np.zeros(2), tuple(cfg.problem().names[k] for k in d)
    form = cfg.model.formation
    n = form.dim
    i = (agent or 1) - 1
    if not 0 <= i < form.n_agents:
        raise ValueError(f"slice agent must lie in 1..{form.n_agents}")
    # 1..n index positions, n+1..2n velocities of the chosen agent
    a, b = tuple(k - 1 for k in (dims or (1, 2)))
    if not (0 <= a < 2 * n and 0 <= b < 2 * n):
        raise ValueError(f"slice dims must lie in 1..{2 * n}")
    ref = np.concatenate([form.tau[i], form.rho_star])
    names = [f"x{i + 1}_{k + 1}" for k in range(n)] + [f"v{i + 1}_{k + 1}" for k in range(n)]
    return (i * 2 * n + a, i * 2 * n + b), base, ref[[a, b]], (names[a], names[b])


def run_slice(cfg: ScenarioConfig, out=None, agent=None, dims=None, fix_at="formation", region=None) -> dict:
    out = _out_dir(cfg, out)
    region = region or region_for(cfg)
    if not np.isfinite(region.c):
        raise CertificationRefused("cannot slice an unbounded level set", "unbounded")
    d, base, offset, labels = _slice_frame(cfg, agent, dims, fix_at)
    sl = slice_region(region.W, region.c, d, base, offset)
    sl.write_csv(out / "slice.csv", labels)
    problem = cfg.problem()
    checks = []
    for k, pl in enumerate(sl.polylines):
        q = sl.points_q(k)
        excluded = [b.origin for b in problem.excluded_blocks if np.any(b.contains(q))]
        res = classify_batch(problem.simulator, q, cfg.sim.oracle)
        checks.append({"curve": k, "vertices": len(pl.vertices), "closed": pl.closed,
                       "self_intersecting": pl.self_intersects(), "inside_excluded_blocks": excluded,
                       "vertices_in_region": int(res.in_region.sum())})
    summary = {"scenario": cfg.name, "c": region.c, "dims": list(d), "fix_at": fix_at,
               "max_level_error": sl.max_level_error, "curves": checks}
    _write_json(out / "slice.json", summary)
    return summary


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _sweep_one(args):
    raw, overrides = args
    row = dict(overrides)
    try:
        cfg = load_scenario(with_overrides(raw, overrides))
        region = certify_fixed(cfg)
        row.update({"status": "certified", "c": region.c, "binding": region.meta.get("binding", "")})
    except CertificationRefused as exc:
        row.update({"status": f"refused ({exc.status})", "c": "", "binding": ""})
    except ValueError as exc:
        row.update({"status": f"invalid: {exc}", "c": "", "binding": ""})
    return row


def run_sweep(raw: dict, grid: dict, out, jobs: int = 1) -> list[dict]:
    """Certify every combination of the dotted-path parameter lists in ``grid``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid)
    combos = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    tasks = [(raw, c) for c in combos]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys + ["status", "c", "binding"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows
