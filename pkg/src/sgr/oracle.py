"""Simulation ground truth, independent of any certificate.

Initial states are classified by forward simulation: a run is ``in_region``
when no monitor fires over the horizon and the convergence residual ends
below ``tol_conv`` with a non-increasing tail.  Classification is batched so
that sample and grid checks integrate thousands of initial states at once.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import COLLISION, DISCONNECT, DIVERGENCE_GUARD, OK, UNSAFE, Trajectory, rk4_step
from .polynomial import PolyEvaluator
from .system import CertificationProblem, build_wdot

log = logging.getLogger(__name__)

KINDS = {COLLISION: "collision", DISCONNECT: "disconnect", UNSAFE: "unsafe"}
NO_CONVERGENCE, DIVERGENCE = 10, 11
KINDS.update({NO_CONVERGENCE: "no_convergence", DIVERGENCE: "divergence"})


@dataclass(frozen=True)
class OracleSettings:
    horizon: float = 50.0
    dt: float = 1e-2
    tol_conv: float = 1e-2
    tail_fraction: float = 0.1


@dataclass(frozen=True)
class ClassificationResult:
    verdict: str
    violation_kind: str | None = None
    first_violation_time: float | None = None

    @property
    def in_region(self) -> bool:
        return self.verdict == "in_region"


@dataclass
class BatchClassification:
    codes: np.ndarray  # 0 = in_region, otherwise a violation code
    times: np.ndarray  # first violation time (nan if none)

    def __len__(self):
        return len(self.codes)

    @property
    def in_region(self) -> np.ndarray:
        return self.codes == OK

    def result(self, k: int) -> ClassificationResult:
        c = int(self.codes[k])
        if c == OK:
            return ClassificationResult("in_region")
        t = float(self.times[k])
        return ClassificationResult("violation", KINDS[c], None if np.isnan(t) else t)


def classify_batch(system, q0, settings: OracleSettings = OracleSettings()) -> BatchClassification:
    q = np.array(q0, dtype=float, ndmin=2)
    B = q.shape[0]
    n_steps = int(round(settings.horizon / settings.dt))
    codes = np.zeros(B, dtype=int)
    times = np.full(B, np.nan)
    tail = max(1, int(round(settings.tail_fraction * n_steps)))
    prev_max = np.zeros(B)
    last_max = np.zeros(B)
    ctx = system.initial_context(q)
    dt = settings.dt
    for k in range(n_steps + 1):
        t = k * dt
        ctx = system.prepare(t, q, ctx)
        v = system.violation_codes(t, q, ctx)
        new = (codes == OK) & (v != OK)
        codes[new] = v[new]
        times[new] = t
        if k >= n_steps - 2 * tail:
            r = system.convergence_residual(t, q)
            if k < n_steps - tail:
                prev_max = np.maximum(prev_max, r)
            else:
                last_max = np.maximum(last_max, r)
        if k == n_steps:
            break
        q = rk4_step(system, t, q, ctx, dt)
        bad = ~np.all(np.isfinite(q), axis=-1) | (np.abs(q).max(axis=-1) > DIVERGENCE_GUARD)
        if bad.any():
            fresh = bad & (codes == OK)
            codes[fresh] = DIVERGENCE
            times[fresh] = t + dt
            q[bad] = 0.0
    final = system.convergence_residual(n_steps * dt, q)
    conv_fail = (codes == OK) & ((final >= settings.tol_conv) | (last_max > prev_max + 1e-12))
    codes[conv_fail] = NO_CONVERGENCE
    return BatchClassification(codes, times)


def classify_initial_state(q0, problem: CertificationProblem,
                           settings: OracleSettings = OracleSettings()) -> ClassificationResult:
    return classify_batch(problem.simulator, np.asarray(q0, float)[None], settings).result(0)


# ---------------------------------------------------------------------------
# Containment sampling
# ---------------------------------------------------------------------------


def scenario_seed(*parts) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def quadratic_part(W) -> np.ndarray:
    m = W.num_vars
    Q = np.zeros((m, m))
    for mono, coef in W.items():
        if sum(mono) != 2:
            continue
        idx = [k for k, e in enumerate(mono) for _ in range(e)]
        i, j = idx
        Q[i, j] += coef / (1 if i == j else 2)
        if i != j:
            Q[j, i] += coef / 2
    return Q


def sampling_box(W, c: float, rng: np.random.Generator, inflate: float = 1.5, face_samples: int = 2000,
                 max_grow: int = 20) -> np.ndarray:
    """Half-widths of a box around 0 containing ``{W <= c}`` (checked on the faces)."""
    m = W.num_vars
    Q = quadratic_part(W)
    try:
        half = np.sqrt(np.maximum(c * np.diag(np.linalg.inv(Q)), 0.0)) * inflate
    except np.linalg.LinAlgError:
        half = np.ones(m)
    half = np.where(half > 0, half, 1.0)
    evalW = PolyEvaluator([W])
    for _ in range(max_grow):
        pts = rng.uniform(-1, 1, size=(face_samples, m))
        face = rng.integers(0, m, size=face_samples)
        pts[np.arange(face_samples), face] = np.sign(rng.uniform(-1, 1, face_samples))
        if not np.any(evalW(pts * half)[:, 0] <= c):
            return half
        half = half * 1.5
    log.warning("sampling box did not clear the level set after %d enlargements", max_grow)
    return half


@dataclass
class ContainmentReport:
    n_samples: int
    sampling: str
    box: list
    static_failures: list = field(default_factory=list)
    dynamic_failures: list = field(default_factory=list)
    n_classified: int = 0

    @property
    def n_failures(self) -> int:
        return len(self.static_failures) + len(self.dynamic_failures)

    @property
    def ok(self) -> bool:
        return self.n_failures == 0

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "n_classified": self.n_classified, "sampling": self.sampling,
                "box_half_widths": self.box, "n_failures": self.n_failures,
                "static_failures": self.static_failures[:50], "dynamic_failures": self.dynamic_failures[:50]}


def ellipsoid_proposal(W, c: float, rng: np.random.Generator, margin: float = 1.05, boundary_samples: int = 20_000,
                       max_grow: int = 60):
    """Factor ``L`` with ``{W <= c}`` inside ``{L u : |u| <= 1}`` (checked on the boundary).

    Built from the quadratic part of ``W``; ``None`` when that part is not
    positive definite or the boundary never clears the level set.
    """
    Q = quadratic_part(W)
    try:
        L = np.linalg.cholesky(np.linalg.inv(Q))
    except np.linalg.LinAlgError:
        return None
    evalW = PolyEvaluator([W])
    # smallest scale (in steps of 10 %) whose boundary clears the level set, plus a margin;
    # the acceptance rate decays like scale**-m, so a loose fixed inflation is costly in high dimension
    scale = np.sqrt(c)
    for _ in range(max_grow):
        u = rng.normal(size=(boundary_samples, W.num_vars))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        if not np.any(evalW(scale * u @ L.T)[:, 0] <= c):
            return margin * scale * L
        scale *= 1.1
    return None


def _uniform_ball(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    u = rng.normal(size=(n, m))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * rng.uniform(0, 1, (n, 1)) ** (1.0 / m)


def sample_sublevel(W, c: float, n: int, rng: np.random.Generator, max_draw_factor: int = 2000):
    """Uniform samples of ``{W <= c}`` by rejection from an enclosing ellipsoid or box.

    Falls back to star-shaped radial sampling when the acceptance rate would
    exhaust ``n * max_draw_factor`` draws.  Returns the samples, the mode and
    the half-widths of the enclosing box.
    """
    evalW = PolyEvaluator([W])
    m = W.num_vars
    L = ellipsoid_proposal(W, c, rng)
    if L is not None:
        half = np.sqrt(np.sum(L**2, axis=1))
        draw = lambda k: _uniform_ball(rng, k, m) @ L.T  # noqa: E731
    else:
        half = sampling_box(W, c, rng)
        draw = lambda k: rng.uniform(-1, 1, size=(k, m)) * half  # noqa: E731
    got = []
    count = 0
    drawn = 0
    batch = max(4 * n, 10_000)
    budget = n * max_draw_factor
    while count < n and drawn < budget:
        pts = draw(batch)
        drawn += batch
        keep = pts[evalW(pts)[:, 0] <= c]
        got.append(keep)
        count += len(keep)
        if count < n and count / drawn * budget < n:
            break
    if count >= n:
        return np.vstack(got)[:n], "rejection", half
    # radial sampling: the set is assumed star-shaped about the origin
    u = rng.normal(size=(n, m))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    lo = np.zeros(n)
    hi = np.full(n, float(np.linalg.norm(half)))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        inside = evalW(u * mid[:, None])[:, 0] <= c
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    radius = lo * rng.uniform(0, 1, n) ** (1.0 / m)
    return u * radius[:, None], "radial", half


def containment_check(region, problem: CertificationProblem | None = None, n_samples: int = 100_000,
                      settings: OracleSettings = OracleSettings(), n_classify: int | None = None,
                      seed: int | None = None, c_override: float | None = None,
                      wdot_tol: float = 1e-6) -> ContainmentReport:
    """Sample ``{W <= c}``; every point must pass the static checks and classify in region.

    Static checks hold on every sample: ``Wdot <= wdot_tol`` and outside every
    excluded block.  Forward classification runs on the first ``n_classify``
    samples (all by default).
    """
    problem = problem or region.problem
    c = region.c if c_override is None else c_override
    W = region.W
    if seed is None:
        seed = scenario_seed(W.to_string(), c, problem.label)
    rng = np.random.default_rng(seed)
    pts, mode, half = sample_sublevel(W, c, n_samples, rng)
    report = ContainmentReport(len(pts), mode, half.tolist())
    wdot = PolyEvaluator([build_wdot(W, problem)])(pts)[:, 0]
    for k in np.nonzero(wdot > wdot_tol)[0][:100]:
        report.static_failures.append({"q": pts[k].tolist(), "reason": "Wdot > 0", "value": float(wdot[k])})
    for block in problem.excluded_blocks:
        inside = block.contains(pts)
        for k in np.nonzero(inside)[0][:100]:
            report.static_failures.append({"q": pts[k].tolist(), "reason": f"inside {block.origin}"})
    nc = len(pts) if n_classify is None else min(n_classify, len(pts))
    if nc:
        res = classify_batch(problem.simulator, pts[:nc], settings)
        report.n_classified = nc
        for k in np.nonzero(~res.in_region)[0][:100]:
            r = res.result(int(k))
            report.dynamic_failures.append({"q": pts[k].tolist(), "kind": r.violation_kind,
                                            "t": r.first_violation_time})
    return report


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass
class GridResult:
    dims: tuple
    axes: list
    points: np.ndarray  # (K, len(dims)) grid coordinates
    states: np.ndarray  # (K, m) full initial states
    classification: BatchClassification

    @property
    def mask(self) -> np.ndarray:
        return self.classification.in_region.reshape([len(a) for a in self.axes])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"dim{k + 1}" for k in range(len(self.dims))] + ["verdict", "violation_kind", "t_violation"])
            for k in range(len(self.points)):
                r = self.classification.result(k)
                t = "" if r.first_violation_time is None else f"{r.first_violation_time:.6f}"
                w.writerow([f"{v:.10g}" for v in self.points[k]] + [r.verdict, r.violation_kind or "", t])


def brute_force_region(problem: CertificationProblem, lo, hi, step: float, dims=None, base=None,
                       settings: OracleSettings = OracleSettings(), max_nodes: int = 2_000_000) -> GridResult:
    """Classify every node of a regular grid over ``dims`` (others fixed at ``base``)."""
    m = problem.num_vars
    if m > 4 and dims is None:
        raise ValueError("brute-force grids are limited to state dimension <= 4 unless dims are given")
    dims = tuple(range(m)) if dims is None else tuple(dims)
    lo = np.broadcast_to(np.asarray(lo, float), (len(dims),))
    hi = np.broadcast_to(np.asarray(hi, float), (len(dims),))
    axes = [np.round(np.arange(a, b + step / 2, step), 12) for a, b in zip(lo, hi)]
    n_nodes = int(np.prod([len(a) for a in axes]))
    if n_nodes > max_nodes:
        raise ValueError(f"grid has {n_nodes} nodes (limit {max_nodes})")
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(dims))
    states = np.zeros((len(mesh), m)) if base is None else np.tile(np.asarray(base, float), (len(mesh), 1))
    states[:, list(dims)] = mesh
    res = classify_batch(problem.simulator, states, settings)
    return GridResult(dims, axes, mesh, states, res)


def wdot_consistency(traj: Trajectory) -> float:
    """Max |central difference of W - recorded Wdot| over steps with a constant mode."""
    if len(traj) < 3:
        return 0.0
    dt = np.diff(traj.t)
    same = (traj.mode[:-2] == traj.mode[1:-1]) & (traj.mode[1:-1] == traj.mode[2:])
    fd = (traj.W[2:] - traj.W[:-2]) / (dt[1:] + dt[:-1])
    dev = np.abs(fd - traj.Wdot[1:-1])[same]
    return float(dev.max()) if dev.size else 0.0
