"""Scenario files: JSON documents describing a system to simulate and certify.

Two scenario types are supported.

``multi_agent``
    Agents, formation, geometry, barrier shapes and unsafe blocks in absolute
    position coordinates (polynomials over ``x1..xn``).  Agent indices in
    formation edges are 1-based.

``polynomial_system``
    A vector field and candidate ``W`` stated directly over ``x1..xm``, with
    unsafe blocks in the same variables.

Every validation runs at load time; failures raise :class:`ScenarioError`
naming the field path or the violated assumption.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (
    BarrierShape,
    ConfigurationError,
    CoordinationModel,
    Formation,
    UnsafeSet,
    barrier_intervals,
    mu_max,
    states_to_q,
    validate_barrier_numeric,
)
from .graph import Geometry, WeightedGraph, initial_graph, is_connected
from .oracle import OracleSettings
from .polynomial import Polynomial
from .region.certify import Degrees
from .system import CertificationProblem, ExcludedBlock, multi_agent_problem

log = logging.getLogger(__name__)

MU_CHECK_MODES = ("printed", "initial_energy", "off")


class ScenarioError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class EstimatorSettings:
    sigma1: float = 1.0
    sigma2: float = 1.0
    s_degree: int | None = None
    r_degree: int | None = None
    t_degree: int | None = None
    bisect_tol: float = 1e-4
    n_iters: int = 5
    d_b: int = 2
    inline_unsafe_terms: bool = False
    exclusion: bool = True
    task_blocks: bool = True
    local_collision: bool = False

    @property
    def degrees(self) -> Degrees:
        return Degrees(self.s_degree, self.r_degree, self.t_degree)


@dataclass(frozen=True)
class SimSettings:
    dt: float = 1e-3
    horizon: float = 30.0
    record_every: int = 10
    oracle: OracleSettings = OracleSettings()


@dataclass(frozen=True)
class VerifySettings:
    n_samples: int = 100_000
    n_classify: int | None = None
    grid_lo: float | None = None
    grid_hi: float | None = None
    grid_step: float = 0.05
    grid_dims: tuple | None = None


@dataclass
class ScenarioConfig:
    name: str
    kind: str
    raw: dict
    estimator: EstimatorSettings
    sim: SimSettings
    verify: VerifySettings
    outputs: str
    # multi-agent fields
    model: CoordinationModel | None = None
    x0: np.ndarray | None = None
    rho0: np.ndarray | None = None
    unsafe: UnsafeSet | None = None
    barrier_mode: str = "fixed"
    mu_check: str = "printed"
    mu_bound: float | None = None
    notes: list = field(default_factory=list)
    # polynomial-system fields
    base_problem: CertificationProblem | None = None
    q0: np.ndarray | None = None

    @property
    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def seed(self, override: int | None = None) -> int:
        if override is not None:
            return int(override)
        return int(self.digest[:16], 16)

    def problem(self, model: CoordinationModel | None = None) -> CertificationProblem:
        if self.kind == "polynomial_system":
            return self.base_problem
        p = multi_agent_problem(model or self.model, self.unsafe, task_blocks=self.estimator.task_blocks)
        p.label = self.name
        return p

    def initial_q(self) -> np.ndarray:
        if self.kind == "polynomial_system":
            return self.q0
        return states_to_q(self.x0, self.rho0, self.model.formation)


# ---------------------------------------------------------------------------
# Field access helpers
# ---------------------------------------------------------------------------


def _get(d: dict, key: str, path: str, kind=None, default=...):
    if key not in d or d[key] is None:
        if default is ...:
            raise ScenarioError(f"{path}.{key}" if path else key, "required field missing")
        return default
    v = d[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ScenarioError(f"{path}.{key}", f"expected a number, got {v!r}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ScenarioError(f"{path}.{key}", f"expected an integer, got {v!r}")
        return v
    if kind is bool and not isinstance(v, bool):
        raise ScenarioError(f"{path}.{key}", f"expected true/false, got {v!r}")
    if kind is str and not isinstance(v, str):
        raise ScenarioError(f"{path}.{key}", f"expected a string, got {v!r}")
    if kind is dict and not isinstance(v, dict):
        raise ScenarioError(f"{path}.{key}", "expected an object")
    if kind is list and not isinstance(v, list):
        raise ScenarioError(f"{path}.{key}", "expected a list")
    return v


def _array(v, path: str, shape=None) -> np.ndarray:
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(path, f"expected numeric array ({exc})") from None
    if shape is not None:
        want = tuple(s if s is not None else a.shape[k] for k, s in enumerate(shape)) if a.ndim == len(shape) else shape
        if a.shape != want:
            raise ScenarioError(path, f"expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ScenarioError(path, "non-finite entries")
    return a


def _poly(text, num_vars: int, path: str) -> Polynomial:
    if not isinstance(text, str):
        raise ScenarioError(path, "expected a polynomial string")
    try:
        return Polynomial.parse(text, num_vars)
    except ValueError as exc:
        raise ScenarioError(path, str(exc)) from None


def _blocks(raw, num_vars: int, path: str) -> list[list[Polynomial]]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise ScenarioError(path, "expected a list of blocks")
    out = []
    for b, block in enumerate(raw):
        if not isinstance(block, list) or not block:
            raise ScenarioError(f"{path}[{b}]", "a block is a non-empty list of polynomial strings")
        out.append([_poly(s, num_vars, f"{path}[{b}][{k}]") for k, s in enumerate(block)])
    return out


def _estimator(raw: dict) -> EstimatorSettings:
    e = _get(raw, "estimator", "", dict, {})
    known = set(EstimatorSettings.__dataclass_fields__)
    for k in e:
        if k not in known:
            raise ScenarioError(f"estimator.{k}", "unknown field")
    kw = {}
    for k in ("sigma1", "sigma2", "bisect_tol"):
        if k in e:
            kw[k] = _get(e, k, "estimator", float)
    for k in ("s_degree", "r_degree", "t_degree", "n_iters", "d_b"):
        if k in e and e[k] is not None:
            kw[k] = _get(e, k, "estimator", int)
            if kw[k] < 0:
                raise ScenarioError(f"estimator.{k}", "must be non-negative")
    for k in ("inline_unsafe_terms", "exclusion", "task_blocks", "local_collision"):
        if k in e:
            kw[k] = _get(e, k, "estimator", bool)
    s = EstimatorSettings(**kw)
    if s.sigma1 <= 0 or s.sigma2 <= 0:
        raise ScenarioError("estimator.sigma1", "sigma1 and sigma2 must be positive")
    if not 0 < s.bisect_tol < 1:
        raise ScenarioError("estimator.bisect_tol", "must lie in (0, 1)")
    if s.d_b < 2 or s.d_b % 2:
        raise ScenarioError("estimator.d_b", "must be an even integer >= 2")
    return s


def _sim(raw: dict) -> SimSettings:
    s = _get(raw, "sim", "", dict, {})
    dt = _get(s, "dt", "sim", float, 1e-3)
    horizon = _get(s, "horizon", "sim", float, 30.0)
    rec = _get(s, "record_every", "sim", int, 10)
    orc = OracleSettings(
        horizon=_get(s, "oracle_horizon", "sim", float, 50.0),
        dt=_get(s, "oracle_dt", "sim", float, 1e-2),
        tol_conv=_get(s, "tol_conv", "sim", float, 1e-2),
    )
    if dt <= 0 or horizon <= 0 or rec < 1 or orc.dt <= 0 or orc.horizon <= 0 or orc.tol_conv <= 0:
        raise ScenarioError("sim", "dt, horizon, record_every and oracle settings must be positive")
    return SimSettings(dt, horizon, rec, orc)


def _verify(raw: dict) -> VerifySettings:
    v = _get(raw, "verify", "", dict, {})
    dims = v.get("grid_dims")
    out = VerifySettings(
        n_samples=_get(v, "n_samples", "verify", int, 100_000),
        n_classify=_get(v, "n_classify", "verify", int, None),
        grid_lo=_get(v, "grid_lo", "verify", float, None),
        grid_hi=_get(v, "grid_hi", "verify", float, None),
        grid_step=_get(v, "grid_step", "verify", float, 0.05),
        grid_dims=None if dims is None else tuple(int(d) for d in dims),
    )
    if out.n_samples < 1 or out.grid_step <= 0:
        raise ScenarioError("verify", "n_samples and grid_step must be positive")
    return out


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def _barrier(spec, kind: str, mu: float, iv, path: str) -> BarrierShape:
    if spec is None or spec == "quartic":
        if kind == "connectivity":
            return BarrierShape.connectivity_quartic(mu, iv.r_hat_s)
        return BarrierShape.collision_quartic(mu, iv.d_hat_s, iv.r_tilde)
    if isinstance(spec, dict) and "coeffs_s" in spec:
        return BarrierShape(kind, tuple(_array(spec["coeffs_s"], f"{path}.coeffs_s").reshape(-1)), mu)
    if isinstance(spec, dict) and "poly_z" in spec:
        return BarrierShape.from_polynomial(kind, _poly(spec["poly_z"], 1, f"{path}.poly_z"), mu)
    raise ScenarioError(path, "expected \"quartic\", {\"coeffs_s\": [...]} or {\"poly_z\": \"...\"}")


def _load_multi_agent(raw: dict, cfg: dict) -> ScenarioConfig:
    n = _get(raw, "n", "", int)
    form_raw = _get(raw, "formation", "", dict)
    tau = _array(_get(form_raw, "tau", "formation"), "formation.tau")
    if tau.ndim != 2 or tau.shape[1] != n:
        raise ScenarioError("formation.tau", f"expected an N x {n} array")
    N = tau.shape[0]
    rho_star = _array(_get(form_raw, "rho_star", "formation"), "formation.rho_star", (n,))
    edges = []
    for k, e in enumerate(_get(form_raw, "edges", "formation", list, [])):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(a, int) for a in e)):
            raise ScenarioError(f"formation.edges[{k}]", "expected a pair of 1-based agent indices")
        if not all(1 <= a <= N for a in e) or e[0] == e[1]:
            raise ScenarioError(f"formation.edges[{k}]", f"indices must be distinct and in 1..{N}")
        edges.append((e[0] - 1, e[1] - 1))
    formation = Formation(tau, rho_star, edges)

    g = _get(raw, "geometry", "", dict)
    try:
        geo = Geometry(*(_get(g, k, "geometry", float) for k in ("r_a", "r_c", "r_z", "r_s", "eps", "d_s")))
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError("geometry", str(exc)) from None
    notes = []
    try:
        notes += formation.check_assumptions(geo)
    except ConfigurationError as exc:
        raise ScenarioError("formation", str(exc)) from None

    agents = _get(raw, "agents", "", dict)
    x0 = _array(_get(agents, "x0", "agents"), "agents.x0", (N, n))
    rho0 = _array(_get(agents, "rho0", "agents"), "agents.rho0", (N, n))
    weights = raw.get("weights")
    base = None if weights is None else _array(weights, "weights", (N, N))
    anchor = _get(raw, "anchor_gain", "", float, 0.0)
    if anchor < 0:
        raise ScenarioError("anchor_gain", "must be non-negative")

    b = _get(raw, "barriers", "", dict)
    mode = _get(b, "mode", "barriers", str, "fixed")
    if mode not in ("fixed", "optimize"):
        raise ScenarioError("barriers.mode", "expected \"fixed\" or \"optimize\"")
    mu1 = _get(b, "mu1", "barriers", float)
    mu2 = _get(b, "mu2", "barriers", float)
    if mu1 <= 0 or mu2 <= 0:
        raise ScenarioError("barriers", "mu1 and mu2 must be positive")
    try:
        iv = barrier_intervals(geo, formation, _get(b, "r_tilde", "barriers", float, None))
    except ConfigurationError as exc:
        raise ScenarioError("barriers", str(exc)) from None
    be = _barrier(b.get("connectivity"), "connectivity", mu1, iv, "barriers.connectivity")
    bc = _barrier(b.get("collision"), "collision", mu2, iv, "barriers.collision")
    t_f = formation.max_formation_tau()
    for shape, name in ((be, "connectivity"), (bc, "collision")):
        chk = validate_barrier_numeric(shape, geo, t_f, iv.z_max)
        if not chk:
            raise ScenarioError(f"barriers.{name}", f"invalid barrier: {chk.reason} at z = {chk.witness}")
    try:
        model = CoordinationModel(formation, geo, be, bc, base, anchor)
    except ValueError as exc:
        raise ScenarioError("weights", str(exc)) from None

    G0 = initial_graph(x0, geo, model.base_weights)
    if N > 1 and not is_connected(G0):
        raise ScenarioError("agents.x0", "initial communication graph is not connected")
    missing = [(a + 1, c + 1) for a, c in sorted(formation.edges) if not G0.has_edge(a, c)]
    if missing:
        raise ScenarioError("agents.x0", f"Assumption 2 violated: formation edges {missing} absent at t0")

    check = _get(b, "mu_check", "barriers", str, "printed")
    if check not in MU_CHECK_MODES:
        raise ScenarioError("barriers.mu_check", f"expected one of {MU_CHECK_MODES}")
    bound = None
    if check == "printed":
        bound = mu_max(x0, rho0, G0, model)
        label = "energy bound (mu > mu_max)"
    elif check == "initial_energy":
        sf, sz, Gm = model.masks(x0, G0.weights > 0)
        bound = float(model.lyapunov(0.0, x0[None], rho0[None], sf[None], sz[None], Gm[None])[0])
        label = "initial-energy bound (mu > W(0))"
    if bound is not None:
        for nm, mu in (("mu1", mu1), ("mu2", mu2)):
            if not mu > bound:
                raise ScenarioError(f"barriers.{nm}", f"{label} violated: {nm} = {mu:g} <= {bound:.6g}")
    else:
        notes.append("mu check disabled")

    unsafe_raw = _blocks(raw.get("unsafe"), n, "unsafe")
    unsafe = UnsafeSet(tuple(tuple(b_) for b_ in unsafe_raw)) if unsafe_raw else None
    if unsafe is not None:
        inside, first = unsafe.membership(x0)
        if inside.any():
            i = int(np.nonzero(inside)[0][0])
            notes.append(f"agent {i + 1} starts inside unsafe block {int(first[i]) + 1}")

    return ScenarioConfig(
        name=cfg["name"], kind="multi_agent", raw=raw, estimator=cfg["estimator"], sim=cfg["sim"],
        verify=cfg["verify"], outputs=cfg["outputs"], model=model, x0=x0, rho0=rho0, unsafe=unsafe,
        barrier_mode=mode, mu_check=check, mu_bound=bound, notes=notes,
    )


def _load_polynomial(raw: dict, cfg: dict) -> ScenarioConfig:
    m = _get(raw, "num_vars", "", int)
    if m < 1:
        raise ScenarioError("num_vars", "must be positive")
    field_raw = _get(raw, "vector_field", "", list)
    if len(field_raw) != m:
        raise ScenarioError("vector_field", f"expected {m} components")
    f = tuple(_poly(s, m, f"vector_field[{k}]") for k, s in enumerate(field_raw))
    W = _poly(_get(raw, "W", "", str), m, "W")
    blocks = _blocks(raw.get("unsafe"), m, "unsafe")
    names = tuple(raw.get("names") or ())
    if names and len(names) != m:
        raise ScenarioError("names", f"expected {m} names")
    problem = CertificationProblem(
        m, f, W, tuple(ExcludedBlock(tuple(b), f"unsafe block {k + 1}") for k, b in enumerate(blocks)),
        names=names, label=cfg["name"],
    )
    q0 = _array(raw.get("q0", [0.0] * m), "q0", (m,))
    return ScenarioConfig(
        name=cfg["name"], kind="polynomial_system", raw=raw, estimator=cfg["estimator"], sim=cfg["sim"],
        verify=cfg["verify"], outputs=cfg["outputs"], base_problem=problem, q0=q0,
    )


def load_scenario(raw: dict) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ScenarioError("", "scenario must be a JSON object")
    raw = copy.deepcopy(raw)
    kind = _get(raw, "type", "", str)
    cfg = {
        "name": _get(raw, "name", "", str, "scenario"),
        "estimator": _estimator(raw),
        "sim": _sim(raw),
        "verify": _verify(raw),
        "outputs": _get(raw, "outputs", "", str, "out"),
    }
    if kind == "multi_agent":
        return _load_multi_agent(raw, cfg)
    if kind == "polynomial_system":
        return _load_polynomial(raw, cfg)
    raise ScenarioError("type", "expected \"multi_agent\" or \"polynomial_system\"")


def parse_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError("", f"{path}: malformed JSON ({exc})") from None
    return load_scenario(raw)


def with_overrides(raw: dict, overrides: dict) -> dict:
    """Copy of ``raw`` with dotted-path overrides applied (used by sweeps)."""
    out = copy.deepcopy(raw)
    for key, value in overrides.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out
