"""Certification problems: polynomial vector field, candidate W, excluded sets.

Two sources are supported.  A generic polynomial system is stated directly in
``q``.  A multi-agent scenario is turned into one by freezing the topology
seen at the formation (``q = 0``), writing the closed loop in the frame moving
with ``rho_star`` and pulling unsafe sets back through ``x_i = y_i + tau_i``.

Excluded sets come in two groups.  ``unsafe_blocks`` are the user's unsafe
regions.  ``task_blocks`` keep every state of a certified sublevel set in the
frozen switching mode: reference edges stay within the add radius, absent
pairs stay beyond it, and close-range membership does not change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import CoordinationModel, MultiAgentSystem, UnsafeSet, OK, UNSAFE
from .graph import pairwise_distances, update_edge_mask
from .polynomial import PolyEvaluator, Polynomial


@dataclass(frozen=True)
class ExcludedBlock:
    """Points where every polynomial is positive; ``origin`` is for reports."""

    polys: tuple
    origin: str

    def contains(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        inside = np.ones(q.shape[:-1], dtype=bool)
        for w in self.polys:
            inside &= np.asarray(w.evaluate(q)) > 0
        return inside


@dataclass
class CertificationProblem:
    num_vars: int
    vector_field: tuple
    W: Polynomial
    unsafe_blocks: tuple = ()
    task_blocks: tuple = ()
    names: tuple = ()
    simulator: object = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.vector_field) != self.num_vars:
            raise ValueError("vector field length must equal the number of variables")
        for f in self.vector_field:
            if f.num_vars != self.num_vars:
                raise ValueError("vector field component has wrong variable count")
        if not self.names:
            self.names = tuple(f"x{k + 1}" for k in range(self.num_vars))
        if self.simulator is None:
            self.simulator = PolynomialSystem(self)

    @property
    def excluded_blocks(self) -> tuple:
        return tuple(self.unsafe_blocks) + tuple(self.task_blocks)


def build_wdot(W: Polynomial, problem: CertificationProblem, max_degree: int = 64) -> Polynomial:
    """Lie derivative of ``W`` along the problem's vector field."""
    if W.num_vars != problem.num_vars:
        raise ValueError("W and the vector field disagree on variable count")
    out = Polynomial.zero(problem.num_vars)
    for k, f in enumerate(problem.vector_field):
        dk = W.derivative(k)
        if not dk.is_zero():
            out = out + dk * f
    if out.degree > max_degree:
        raise ValueError(f"Lie derivative degree {out.degree} exceeds cap {max_degree}")
    return out


class PolynomialSystem:
    """Batched simulator for a generic ``q' = f(q)``; unsafe sets live in ``q``."""

    def __init__(self, problem: CertificationProblem):
        self.dim = problem.num_vars
        self._f = PolyEvaluator(problem.vector_field)
        self._unsafe = problem.unsafe_blocks

    def initial_context(self, q0):
        return None

    def prepare(self, t, q, ctx):
        return None

    def rhs(self, t, q, ctx):
        return self._f(q)

    def violation_codes(self, t, q, ctx):
        codes = np.full(q.shape[:-1], OK, dtype=int)
        for b in self._unsafe:
            codes = np.where(b.contains(q), UNSAFE, codes)
        return codes

    def convergence_residual(self, t, q):
        return np.linalg.norm(q, axis=-1)


# ---------------------------------------------------------------------------
# Multi-agent scenarios
# ---------------------------------------------------------------------------


def _state_names(N: int, n: int) -> tuple:
    names = []
    for i in range(N):
        names += [f"y{i + 1}_{a + 1}" for a in range(n)]
        names += [f"v{i + 1}_{a + 1}" for a in range(n)]
    return tuple(names)


def reference_masks(model: CoordinationModel):
    """Edge / formation / close-range masks of the graph built at the formation."""
    tau = model.formation.tau
    N = model.n_agents
    edges = update_edge_mask(pairwise_distances(tau), np.zeros((N, N), dtype=bool), model.geometry)
    return (edges,) + tuple(model.masks(tau, edges))


def multi_agent_problem(model: CoordinationModel, unsafe: UnsafeSet | None = None,
                        task_blocks: bool = True) -> CertificationProblem:
    form, geo = model.formation, model.geometry
    N, n = model.n_agents, model.dim
    m = 2 * N * n
    var = [Polynomial.variable(m, k) for k in range(m)]
    y = [[var[i * 2 * n + a] for a in range(n)] for i in range(N)]
    v = [[var[i * 2 * n + n + a] for a in range(n)] for i in range(N)]
    edges, sf, sz, G = reference_masks(model)
    k = model.anchor_gain

    def sq_dist(i, j, offset=None):
        s = Polynomial.zero(m)
        for a in range(n):
            d = y[i][a] - y[j][a]
            if offset is not None:
                d = d + float(offset[a])
            s = s + d * d
        return s

    def in_s(shape, s):
        out = Polynomial.zero(m)
        p = Polynomial.constant(m, 1.0)
        for a in shape:
            if a:
                out = out + p.scale(a)
            p = p * s
        return out

    def grad_factor(shape, s):
        c = [2 * kk * a for kk, a in enumerate(shape.coeffs)][1:]
        return in_s(c, s)

    sqd = {(i, j): sq_dist(i, j) for i in range(N) for j in range(N) if i != j}

    field_ = []
    for i in range(N):
        acc = [Polynomial.zero(m) for _ in range(n)]
        for j in range(N):
            if j == i:
                continue
            gain = Polynomial.constant(m, G[i, j])
            if sf[i, j]:
                gain = gain + grad_factor(model.barrier_e, sqd[i, j])
            if sz[i, j]:
                gain = gain + grad_factor(model.barrier_c, sqd[i, j])
            for a in range(n):
                acc[a] = acc[a] - gain * (y[i][a] - y[j][a]) - (v[i][a] - v[j][a]).scale(G[i, j])
        for a in range(n):
            if k:
                acc[a] = acc[a] - (y[i][a] + v[i][a]).scale(k)
        field_ += list(v[i]) + acc

    W = Polynomial.zero(m)
    for i in range(N):
        for j in range(i + 1, N):
            if sf[i, j]:
                W = W + in_s(model.barrier_e.coeffs, sqd[i, j])
            if sz[i, j]:
                W = W + in_s(model.barrier_c.coeffs, sqd[i, j])
            if G[i, j]:
                W = W + sqd[i, j].scale(0.5 * G[i, j])
        for a in range(n):
            W = W + (v[i][a] * v[i][a]).scale(0.5)
            if k:
                W = W + (y[i][a] * y[i][a]).scale(0.5 * k)

    ublocks = []
    if unsafe is not None:
        for i in range(N):
            A = np.zeros((n, m))
            for a in range(n):
                A[a, i * 2 * n + a] = 1.0
            for bk, block in enumerate(unsafe.blocks):
                polys = tuple(w.substitute_affine(A, form.tau[i]) for w in block)
                ublocks.append(ExcludedBlock(polys, f"unsafe block {bk + 1}, agent {i + 1}"))

    tblocks = []
    if task_blocks:
        ra2 = geo.add_radius**2
        for i in range(N):
            for j in range(i + 1, N):
                d = sq_dist(i, j, form.tau[i] - form.tau[j])
                pair = f"pair ({i + 1},{j + 1})"
                if edges[i, j]:
                    tblocks.append(ExcludedBlock((d - ra2,), f"edge loss, {pair}"))
                    if sz[i, j]:
                        tblocks.append(ExcludedBlock((d - geo.r_z**2,), f"close-range exit, {pair}"))
                        tblocks.append(ExcludedBlock((geo.d_s**2 - d,), f"collision, {pair}"))
                    else:
                        tblocks.append(ExcludedBlock((geo.r_z**2 - d,), f"close-range entry, {pair}"))
                else:
                    tblocks.append(ExcludedBlock((ra2 - d,), f"edge gain, {pair}"))

    return CertificationProblem(
        num_vars=m, vector_field=tuple(field_), W=W, unsafe_blocks=tuple(ublocks),
        task_blocks=tuple(tblocks), names=_state_names(N, n),
        simulator=MultiAgentSystem(model, unsafe), label="multi-agent",
        meta={"reference_edges": [(int(a), int(b)) for a, b in zip(*np.nonzero(np.triu(edges)))],
              "anchor_gain": k, "frame": "moving with rho_star, unsafe sets frozen at t0 = 0"},
    )
