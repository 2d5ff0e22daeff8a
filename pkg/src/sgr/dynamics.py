"""Double-integrator agents under the distributed barrier controller.

State conventions
-----------------
Positions ``x`` and velocities ``rho`` are arrays of shape ``(..., N, n)``.
The transformed state stacks, per agent, ``y_i = x_i - tau_i`` followed by
``varrho_i = rho_i - rho_star``; ``q`` therefore has ``2*N*n`` entries ordered
``(y_1, varrho_1, y_2, varrho_2, ...)``.

Barrier shapes are even polynomials in the pair distance ``z = ||y_ij||`` and
are stored by their coefficients in ``s = z**2`` so that the controller's
gradient ``(dUpsilon/dz)/z * y_ij`` stays polynomial.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import Geometry, WeightedGraph, laplacian, pairwise_distances, update_edge_mask
from .polynomial import Polynomial

log = logging.getLogger(__name__)

DIVERGENCE_GUARD = 1e8


class ConfigurationError(ValueError):
    """A scenario violates one of the model's standing assumptions."""


class SimulationDivergence(RuntimeError):
    def __init__(self, step: int, t: float):
        super().__init__(f"state norm exceeded {DIVERGENCE_GUARD:g} at step {step} (t={t:.4g})")
        self.step = step
        self.t = t


# ---------------------------------------------------------------------------
# Formation and coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Formation:
    tau: np.ndarray
    rho_star: np.ndarray
    edges: frozenset

    def __post_init__(self):
        tau = np.atleast_2d(np.asarray(self.tau, dtype=float))
        rho_star = np.asarray(self.rho_star, dtype=float).reshape(-1)
        if rho_star.shape[0] != tau.shape[1]:
            raise ValueError("rho_star dimension does not match tau")
        edges = frozenset(tuple(sorted((int(a), int(b)))) for a, b in self.edges)
        for a, b in edges:
            if a == b or not (0 <= a < tau.shape[0] and 0 <= b < tau.shape[0]):
                raise ValueError(f"bad formation edge {(a, b)}")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "rho_star", rho_star)
        object.__setattr__(self, "edges", edges)

    @property
    def n_agents(self) -> int:
        return self.tau.shape[0]

    @property
    def dim(self) -> int:
        return self.tau.shape[1]

    def tau_norm(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.tau[i] - self.tau[j]))

    def edge_mask(self) -> np.ndarray:
        m = np.zeros((self.n_agents, self.n_agents), dtype=bool)
        for a, b in self.edges:
            m[a, b] = m[b, a] = True
        return m

    def max_formation_tau(self) -> float:
        return max((self.tau_norm(a, b) for a, b in self.edges), default=0.0)

    def max_pair_tau(self) -> float:
        N = self.n_agents
        return max((self.tau_norm(a, b) for a in range(N) for b in range(a + 1, N)), default=0.0)

    def check_assumptions(self, geo: Geometry) -> list[str]:
        """Raise on Assumption 1 or formation-pair Assumption 3; return warnings."""
        notes = []
        for a, b in sorted(self.edges):
            t = self.tau_norm(a, b)
            if not geo.r_z <= t <= geo.add_radius:
                raise ConfigurationError(
                    f"Assumption 1 violated for formation edge {(a, b)}: "
                    f"need r_z <= ||tau_ij|| <= r_s - eps, got {t:.4g}"
                )
            if not geo.r_s - t > geo.d_s + t:
                raise ConfigurationError(
                    f"Assumption 3 violated for formation edge {(a, b)}: "
                    f"r_s - ||tau_ij|| = {geo.r_s - t:.4g} <= d_s + ||tau_ij|| = {geo.d_s + t:.4g}"
                )
        N = self.n_agents
        for a in range(N):
            for b in range(a + 1, N):
                if (a, b) in self.edges:
                    continue
                t = self.tau_norm(a, b)
                if not geo.r_s - t > geo.d_s + t:
                    notes.append(f"Assumption 3 does not hold for non-formation pair {(a, b)}")
        for msg in notes:
            warnings.warn(msg, stacklevel=2)
        return notes


@dataclass(frozen=True)
class TransformedState:
    y: np.ndarray
    varrho: np.ndarray

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.y, self.varrho], axis=-1).reshape(
            self.y.shape[:-2] + (-1,)
        )


def transform(x, rho, formation: Formation) -> TransformedState:
    x = np.asarray(x, dtype=float)
    rho = np.asarray(rho, dtype=float)
    return TransformedState(x - formation.tau, rho - formation.rho_star)


def q_to_states(q, formation: Formation) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`transform` (accepts batches of ``q``)."""
    q = np.asarray(q, dtype=float)
    N, n = formation.n_agents, formation.dim
    blocks = q.reshape(q.shape[:-1] + (N, 2 * n))
    return blocks[..., :n] + formation.tau, blocks[..., n:] + formation.rho_star


def states_to_q(x, rho, formation: Formation) -> np.ndarray:
    return transform(x, rho, formation).q


# ---------------------------------------------------------------------------
# Barrier shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BarrierShape:
    """``Upsilon(z) = sum_k coeffs[k] * z**(2k)`` with boundary value ``mu``."""

    kind: str
    coeffs: tuple[float, ...]
    mu: float

    def __post_init__(self):
        if self.kind not in ("connectivity", "collision"):
            raise ValueError(f"unknown barrier kind {self.kind!r}")
        c = tuple(float(a) for a in self.coeffs)
        while len(c) > 1 and c[-1] == 0.0:
            c = c[:-1]
        object.__setattr__(self, "coeffs", c or (0.0,))

    @classmethod
    def from_polynomial(cls, kind: str, poly: Polynomial, mu: float) -> BarrierShape:
        if poly.num_vars != 1:
            raise ValueError("barrier polynomial must be univariate in z")
        coeffs = [0.0] * (poly.degree // 2 + 1)
        for (e,), c in poly.items():
            if e % 2:
                raise ValueError("barrier polynomial must contain even powers of z only")
            coeffs[e // 2] = c
        return cls(kind, tuple(coeffs), mu)

    @classmethod
    def connectivity_quartic(cls, mu1: float, r_hat_s: float) -> BarrierShape:
        """``c1 * z**4`` with ``c1 = mu1 / r_hat_s**4``."""
        return cls("connectivity", (0.0, 0.0, mu1 / r_hat_s**4), mu1)

    @classmethod
    def collision_quartic(cls, mu2: float, d_hat_s: float, r_tilde: float) -> BarrierShape:
        """``c2 * (z**2 - r_tilde**2)**2`` with ``c2 = mu2 / (d_hat_s**2 - r_tilde**2)**2``."""
        c2 = mu2 / (d_hat_s**2 - r_tilde**2) ** 2
        return cls("collision", (c2 * r_tilde**4, -2 * c2 * r_tilde**2, c2), mu2)

    @property
    def degree(self) -> int:
        return 2 * (len(self.coeffs) - 1)

    def polynomial(self) -> Polynomial:
        return Polynomial(1, {(2 * k,): a for k, a in enumerate(self.coeffs)})

    def value_sq(self, s):
        """Barrier value as a function of ``s = z**2``."""
        return np.polynomial.polynomial.polyval(s, self.coeffs)

    def value(self, z):
        return self.value_sq(np.asarray(z, dtype=float) ** 2)

    def derivative(self, z):
        z = np.asarray(z, dtype=float)
        return z * self.grad_factor_sq(z**2)

    def grad_factor_sq(self, s):
        """``(dUpsilon/dz) / z`` as a function of ``s = z**2``."""
        c = [2 * k * a for k, a in enumerate(self.coeffs)][1:] or [0.0]
        return np.polynomial.polynomial.polyval(s, c)


@dataclass(frozen=True)
class BarrierIntervals:
    """Interval endpoints shared by all pairs (worst case over formation pairs)."""

    r_hat_s: float
    d_hat_s: float
    z_max: float
    r_tilde: float


def barrier_intervals(geo: Geometry, formation: Formation, r_tilde: float | None = None) -> BarrierIntervals:
    t = formation.max_formation_tau()
    r_hat = geo.r_s - t
    if r_hat <= 0:
        raise ConfigurationError(f"r_hat_s = r_s - ||tau_ij|| = {r_hat:.4g} is not positive")
    z_max = geo.r_z + formation.max_pair_tau()
    return BarrierIntervals(r_hat, geo.d_s + t, z_max, z_max if r_tilde is None else r_tilde)


@dataclass
class BarrierCheck:
    ok: bool
    reason: str = ""
    witness: float | None = None

    def __bool__(self):
        return self.ok


def validate_barrier_numeric(
    b: BarrierShape,
    geo: Geometry,
    tau_norm: float,
    z_max: float | None = None,
    n_grid: int = 10_000,
    rtol: float = 1e-9,
) -> BarrierCheck:
    """Grid check of the sign, boundary and monotonicity conditions.

    ``tau_norm`` is the pair offset used for ``r_hat_s = r_s - tau_norm`` or
    ``d_hat_s = d_s + tau_norm``. Collision barriers are checked on
    ``[d_hat_s, z_max)``; ``z_max`` defaults to ``r_z + tau_norm``.
    """
    if b.kind == "connectivity":
        r_hat = geo.r_s - tau_norm
        if r_hat <= 0:
            raise ValueError(f"invalid interval: r_hat_s = {r_hat:.4g} <= 0")
        z = np.linspace(0.0, r_hat, n_grid)
        val = b.value(z)
        if abs(b.value(0.0)) > rtol * max(1.0, b.mu):
            return BarrierCheck(False, "Upsilon_e(0) != 0", 0.0)
        if abs(b.value(r_hat) - b.mu) > rtol * max(1.0, abs(b.mu)):
            return BarrierCheck(False, "Upsilon_e(r_hat_s) != mu1", r_hat)
        bad = np.nonzero(val < -rtol * max(1.0, b.mu))[0]
        if bad.size:
            return BarrierCheck(False, "negative value", float(z[bad[0]]))
        zi = z[1:]
        bad = np.nonzero(b.derivative(zi) <= 0)[0]
        if bad.size:
            return BarrierCheck(False, "derivative not positive", float(zi[bad[0]]))
        ratio = b.grad_factor_sq(zi**2)
        bad = np.nonzero(~np.isfinite(ratio) | (ratio <= 0))[0]
        if bad.size:
            return BarrierCheck(False, "(dUpsilon/dz)/z not positive", float(zi[bad[0]]))
        return BarrierCheck(True)

    d_hat = geo.d_s + tau_norm
    hi = geo.r_z + tau_norm if z_max is None else z_max
    if hi <= d_hat:
        raise ValueError(f"invalid interval: z_max = {hi:.4g} <= d_hat_s = {d_hat:.4g}")
    z = np.linspace(d_hat, hi, n_grid, endpoint=False)
    if abs(b.value(d_hat) - b.mu) > rtol * max(1.0, abs(b.mu)):
        return BarrierCheck(False, "Upsilon_c(d_hat_s) != mu2", d_hat)
    bad = np.nonzero(b.value(z) < -rtol * max(1.0, b.mu))[0]
    if bad.size:
        return BarrierCheck(False, "negative value", float(z[bad[0]]))
    bad = np.nonzero(b.derivative(z) >= 0)[0]
    if bad.size:
        return BarrierCheck(False, "derivative not negative", float(z[bad[0]]))
    return BarrierCheck(True)


# ---------------------------------------------------------------------------
# Closed-loop model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoordinationModel:
    """Everything the controller needs: formation, geometry, barriers, weights.

    ``anchor_gain`` adds ``-k*(y_i - rho_star*t) - k*varrho_i`` to every input
    (tracking of the moving formation reference); ``0`` gives the plain
    distributed law.
    """

    formation: Formation
    geometry: Geometry
    barrier_e: BarrierShape
    barrier_c: BarrierShape
    base_weights: np.ndarray = None
    anchor_gain: float = 0.0

    def __post_init__(self):
        N = self.formation.n_agents
        W = np.ones((N, N)) if self.base_weights is None else np.asarray(self.base_weights, float)
        W = W.copy()
        np.fill_diagonal(W, 0.0)
        if W.shape != (N, N) or not np.allclose(W, W.T) or np.any(W < 0):
            raise ValueError("base weights must be a symmetric non-negative N x N matrix")
        object.__setattr__(self, "base_weights", W)

    @property
    def n_agents(self) -> int:
        return self.formation.n_agents

    @property
    def dim(self) -> int:
        return self.formation.dim

    @property
    def state_dim(self) -> int:
        return 2 * self.n_agents * self.dim

    def masks(self, x: np.ndarray, edges: np.ndarray):
        """``(sf, sz, G)`` masks/weights for positions ``(..., N, n)`` and edge mask."""
        dist = pairwise_distances(x)
        sf = edges & self.formation.edge_mask()
        sz = edges & (dist < self.geometry.r_z)
        G = np.where(edges, self.base_weights, 0.0)
        return sf, sz, G

    def control(self, t: float, x, rho, sf, sz, G) -> np.ndarray:
        """Inputs ``u`` of shape ``(..., N, n)`` for frozen neighbour sets."""
        y = x - self.formation.tau
        y_ij = y[..., :, None, :] - y[..., None, :, :]
        rho_ij = rho[..., :, None, :] - rho[..., None, :, :]
        s = (y_ij**2).sum(axis=-1)
        coef = G + sf * self.barrier_e.grad_factor_sq(s) + sz * self.barrier_c.grad_factor_sq(s)
        u = -(coef[..., None] * y_ij).sum(axis=-2) - (G[..., None] * rho_ij).sum(axis=-2)
        if self.anchor_gain:
            k = self.anchor_gain
            u = u - k * (y - t * self.formation.rho_star) - k * (rho - self.formation.rho_star)
        return u

    def lyapunov(self, t: float, x, rho, sf, sz, G) -> np.ndarray:
        y = x - self.formation.tau
        vr = rho - self.formation.rho_star
        y_ij = y[..., :, None, :] - y[..., None, :, :]
        s = (y_ij**2).sum(axis=-1)
        barrier = sf * self.barrier_e.value_sq(s) + sz * self.barrier_c.value_sq(s)
        consensus = (G * (y[..., :, None, :] * y_ij).sum(axis=-1)).sum(axis=(-2, -1))
        W = 0.5 * barrier.sum(axis=(-2, -1)) + 0.5 * consensus + 0.5 * (vr**2).sum(axis=(-2, -1))
        if self.anchor_gain:
            ym = y - t * self.formation.rho_star
            W = W + 0.5 * self.anchor_gain * (ym**2).sum(axis=(-2, -1))
        return W

    def lyapunov_rate(self, rho, G) -> np.ndarray:
        vr = rho - self.formation.rho_star
        diff = vr[..., :, None, :] - vr[..., None, :, :]
        rate = -0.5 * (G * (diff**2).sum(axis=-1)).sum(axis=(-2, -1))
        if self.anchor_gain:
            rate = rate - self.anchor_gain * (vr**2).sum(axis=(-2, -1))
        return rate


def control_input(i: int, x, rho, graph: WeightedGraph, model: CoordinationModel, t: float = 0.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    sf, sz, G = model.masks(x, graph.weights > 0)
    G = graph.weights
    return model.control(t, x, np.asarray(rho, float), sf, sz, G)[i]


def lyapunov_value(x, rho, graph: WeightedGraph, model: CoordinationModel, t: float = 0.0) -> float:
    x = np.asarray(x, dtype=float)
    sf, sz, _ = model.masks(x, graph.weights > 0)
    return float(model.lyapunov(t, x, np.asarray(rho, float), sf, sz, graph.weights))


def lyapunov_rate(varrho, graph: WeightedGraph, anchor_gain: float = 0.0) -> float:
    """``-varrho^T ((L + k I) kron I_n) varrho`` for stacked velocities ``(N, n)``."""
    vr = np.atleast_2d(np.asarray(varrho, dtype=float))
    L = laplacian(graph) + anchor_gain * np.eye(graph.n_nodes)
    return float(-np.einsum("in,ij,jn->", vr, L, vr))


def default_eps_hat(geo: Geometry) -> float:
    hi = min(0.5 * geo.d_s - geo.r_c, geo.eps)
    if hi <= 0:
        raise ConfigurationError("empty interval for eps_hat: min(d_s/2 - r_c, eps) <= 0")
    return 0.5 * hi


def mu_max(x0, rho0, graph0: WeightedGraph, model: CoordinationModel, eps_hat: float | None = None) -> float:
    """Energy cap evaluated term by term as printed, including the initial
    collision-barrier term and the ``(N-1)N`` entry cap."""
    geo, form = model.geometry, model.formation
    if eps_hat is None:
        eps_hat = default_eps_hat(geo)
    if not 0 < eps_hat < min(0.5 * geo.d_s - geo.r_c, geo.eps):
        raise ConfigurationError("eps_hat must lie in (0, min(d_s/2 - r_c, eps))")
    x0 = np.asarray(x0, dtype=float)
    rho0 = np.asarray(rho0, dtype=float)
    N = form.n_agents
    iv = barrier_intervals(geo, form)
    G = graph0.weights
    y = x0 - form.tau
    vr = rho0 - form.rho_star
    fmask = form.edge_mask()
    _, sz, _ = model.masks(x0, G > 0)
    total = 0.0
    for i in range(N):
        part = fmask[i].sum() * float(model.barrier_e.value(abs(iv.r_hat_s - eps_hat)))
        part += float(y[i] @ (G[i][:, None] * (y[i] - y)).sum(axis=0))
        part += float(vr[i] @ vr[i])
        part += sum(float(model.barrier_c.value(np.linalg.norm(y[i] - y[j]))) for j in np.nonzero(sz[i])[0])
        total += part
    return 0.5 * total + (N - 1) * N * float(model.barrier_c.value(abs(iv.d_hat_s - eps_hat)))


# ---------------------------------------------------------------------------
# Unsafe sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnsafeSet:
    """Union of blocks; a block is the set where all its polynomials are > 0."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(tuple(b) for b in self.blocks)
        for b in blocks:
            if not b:
                raise ValueError("unsafe block must contain at least one polynomial")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def parse(cls, blocks: Sequence[Sequence[str]], dim: int) -> UnsafeSet:
        return cls(tuple(tuple(Polynomial.parse(s, dim) for s in b) for b in blocks))

    def __len__(self):
        return len(self.blocks)

    def membership(self, positions) -> tuple[np.ndarray, np.ndarray]:
        """Per-point flag and first violated block index (``-1`` if safe).

        ``positions`` has shape ``(..., n)``.
        """
        x = np.asarray(positions, dtype=float)
        first = np.full(x.shape[:-1], -1, dtype=int)
        for k, block in enumerate(self.blocks):
            inside = np.ones(x.shape[:-1], dtype=bool)
            for w in block:
                inside &= np.asarray(w.evaluate(x)) > 0
            first = np.where((first < 0) & inside, k, first)
        return first >= 0, first


def unsafe_membership(x, unsafe: UnsafeSet) -> tuple[np.ndarray, np.ndarray]:
    return unsafe.membership(x)


# ---------------------------------------------------------------------------
# Batched hybrid system
# ---------------------------------------------------------------------------

OK, COLLISION, DISCONNECT, UNSAFE = 0, 1, 2, 3


@dataclass
class _Ctx:
    edges: np.ndarray
    sf: np.ndarray = None
    sz: np.ndarray = None
    G: np.ndarray = None


class MultiAgentSystem:
    """Hybrid closed loop in ``q`` coordinates, batched over leading axis."""

    def __init__(self, model: CoordinationModel, unsafe: UnsafeSet | None = None):
        self.model = model
        self.unsafe = unsafe
        self.dim = model.state_dim

    def split(self, q):
        return q_to_states(q, self.model.formation)

    def initial_context(self, q0: np.ndarray) -> _Ctx:
        x, _ = self.split(q0)
        N = self.model.n_agents
        empty = np.zeros(x.shape[:-2] + (N, N), dtype=bool)
        return _Ctx(update_edge_mask(pairwise_distances(x), empty, self.model.geometry))

    def prepare(self, t: float, q: np.ndarray, ctx: _Ctx) -> _Ctx:
        x, _ = self.split(q)
        edges = update_edge_mask(pairwise_distances(x), ctx.edges, self.model.geometry)
        sf, sz, G = self.model.masks(x, edges)
        return _Ctx(edges, sf, sz, G)

    def rhs(self, t: float, q: np.ndarray, ctx: _Ctx) -> np.ndarray:
        x, rho = self.split(q)
        u = self.model.control(t, x, rho, ctx.sf, ctx.sz, ctx.G)
        return np.concatenate([rho, u], axis=-1).reshape(q.shape)

    def lambda2(self, ctx: _Ctx) -> np.ndarray:
        Gm = ctx.G
        L = -Gm.copy()
        idx = np.arange(Gm.shape[-1])
        L[..., idx, idx] = Gm.sum(axis=-1)
        if Gm.shape[-1] < 2:
            return np.zeros(Gm.shape[:-2])
        return np.linalg.eigvalsh(L)[..., 1]

    def violation_codes(self, t: float, q: np.ndarray, ctx: _Ctx) -> np.ndarray:
        x, _ = self.split(q)
        N = self.model.n_agents
        codes = np.zeros(q.shape[:-1], dtype=int)
        if self.unsafe is not None and len(self.unsafe):
            inside, _ = self.unsafe.membership(x)
            codes = np.where(inside.any(axis=-1), UNSAFE, codes)
        if N > 1:
            codes = np.where(self.lambda2(ctx) <= 1e-8, DISCONNECT, codes)
            dist = pairwise_distances(x)
            iu = np.triu_indices(N, 1)
            codes = np.where(dist[..., iu[0], iu[1]].min(axis=-1) <= self.model.geometry.d_s, COLLISION, codes)
        return codes

    def convergence_residual(self, t: float, q: np.ndarray) -> np.ndarray:
        x, rho = self.split(q)
        form = self.model.formation
        y = x - form.tau
        vr = rho - form.rho_star
        if self.model.anchor_gain:
            ym = y - t * form.rho_star
            return np.sqrt((ym**2).sum(axis=(-2, -1)) + (vr**2).sum(axis=(-2, -1)))
        yd = y - y.mean(axis=-2, keepdims=True)
        vd = vr - vr.mean(axis=-2, keepdims=True)
        return np.sqrt((yd**2).sum(axis=(-2, -1)) + (vd**2).sum(axis=(-2, -1)))


def rk4_step(system, t: float, q: np.ndarray, ctx, dt: float) -> np.ndarray:
    k1 = system.rhs(t, q, ctx)
    k2 = system.rhs(t + dt / 2, q + dt / 2 * k1, ctx)
    k3 = system.rhs(t + dt / 2, q + dt / 2 * k2, ctx)
    k4 = system.rhs(t + dt, q + dt * k3, ctx)
    return q + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


# ---------------------------------------------------------------------------
# Single-run simulation with monitors
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    rho: np.ndarray
    lambda2: np.ndarray
    min_dist: np.ndarray
    W: np.ndarray
    Wdot: np.ndarray
    unsafe: np.ndarray
    mode: np.ndarray
    edge_events: list = field(default_factory=list)
    terminated: str = "horizon"

    def __len__(self):
        return len(self.t)

    def velocity_spread(self) -> np.ndarray:
        d = self.rho[:, :, None, :] - self.rho[:, None, :, :]
        return np.sqrt((d**2).sum(axis=-1)).max(axis=(-2, -1))

    def formation_error(self, tau) -> np.ndarray:
        y = self.x - np.asarray(tau)
        return np.linalg.norm(y - y.mean(axis=1, keepdims=True), axis=-1).max(axis=-1)

    def write_csv(self, path) -> None:
        N, n = self.x.shape[1], self.x.shape[2]
        header = (["t", "agent"] + [f"x{k + 1}" for k in range(n)] + [f"v{k + 1}" for k in range(n)]
                  + ["lambda2", "min_dist", "W", "Wdot", "unsafe"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(len(self.t)):
                for i in range(N):
                    w.writerow([f"{self.t[k]:.6f}", i + 1]
                               + [f"{v:.10g}" for v in self.x[k, i]]
                               + [f"{v:.10g}" for v in self.rho[k, i]]
                               + [f"{self.lambda2[k]:.10g}", f"{self.min_dist[k]:.10g}",
                                  f"{self.W[k]:.10g}", f"{self.Wdot[k]:.10g}", int(self.unsafe[k, i])])

    def write_edge_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "i", "j", "event"])
            for t, i, j, ev in self.edge_events:
                w.writerow([f"{t:.6f}", i + 1, j + 1, ev])


def simulate(
    model: CoordinationModel,
    x0,
    rho0,
    horizon: float,
    dt: float = 1e-3,
    unsafe: UnsafeSet | None = None,
    stop_on_violation: bool = False,
    record_every: int = 1,
) -> Trajectory:
    """Fixed-step RK4 of the hybrid closed loop; edges switch at step boundaries."""
    form = model.formation
    x0 = np.asarray(x0, dtype=float)
    rho0 = np.asarray(rho0, dtype=float)
    system = MultiAgentSystem(model, unsafe)
    q = states_to_q(x0, rho0, form)[None]
    ctx = system.initial_context(q)
    N = model.n_agents
    if N > 1 and system.lambda2(system.prepare(0.0, q, ctx))[0] <= 1e-8:
        raise ConfigurationError("initial graph is not connected")
    missing = [e for e in form.edges if not ctx.edges[0][e]]
    if missing:
        raise ConfigurationError(f"Assumption 2 violated: formation edges {missing} absent at t0")

    n_steps = int(round(horizon / dt))
    rec: dict[str, list] = {k: [] for k in ("t", "x", "rho", "l2", "md", "W", "Wd", "un", "mode")}
    events = []
    prev_edges = np.zeros((N, N), dtype=bool)
    prev_sig = None
    mode_id = -1
    iu = np.triu_indices(N, 1)
    terminated = "horizon"
    t = 0.0
    for k in range(n_steps + 1):
        t = k * dt
        ctx = system.prepare(t, q, ctx)
        x, rho = system.split(q)
        e = ctx.edges[0]
        for i, j in zip(*np.nonzero(np.triu(e != prev_edges))):
            events.append((t, int(i), int(j), "added" if e[i, j] else "removed"))
        prev_edges = e.copy()
        sig = (e.tobytes(), ctx.sz[0].tobytes(), ctx.sf[0].tobytes())
        if sig != prev_sig:
            mode_id += 1
            prev_sig = sig
        codes = system.violation_codes(t, q, ctx)
        if k % record_every == 0 or k == n_steps:
            inside = (unsafe.membership(x[0])[0] if unsafe is not None and len(unsafe)
                      else np.zeros(N, dtype=bool))
            dist = pairwise_distances(x[0])
            rec["t"].append(t)
            rec["x"].append(x[0].copy())
            rec["rho"].append(rho[0].copy())
            rec["l2"].append(float(system.lambda2(ctx)[0]) if N > 1 else 0.0)
            rec["md"].append(float(dist[iu].min()) if N > 1 else math.inf)
            rec["W"].append(float(model.lyapunov(t, x, rho, ctx.sf, ctx.sz, ctx.G)[0]))
            rec["Wd"].append(float(model.lyapunov_rate(rho, ctx.G)[0]))
            rec["un"].append(inside)
            rec["mode"].append(mode_id)
        if stop_on_violation and codes[0] != OK:
            terminated = {COLLISION: "collision", DISCONNECT: "disconnect", UNSAFE: "unsafe"}[int(codes[0])]
            break
        if k == n_steps:
            break
        q = rk4_step(system, t, q, ctx, dt)
        if not np.all(np.isfinite(q)) or np.abs(q).max() > DIVERGENCE_GUARD:
            raise SimulationDivergence(k + 1, t + dt)

    return Trajectory(
        t=np.array(rec["t"]), x=np.array(rec["x"]), rho=np.array(rec["rho"]),
        lambda2=np.array(rec["l2"]), min_dist=np.array(rec["md"]), W=np.array(rec["W"]),
        Wdot=np.array(rec["Wd"]), unsafe=np.array(rec["un"]), mode=np.array(rec["mode"]),
        edge_events=events, terminated=terminated,
    )
