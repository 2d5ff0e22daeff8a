"""Weighted undirected communication graph with hysteresis edge switching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL_EIG = 1e-8


@dataclass(frozen=True)
class Geometry:
    """Agent radii and switching distances (all lengths)."""

    r_a: float
    r_c: float
    r_z: float
    r_s: float
    eps: float
    d_s: float

    def __post_init__(self):
        if not 0 < self.r_a <= self.r_c < self.r_z < self.r_s:
            raise ValueError(
                "geometry ordering violated: need 0 < r_a <= r_c < r_z < r_s "
                f"(got r_a={self.r_a}, r_c={self.r_c}, r_z={self.r_z}, r_s={self.r_s})"
            )
        if not 0 <= self.eps <= self.r_s - self.r_z:
            raise ValueError(f"hysteresis margin eps={self.eps} must lie in [0, r_s - r_z]")
        if not self.d_s > 2 * self.r_c:
            raise ValueError(f"safety distance d_s={self.d_s} must exceed 2*r_c={2 * self.r_c}")

    @property
    def add_radius(self) -> float:
        return self.r_s - self.eps


@dataclass(frozen=True)
class WeightedGraph:
    weights: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.weights, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError("weights must be square")
        if not np.allclose(G, G.T) or np.any(G < 0) or np.any(np.diag(G) != 0):
            raise ValueError("weights must be symmetric, non-negative, zero diagonal")
        G.setflags(write=False)
        object.__setattr__(self, "weights", G)

    @classmethod
    def empty(cls, n_nodes: int) -> WeightedGraph:
        return cls(np.zeros((n_nodes, n_nodes)))

    @classmethod
    def from_edges(cls, n_nodes: int, edges, base_weights=None) -> WeightedGraph:
        W = np.zeros((n_nodes, n_nodes))
        for i, j in edges:
            w = 1.0 if base_weights is None else base_weights[i][j]
            W[i, j] = W[j, i] = w
        return cls(W)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.weights))
        return frozenset(zip(i.tolist(), j.tolist()))

    def has_edge(self, i: int, j: int) -> bool:
        return self.weights[i, j] > 0

    def neighbors(self, i: int) -> list[int]:
        return np.nonzero(self.weights[i])[0].tolist()


def laplacian(g: WeightedGraph | np.ndarray) -> np.ndarray:
    G = g.weights if isinstance(g, WeightedGraph) else np.asarray(g, dtype=float)
    return np.diag(G.sum(axis=-1)) - G


def algebraic_connectivity(L: np.ndarray) -> float:
    """Second-smallest Laplacian eigenvalue (0 for a single node)."""
    L = np.asarray(L, dtype=float)
    if L.shape[0] < 2:
        return 0.0
    try:
        ev = np.linalg.eigvalsh(L)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigensolver failed on Laplacian: {exc}") from exc
    return float(ev[1])


def is_connected(g: WeightedGraph, tol: float = TOL_EIG) -> bool:
    if g.n_nodes == 1:
        return True
    return algebraic_connectivity(laplacian(g)) > tol


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    """Distance matrix; ``positions`` has shape ``(..., N, n)``."""
    x = np.asarray(positions, dtype=float)
    diff = x[..., :, None, :] - x[..., None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def update_edge_mask(dist: np.ndarray, prev: np.ndarray, geo: Geometry) -> np.ndarray:
    """Hysteresis rule on boolean edge masks (batched over leading axes).

    A missing edge appears once the pair is within ``r_s - eps``; an existing
    edge survives as long as the pair stays within ``r_s``.
    """
    keep = prev & (dist <= geo.r_s)
    add = ~prev & (dist <= geo.add_radius)
    mask = keep | add
    n = mask.shape[-1]
    mask[..., np.arange(n), np.arange(n)] = False
    return mask


def update_edges(positions, prev: WeightedGraph, geo: Geometry, base_weights=None) -> WeightedGraph:
    x = np.asarray(positions, dtype=float)
    if x.shape[0] != prev.n_nodes:
        raise ValueError("position count does not match node count")
    mask = update_edge_mask(pairwise_distances(x), prev.weights > 0, geo)
    base = np.ones_like(prev.weights) if base_weights is None else np.asarray(base_weights, float)
    return WeightedGraph(np.where(mask, base, 0.0))


def initial_graph(positions, geo: Geometry, base_weights=None) -> WeightedGraph:
    n = np.asarray(positions).shape[0]
    return update_edges(positions, WeightedGraph.empty(n), geo, base_weights)


def neighbor_sets(i: int, g: WeightedGraph, formation_edges, positions, geo: Geometry):
    """``(N_s, N_sf, N_sz)`` for agent ``i``: sensing, sensing-and-formation, close-range."""
    x = np.asarray(positions, dtype=float)
    formation = {j for a, b in formation_edges for j in ((b,) if a == i else (a,) if b == i else ())}
    n_s = set(g.neighbors(i))
    n_sf = n_s & formation
    n_sz = {j for j in n_s if np.linalg.norm(x[i] - x[j]) < geo.r_z}
    return n_s, n_sf, n_sz


def components(weights: np.ndarray) -> int:
    """Number of connected components by union-find (independent of eigenvalues)."""
    n = weights.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in zip(*np.nonzero(weights)):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    return len({find(a) for a in range(n)})
