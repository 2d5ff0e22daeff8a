"""Planar slices of a certified sublevel set ``{W <= c}``.

The slice fixes every coordinate except two entries of one agent's position
offset (or two raw coordinates of a polynomial system), extracts ``{W = c}``
by marching squares and snaps every vertex onto the level set with a few
Newton steps along the gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .oracle import quadratic_part
from .polynomial import Polynomial

SNAP_TOL = 1e-9


@dataclass
class Polyline:
    vertices: np.ndarray  # (K, 2) plane coordinates
    closed: bool

    def self_intersects(self) -> bool:
        return _self_intersects(self.vertices, self.closed)


@dataclass
class RegionSlice:
    dims: tuple  # indices of the two free q coordinates
    offset: np.ndarray  # added to plane coordinates for reporting (e.g. tau_i)
    base: np.ndarray  # full q used for the fixed coordinates
    level: float
    polylines: list = field(default_factory=list)
    max_level_error: float = 0.0

    def write_csv(self, path, labels=("p1", "p2")) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["curve", "vertex", labels[0], labels[1]])
            for k, pl in enumerate(self.polylines):
                for v, (a, b) in enumerate(pl.vertices + self.offset):
                    w.writerow([k, v, f"{a:.10g}", f"{b:.10g}"])

    def points_q(self, k: int = 0) -> np.ndarray:
        q = np.tile(self.base, (len(self.polylines[k].vertices), 1))
        q[:, list(self.dims)] = self.polylines[k].vertices
        return q


def _segments_cross(p, q, r, s) -> np.ndarray:
    """Proper intersection of segments p->q with r->s (vectorised over rows)."""

    def orient(a, b, c):
        return np.sign((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))

    o1, o2 = orient(p, q, r), orient(p, q, s)
    o3, o4 = orient(r, s, p), orient(r, s, q)
    return (o1 * o2 < 0) & (o3 * o4 < 0)


def _self_intersects(v: np.ndarray, closed: bool) -> bool:
    pts = v[:-1] if closed and np.allclose(v[0], v[-1]) else v
    K = len(pts)
    if K < 4:
        return False
    a = pts
    b = np.roll(pts, -1, axis=0) if closed else np.vstack([pts[1:], pts[-1:]])
    n_seg = K if closed else K - 1
    for i in range(n_seg):
        j = np.arange(i + 2, n_seg)
        if closed and i == 0:
            j = j[j != n_seg - 1]
        if j.size and np.any(_segments_cross(a[i], b[i], a[j], b[j])):
            return True
    return False


def _restrict(W: Polynomial, dims, base) -> Polynomial:
    m = W.num_vars
    A = np.zeros((m, 2))
    A[dims[0], 0] = 1.0
    A[dims[1], 1] = 1.0
    b = np.asarray(base, dtype=float).copy()
    b[list(dims)] = 0.0
    return W.substitute_affine(A, b)


def _snap(W2: Polynomial, c: float, pts: np.ndarray, iters: int = 30) -> np.ndarray:
    d0, d1 = W2.derivative(0), W2.derivative(1)
    p = pts.copy()
    for _ in range(iters):
        r = np.asarray(W2.evaluate(p)) - c
        if np.max(np.abs(r)) < SNAP_TOL:
            break
        g = np.stack([np.asarray(d0.evaluate(p)), np.asarray(d1.evaluate(p))], axis=-1)
        gg = np.maximum((g**2).sum(axis=-1), 1e-300)
        p = p - (r / gg)[:, None] * g
    return p


def slice_region(W: Polynomial, c: float, dims, base, offset=(0.0, 0.0), resolution: int = 401,
                 extent: float | None = None) -> RegionSlice:
    """Contours of ``{W = c}`` in the plane of ``dims`` through ``base``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 2 or dims[0] == dims[1]:
        raise ValueError("a slice needs two distinct coordinates")
    base = np.asarray(base, dtype=float)
    W2 = _restrict(W, dims, base)
    if extent is None:
        Q = quadratic_part(W2)
        try:
            half = np.sqrt(np.maximum(c * np.diag(np.linalg.inv(Q)), 0.0))
        except np.linalg.LinAlgError:
            half = np.ones(2)
        half = 1.5 * np.where(half > 0, half, 1.0)
    else:
        half = np.full(2, float(extent))
    centre = base[list(dims)]
    for _ in range(20):
        ax0 = np.linspace(centre[0] - half[0], centre[0] + half[0], resolution)
        ax1 = np.linspace(centre[1] - half[1], centre[1] + half[1], resolution)
        g0, g1 = np.meshgrid(ax0, ax1, indexing="ij")
        vals = np.asarray(W2.evaluate(np.stack([g0, g1], axis=-1)))
        border = np.concatenate([vals[0], vals[-1], vals[:, 0], vals[:, -1]])
        if np.all(border > c) or extent is not None:
            break
        half = half * 1.5
    out = RegionSlice(dims, np.asarray(offset, float), base, float(c))
    errs = [0.0]
    for contour in measure.find_contours(vals, c):
        pts = np.stack([np.interp(contour[:, 0], np.arange(resolution), ax0),
                        np.interp(contour[:, 1], np.arange(resolution), ax1)], axis=-1)
        closed = bool(np.allclose(contour[0], contour[-1]))
        pts = _snap(W2, c, pts)
        if closed:
            pts[-1] = pts[0]
        errs.append(float(np.max(np.abs(np.asarray(W2.evaluate(pts)) - c))))
        out.polylines.append(Polyline(pts, closed))
    out.polylines.sort(key=lambda pl: -len(pl.vertices))
    out.max_level_error = max(errs)
    return out
