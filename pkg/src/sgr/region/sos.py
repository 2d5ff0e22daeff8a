"""Small sum-of-squares modelling layer on top of :mod:`sgr.sdp`.

``LinPoly`` is a polynomial whose coefficients are affine in the program's
decision scalars.  It is stored as COO triplets (monomial, column, value) with
column ``0`` reserved for the constant part and column ``k + 1`` for scalar
``k``.  Duplicates are summed lazily by :meth:`LinPoly.compress`.

Two ways of imposing "this is SOS" are provided:

* :meth:`SosProgram.sos_multiplier` creates a fresh Gram matrix whose entries
  are scalars (image form); it is used for multipliers.
* :meth:`SosProgram.require_sos` lifts a given ``LinPoly`` with the canonical
  SMR pair rule and adds free null-space scalars (kernel form).  When the
  power vector can be pruned it switches to image form on the smaller basis.

Pruning drops a monomial ``m`` when ``x^(2m)`` is absent from the target and
no pair of other basis monomials sums to ``2m``: the diagonal Gram entry is
then forced to zero, so every PSD Gram has a zero row there.  The rule is
iterated to a fixed point and never removes a feasible representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..polynomial import (
    Polynomial,
    PowerVector,
    _pair_table,
    null_basis_entries,
    power_vector,
    sub_power_vector,
)
from ..sdp import ConicOutcome, ConicProgram, PsdBlock


class LinPoly:
    __slots__ = ("num_vars", "monos", "cols", "vals")

    def __init__(self, num_vars: int, monos=None, cols=None, vals=None):
        self.num_vars = num_vars
        self.monos = np.zeros((0, num_vars), dtype=np.int64) if monos is None else np.asarray(monos, dtype=np.int64)
        self.cols = np.zeros(0, dtype=np.int64) if cols is None else np.asarray(cols, dtype=np.int64)
        self.vals = np.zeros(0) if vals is None else np.asarray(vals, dtype=float)

    @classmethod
    def from_poly(cls, p: Polynomial) -> LinPoly:
        items = list(p.items())
        if not items:
            return cls(p.num_vars)
        monos = np.array([m for m, _ in items], dtype=np.int64)
        return cls(p.num_vars, monos, np.zeros(len(items), dtype=np.int64), [c for _, c in items])

    @classmethod
    def scalar(cls, num_vars: int, index: int, coef: float = 1.0) -> LinPoly:
        """``coef * x_index`` as a constant polynomial."""
        return cls(num_vars, np.zeros((1, num_vars), dtype=np.int64), [index + 1], [coef])

    @classmethod
    def combination(cls, polys: list[Polynomial], indices) -> LinPoly:
        """``sum_k x_{indices[k]} * polys[k]``."""
        out = cls(polys[0].num_vars if polys else 0)
        for p, k in zip(polys, indices):
            out = out + LinPoly.from_poly(p).times_scalar(int(k))
        return out

    def times_scalar(self, index: int) -> LinPoly:
        if np.any(self.cols != 0):
            raise ValueError("product would be bilinear in decision scalars")
        return LinPoly(self.num_vars, self.monos, np.full(len(self.cols), index + 1), self.vals)

    def __add__(self, other) -> LinPoly:
        if isinstance(other, Polynomial):
            other = LinPoly.from_poly(other)
        if other.num_vars != self.num_vars:
            raise ValueError("variable count mismatch")
        return LinPoly(self.num_vars, np.vstack([self.monos, other.monos]),
                       np.concatenate([self.cols, other.cols]), np.concatenate([self.vals, other.vals]))

    __radd__ = __add__

    def __neg__(self) -> LinPoly:
        return LinPoly(self.num_vars, self.monos, self.cols, -self.vals)

    def __sub__(self, other) -> LinPoly:
        if isinstance(other, Polynomial):
            other = LinPoly.from_poly(other)
        return self + (-other)

    def __rsub__(self, other) -> LinPoly:
        return (-self) + other

    def scale(self, a: float) -> LinPoly:
        return LinPoly(self.num_vars, self.monos, self.cols, self.vals * a)

    def __mul__(self, other) -> LinPoly:
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        if not isinstance(other, Polynomial):
            return NotImplemented
        if other.num_vars != self.num_vars:
            raise ValueError("variable count mismatch")
        lp = self.compress()
        parts_m, parts_c, parts_v = [], [], []
        for m, c in other.items():
            parts_m.append(lp.monos + np.asarray(m, dtype=np.int64))
            parts_c.append(lp.cols)
            parts_v.append(lp.vals * c)
        if not parts_m:
            return LinPoly(self.num_vars)
        return LinPoly(self.num_vars, np.vstack(parts_m), np.concatenate(parts_c), np.concatenate(parts_v)).compress()

    __rmul__ = __mul__

    def compress(self) -> LinPoly:
        if len(self.vals) == 0:
            return self
        key = np.hstack([self.monos, self.cols[:, None]])
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        vals = np.zeros(len(uniq))
        np.add.at(vals, inv.ravel(), self.vals)
        keep = vals != 0
        return LinPoly(self.num_vars, uniq[keep, :-1], uniq[keep, -1], vals[keep])

    @property
    def degree(self) -> int:
        lp = self.compress()
        return int(lp.monos.sum(axis=1).max()) if len(lp.vals) else 0

    def grouped(self):
        """``(unique monomials (M, n), inverse index, cols, vals)`` after compression."""
        lp = self.compress()
        if len(lp.vals) == 0:
            return np.zeros((0, self.num_vars), dtype=np.int64), np.zeros(0, dtype=int), lp.cols, lp.vals
        uniq, inv = np.unique(lp.monos, axis=0, return_inverse=True)
        return uniq, inv.ravel(), lp.cols, lp.vals

    def evaluate_coeffs(self, x: np.ndarray) -> Polynomial:
        """Numeric polynomial at decision vector ``x``."""
        xe = np.concatenate([[1.0], np.asarray(x, dtype=float)])
        lp = self.compress()
        terms: dict = {}
        for m, c, v in zip(map(tuple, lp.monos.tolist()), lp.cols, lp.vals):
            terms[m] = terms.get(m, 0.0) + v * xe[c]
        return Polynomial(self.num_vars, terms)


def _codes(monos: np.ndarray, base: int) -> np.ndarray:
    weights = base ** np.arange(monos.shape[1], dtype=np.int64)
    return monos.astype(np.int64) @ weights


def prune_basis(phi: PowerVector, support) -> PowerVector:
    """Drop power-vector monomials whose Gram rows must vanish (see module notes)."""
    monos = np.array(phi.monomials, dtype=np.int64)
    support = np.asarray(support, dtype=np.int64).reshape(-1, phi.num_vars)
    base = 2 * phi.max_degree + 1
    if phi.num_vars * math.log(base) > 60 * math.log(2):
        return phi  # codes would overflow; skip pruning
    target = set(_codes(support, base).tolist())
    codes = _codes(monos, base)
    alive = np.ones(len(monos), dtype=bool)
    while True:
        idx = np.nonzero(alive)[0]
        c = codes[idx]
        iu, ju = np.triu_indices(len(idx), 1)
        pairs = set((c[iu] + c[ju]).tolist())
        drop = [k for k, code in zip(idx, c.tolist()) if 2 * code not in target and 2 * code not in pairs]
        if not drop:
            break
        alive[drop] = False
    if alive.all():
        return phi
    return sub_power_vector(phi, [phi.monomials[k] for k in np.nonzero(alive)[0]])


def merge_grams(parts) -> tuple[PowerVector, np.ndarray]:
    """Gram of a sum of quadratic forms given as ``(phi, gram)`` pairs, over the union basis."""
    parts = list(parts)
    phi0 = parts[0][0]
    union = sub_power_vector(phi0, [m for phi, _ in parts for m in phi.monomials])
    out = np.zeros((len(union), len(union)))
    for phi, g in parts:
        pos = np.array([union.index[m] for m in phi.monomials], dtype=np.int64)
        out[np.ix_(pos, pos)] += g
    return union, out


@dataclass
class GramWitness:
    name: str
    phi: PowerVector
    gram: np.ndarray

    def poly(self) -> Polynomial:
        return self.phi.quadratic_form(self.gram)

    @property
    def margin(self) -> float:
        return float(np.linalg.eigvalsh(self.gram)[0]) if len(self.gram) else math.inf

    def to_dict(self) -> dict:
        return {"name": self.name, "basis": [list(m) for m in self.phi.monomials],
                "gram": self.gram.tolist(), "min_eig": self.margin}


@dataclass
class SosCertificate:
    """Identity ``target - sum_k mult_k * factor_k == remainder`` with SOS Grams.

    ``multipliers`` maps a name to ``(GramWitness, factor)``; the remainder is
    also a Gram witness.  Verification uses only these numbers.
    """

    kind: str
    target: Polynomial
    multipliers: dict
    remainder: GramWitness
    info: dict = field(default_factory=dict)

    def grams(self) -> list[GramWitness]:
        return [self.remainder] + [g for g, _ in self.multipliers.values()]

    @property
    def margin(self) -> float:
        return min(g.margin for g in self.grams())

    @property
    def degrees(self) -> dict:
        return {name: 2 * g.phi.max_degree for name, (g, _) in self.multipliers.items()}

    def residual(self) -> float:
        lhs = self.target
        for g, f in self.multipliers.values():
            lhs = lhs - g.poly() * f
        diff = lhs - self.remainder.poly()
        scale = max(1.0, self.target.max_abs_coefficient())
        return diff.max_abs_coefficient() / scale

    def verify(self, tol_identity: float = 1e-6, tol_psd: float = 1e-8) -> bool:
        if self.residual() > tol_identity:
            return False
        return all(g.margin >= -tol_psd * max(1.0, float(np.abs(g.gram).max(initial=0.0))) for g in self.grams())

    def to_dict(self, names=None) -> dict:
        return {
            "kind": self.kind,
            "target": self.target.to_string(names),
            "multipliers": {k: {"factor": f.to_string(names), **g.to_dict(),
                                "poly": g.poly().to_string(names, precision=10)}
                            for k, (g, f) in self.multipliers.items()},
            "remainder": self.remainder.to_dict(),
            "identity_residual": self.residual(),
            "margin": self.margin,
            **{k: v for k, v in self.info.items()},
        }


@dataclass
class _BlockSpec:
    label: str
    phi: PowerVector
    rows: np.ndarray
    cols: np.ndarray  # 0 = constant, k+1 = scalar k
    vals: np.ndarray


class SosProgram:
    def __init__(self, num_vars: int):
        self.num_vars = num_vars
        self.num_scalars = 0
        self._blocks: list[_BlockSpec] = []
        self._eq: list[tuple[np.ndarray, np.ndarray, float]] = []
        self._objective: dict[int, float] = {}

    def new_scalars(self, k: int) -> np.ndarray:
        idx = np.arange(self.num_scalars, self.num_scalars + k)
        self.num_scalars += k
        return idx

    # -- blocks -----------------------------------------------------------
    def _image_block(self, phi: PowerVector, label: str) -> LinPoly:
        l = len(phi)
        iu, ju = np.triu_indices(l)
        idx = self.new_scalars(len(iu))
        rows = np.concatenate([iu * l + ju, (ju * l + iu)[iu != ju]])
        cols = np.concatenate([idx, idx[iu != ju]]) + 1
        self._blocks.append(_BlockSpec(label, phi, rows, cols, np.ones(len(rows))))
        monos = np.array(phi.monomials, dtype=np.int64).reshape(l, phi.num_vars)
        pm = monos[iu] + monos[ju]
        weight = np.where(iu == ju, 1.0, 2.0)
        return LinPoly(phi.num_vars, pm, idx + 1, weight)

    def sos_multiplier(self, half_degree: int, label: str, num_vars: int | None = None) -> LinPoly:
        """Fresh SOS polynomial ``phi^T S phi`` with ``S`` PSD (entries are scalars)."""
        n = self.num_vars if num_vars is None else num_vars
        return self._image_block(power_vector(n, half_degree), label)

    def require_sos(self, p: LinPoly, label: str, half_degree: int | None = None, prune: bool = True) -> None:
        """Constrain ``p`` to be SOS over ``phi(n, half_degree)``, pruned when possible."""
        n = p.num_vars
        d = max(1, math.ceil(p.degree / 2)) if half_degree is None else half_degree
        if p.degree > 2 * d:
            raise ValueError(f"{label}: degree {p.degree} exceeds 2*{d}")
        phi = power_vector(n, d)
        uniq, inv, cols, vals = p.grouped()
        if prune:
            small = prune_basis(phi, uniq)
            if len(small) < len(phi):
                g = self._image_block(small, label)
                self.require_zero(p - g)
                return
        l = len(phi)
        table = _pair_table(n, d)
        pos = np.array([table.canonical[tuple(m)] for m in uniq.tolist()], dtype=np.int64).reshape(-1, 2)
        i, j = pos[inv, 0], pos[inv, 1]
        off = i != j
        v = np.where(off, vals / 2.0, vals)
        rows = np.concatenate([i * l + j, (j * l + i)[off]])
        c = np.concatenate([cols, cols[off]])
        v = np.concatenate([v, v[off]])
        ks, nr, nc, nv = null_basis_entries(n, d)
        n_null = int(ks.max()) + 1 if len(ks) else 0
        delta = self.new_scalars(n_null)
        rows = np.concatenate([rows, nr * l + nc])
        c = np.concatenate([c, delta[ks] + 1 if n_null else np.zeros(0, dtype=np.int64)])
        v = np.concatenate([v, nv])
        self._blocks.append(_BlockSpec(label, phi, rows, c, v))

    def trace_objective(self, label: str) -> dict[int, float]:
        """Trace of a block as a linear functional of the scalars (constant dropped)."""
        for b in self._blocks:
            if b.label == label:
                side = len(b.phi)
                diag = (b.rows // side == b.rows % side) & (b.cols > 0)
                out: dict[int, float] = {}
                for c, v in zip(b.cols[diag] - 1, b.vals[diag]):
                    out[int(c)] = out.get(int(c), 0.0) + float(v)
                return out
        raise KeyError(label)

    def block_trace_constant(self, label: str) -> float:
        for b in self._blocks:
            if b.label == label:
                side = len(b.phi)
                diag = (b.rows // side == b.rows % side) & (b.cols == 0)
                return float(b.vals[diag].sum())
        raise KeyError(label)

    def require_zero(self, p: LinPoly) -> None:
        """Every coefficient of ``p`` equals zero."""
        uniq, inv, cols, vals = p.grouped()
        for k in range(len(uniq)):
            sel = inv == k
            c, v = cols[sel], vals[sel]
            const = float(v[c == 0].sum())
            self._eq.append((c[c != 0] - 1, v[c != 0], -const))

    def require_equal_scalar(self, coeffs: dict[int, float], rhs: float) -> None:
        self._eq.append((np.array(list(coeffs), dtype=np.int64), np.array(list(coeffs.values()), float), rhs))

    def minimize(self, coeffs: dict[int, float]) -> None:
        self._objective = dict(coeffs)

    # -- assembly ---------------------------------------------------------
    def conic(self) -> ConicProgram:
        n = self.num_scalars
        blocks = []
        for b in self._blocks:
            side = len(b.phi)
            const = np.zeros(side * side)
            cm = b.cols == 0
            np.add.at(const, b.rows[cm], b.vals[cm])
            coeffs = sp.csr_matrix((b.vals[~cm], (b.rows[~cm], b.cols[~cm] - 1)), shape=(side * side, n))
            coeffs.sum_duplicates()
            blocks.append(PsdBlock(const.reshape(side, side), coeffs, b.label))
        eq = rhs = None
        if self._eq:
            r = np.concatenate([np.full(len(c), k) for k, (c, _, _) in enumerate(self._eq)])
            c = np.concatenate([c for c, _, _ in self._eq])
            v = np.concatenate([v for _, v, _ in self._eq])
            eq = sp.csr_matrix((v, (r, c)), shape=(len(self._eq), n))
            rhs = np.array([b for _, _, b in self._eq])
        obj = None
        if self._objective:
            obj = np.zeros(n)
            for k, a in self._objective.items():
                obj[k] += a
        return ConicProgram(n, blocks, eq, rhs, obj)

    def gram(self, label: str, outcome: ConicOutcome, program: ConicProgram) -> GramWitness:
        for spec, block in zip(self._blocks, program.blocks):
            if spec.label == label:
                return GramWitness(label, spec.phi, block.value(outcome.witness))
        raise KeyError(label)
