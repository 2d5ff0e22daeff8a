"""Sparse multivariate polynomials and Square Matrix Representation (SMR).

Polynomials are dictionaries from exponent tuples to float coefficients.
Monomials are ordered graded-lexicographically, ascending in total degree and,
within one degree, with ``x1``-heavy monomials first::

    n=2, d=2:  1, x1, x2, x1^2, x1*x2, x2^2

Gram positions generating a monomial are chosen by a fixed rule: among all
pairs ``(i, j)`` with ``phi[i] * phi[j] == m`` the most balanced pair
(smallest degree gap) wins, ties broken by the lowest index. Square monomials
therefore always land on the diagonal and the remaining pairs span the null
space of the representation.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

Monomial = tuple[int, ...]

# Upper bound on the side of any Gram matrix we agree to build.
MAX_BASIS_SIZE = 200_000


class CapacityError(ValueError):
    """Raised when an SMR dimension is too large to represent."""


class DimensionError(ValueError):
    """Raised on mismatched variable counts or basis sizes."""


def monomial_key(m: Monomial) -> tuple:
    return (sum(m), tuple(-e for e in m))


class Polynomial:
    """Immutable sparse polynomial in ``num_vars`` real variables."""

    __slots__ = ("num_vars", "_terms")

    def __init__(self, num_vars: int, terms: Mapping[Monomial, float] | None = None):
        if num_vars < 1:
            raise DimensionError("num_vars must be positive")
        clean: dict[Monomial, float] = {}
        for mono, coef in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != num_vars:
                raise DimensionError(
                    f"monomial {mono} has {len(mono)} exponents, expected {num_vars}"
                )
            if any(e < 0 for e in mono):
                raise ValueError(f"negative exponent in {mono}")
            coef = float(coef)
            if coef != 0.0:
                clean[mono] = clean.get(mono, 0.0) + coef
        self.num_vars = num_vars
        self._terms = {m: c for m, c in clean.items() if c != 0.0}

    # construction -----------------------------------------------------------------
    @classmethod
    def constant(cls, num_vars: int, value: float) -> Polynomial:
        return cls(num_vars, {(0,) * num_vars: value})

    @classmethod
    def zero(cls, num_vars: int) -> Polynomial:
        return cls(num_vars)

    @classmethod
    def variable(cls, num_vars: int, index: int) -> Polynomial:
        """The coordinate polynomial ``x_{index+1}`` (0-based index)."""
        if not 0 <= index < num_vars:
            raise DimensionError(f"variable index {index} out of range")
        mono = [0] * num_vars
        mono[index] = 1
        return cls(num_vars, {tuple(mono): 1.0})

    @classmethod
    def monomial(cls, exponents: Sequence[int], coef: float = 1.0) -> Polynomial:
        return cls(len(exponents), {tuple(exponents): coef})

    @classmethod
    def parse(cls, text: str, num_vars: int) -> Polynomial:
        return parse_polynomial(text, num_vars)

    # inspection -------------------------------------------------------------------
    @property
    def terms(self) -> dict[Monomial, float]:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def coefficient(self, mono: Monomial) -> float:
        return self._terms.get(tuple(mono), 0.0)

    def monomials(self) -> list[Monomial]:
        return sorted(self._terms, key=monomial_key)

    @property
    def degree(self) -> int:
        """Total degree; the zero polynomial has degree 0."""
        return max((sum(m) for m in self._terms), default=0)

    @property
    def min_degree(self) -> int:
        return min((sum(m) for m in self._terms), default=0)

    def is_zero(self) -> bool:
        return not self._terms

    def max_abs_coefficient(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    def __len__(self) -> int:
        return len(self._terms)

    def __iter__(self):
        return iter(self._terms.items())

    # arithmetic -------------------------------------------------------------------
    def _check(self, other: Polynomial) -> None:
        if other.num_vars != self.num_vars:
            raise DimensionError(
                f"cannot combine polynomials in {self.num_vars} and {other.num_vars} variables"
            )

    def _coerce(self, other) -> Polynomial:
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.num_vars, float(other))
        return NotImplemented

    def __add__(self, other) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        terms = dict(self._terms)
        for m, c in other._terms.items():
            terms[m] = terms.get(m, 0.0) + c
        return Polynomial(self.num_vars, terms)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return Polynomial(self.num_vars, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other) -> Polynomial:
        return (-self) + other

    def scale(self, a: float) -> Polynomial:
        a = float(a)
        return Polynomial(self.num_vars, {m: a * c for m, c in self._terms.items()})

    def __mul__(self, other) -> Polynomial:
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        self._check(other)
        terms: dict[Monomial, float] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                terms[m] = terms.get(m, 0.0) + c1 * c2
        return Polynomial(self.num_vars, terms)

    __rmul__ = __mul__

    def __truediv__(self, a: float) -> Polynomial:
        return self.scale(1.0 / a)

    def __pow__(self, k: int) -> Polynomial:
        if k < 0 or int(k) != k:
            raise ValueError("only non-negative integer powers")
        out = Polynomial.constant(self.num_vars, 1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.num_vars == other.num_vars and self._terms == other._terms

    def __hash__(self) -> int:
        return hash((self.num_vars, frozenset(self._terms.items())))

    def almost_equal(self, other: Polynomial, tol: float = 1e-9) -> bool:
        """Coefficient-wise comparison, ``tol`` scaled by the largest coefficient."""
        self._check(other)
        scale = max(1.0, self.max_abs_coefficient(), other.max_abs_coefficient())
        return (self - other).max_abs_coefficient() <= tol * scale

    def prune(self, tol: float) -> Polynomial:
        return Polynomial(self.num_vars, {m: c for m, c in self._terms.items() if abs(c) > tol})

    # calculus / evaluation --------------------------------------------------------
    def derivative(self, index: int) -> Polynomial:
        terms: dict[Monomial, float] = {}
        for m, c in self._terms.items():
            e = m[index]
            if e:
                dm = list(m)
                dm[index] = e - 1
                terms[tuple(dm)] = terms.get(tuple(dm), 0.0) + c * e
        return Polynomial(self.num_vars, terms)

    def gradient(self) -> list[Polynomial]:
        return [self.derivative(i) for i in range(self.num_vars)]

    def evaluate(self, point) -> float | np.ndarray:
        """Evaluate at a point of shape ``(n,)`` or a batch of shape ``(..., n)``."""
        x = np.asarray(point, dtype=float)
        if x.shape[-1] != self.num_vars:
            raise DimensionError(f"point has {x.shape[-1]} coordinates, expected {self.num_vars}")
        out = np.zeros(x.shape[:-1])
        for m, c in self._terms.items():
            term = np.full(x.shape[:-1], c)
            for v, e in enumerate(m):
                if e:
                    term = term * x[..., v] ** e
            out = out + term
        if out.ndim == 0:
            return float(out)
        return out

    def __call__(self, point):
        return self.evaluate(point)

    def substitute(self, images: Sequence[Polynomial]) -> Polynomial:
        """Compose ``p(images[0], ..., images[n-1])``."""
        if len(images) != self.num_vars:
            raise DimensionError("need one image polynomial per variable")
        k = images[0].num_vars
        cache: dict[tuple[int, int], Polynomial] = {}

        def power(v: int, e: int) -> Polynomial:
            if (v, e) not in cache:
                cache[(v, e)] = images[v] ** e
            return cache[(v, e)]

        out = Polynomial.zero(k)
        for m, c in self._terms.items():
            term = Polynomial.constant(k, c)
            for v, e in enumerate(m):
                if e:
                    term = term * power(v, e)
            out = out + term
        return out

    def substitute_affine(self, A, b) -> Polynomial:
        """Compose with the affine map ``x = A @ y + b``; ``A`` has shape ``(n, k)``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).reshape(-1)
        if A.shape[0] != self.num_vars or b.shape[0] != self.num_vars:
            raise DimensionError(
                f"affine map has shape {A.shape}/{b.shape}, expected {self.num_vars} rows"
            )
        k = A.shape[1]
        images = []
        for row, off in zip(A, b):
            terms = {tuple(int(i == j) for i in range(k)): a for j, a in enumerate(row)}
            terms[(0,) * k] = off
            images.append(Polynomial(k, terms))
        return self.substitute(images)

    def embed(self, num_vars: int, indices: Sequence[int]) -> Polynomial:
        """Re-express in ``num_vars`` variables, old variable ``v`` becoming ``indices[v]``."""
        terms = {}
        for m, c in self._terms.items():
            nm = [0] * num_vars
            for v, e in enumerate(m):
                nm[indices[v]] += e
            terms[tuple(nm)] = terms.get(tuple(nm), 0.0) + c
        return Polynomial(num_vars, terms)

    # text ---------------------------------------------------------------------------
    def to_string(self, names: Sequence[str] | None = None, precision: int | None = None) -> str:
        if not self._terms:
            return "0"
        names = names or [f"x{i + 1}" for i in range(self.num_vars)]
        parts = []
        for m in sorted(self._terms, key=monomial_key, reverse=True):
            c = self._terms[m]
            factors = [
                names[v] if e == 1 else f"{names[v]}^{e}" for v, e in enumerate(m) if e
            ]
            mag = abs(c)
            coef = repr(mag) if precision is None else f"{mag:.{precision}g}"
            if coef.endswith(".0"):
                coef = coef[:-2]
            if factors:
                body = "*".join(factors) if mag == 1.0 else coef + "*" + "*".join(factors)
            else:
                body = coef
            parts.append(("- " if c < 0 else "+ ") + body)
        text = " ".join(parts)
        return text[2:] if text.startswith("+ ") else "-" + text[2:]

    def __repr__(self) -> str:
        return f"Polynomial({self.num_vars}, {self.to_string(precision=6)!r})"

    __str__ = to_string


_NUMBER = re.compile(r"^(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_VARPOW = re.compile(r"^x(\d+)(?:\^(\d+))?$")


def _split_terms(text: str) -> list[str]:
    terms, start = [], 0
    for i, ch in enumerate(text):
        if ch not in "+-" or i == start:
            continue
        prev = text[i - 1]
        if prev in "+-*^":
            continue
        # sign of a scientific-notation exponent, e.g. 2.5e-3
        if prev in "eE" and i >= 2 and (text[i - 2].isdigit() or text[i - 2] == "."):
            continue
        terms.append(text[start:i])
        start = i
    terms.append(text[start:])
    return [t for t in terms if t]


def parse_polynomial(text: str, num_vars: int) -> Polynomial:
    """Parse ``3*x1^4 + 4*x1^3 - x1*x2 + 7``-style text over ``x1..x{num_vars}``."""
    src = "".join(text.split())
    if not src:
        raise ValueError("empty polynomial text")
    out: dict[Monomial, float] = {}
    for raw in _split_terms(src):
        sign = 1.0
        body = raw
        while body and body[0] in "+-":
            if body[0] == "-":
                sign = -sign
            body = body[1:]
        if not body:
            raise ValueError(f"dangling sign in {text!r}")
        coef = sign
        mono = [0] * num_vars
        for factor in body.split("*"):
            if _NUMBER.match(factor):
                coef *= float(factor)
                continue
            vm = _VARPOW.match(factor)
            if not vm:
                raise ValueError(f"cannot parse factor {factor!r} in {text!r}")
            v = int(vm.group(1))
            if not 1 <= v <= num_vars:
                raise DimensionError(f"variable x{v} outside x1..x{num_vars}")
            mono[v - 1] += int(vm.group(2) or 1)
        out[tuple(mono)] = out.get(tuple(mono), 0.0) + coef
    return Polynomial(num_vars, out)


# ---------------------------------------------------------------------------------------
# Power vectors and SMR
# ---------------------------------------------------------------------------------------


def smr_dimensions(n: int, d: int) -> tuple[int, int]:
    """Return ``(l, theta)``: power-vector length and null-space dimension."""
    if n < 1 or d < 0:
        raise ValueError("need n >= 1 and d >= 0")
    l = math.comb(n + d, d)
    if l > MAX_BASIS_SIZE:
        raise CapacityError(f"power vector phi({n}, {d}) has {l} entries")
    theta = l * (l + 1) // 2 - math.comb(n + 2 * d, 2 * d)
    return l, theta


@dataclass(frozen=True)
class PowerVector:
    num_vars: int
    max_degree: int
    monomials: tuple[Monomial, ...]
    index: Mapping[Monomial, int] = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.monomials)

    def __iter__(self):
        return iter(self.monomials)

    def __getitem__(self, i: int) -> Monomial:
        return self.monomials[i]

    def degrees(self) -> np.ndarray:
        return np.array([sum(m) for m in self.monomials])

    def evaluate(self, point) -> np.ndarray:
        """Monomial values at a point (or batch, last axis = variables)."""
        x = np.asarray(point, dtype=float)
        cols = []
        for m in self.monomials:
            v = np.ones(x.shape[:-1])
            for k, e in enumerate(m):
                if e:
                    v = v * x[..., k] ** e
            cols.append(v)
        return np.stack(cols, axis=-1)

    def quadratic_form(self, matrix) -> Polynomial:
        """Expand ``phi^T M phi`` into a polynomial."""
        M = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
        terms: dict[Monomial, float] = {}
        rows, cols = np.nonzero(M)
        for i, j in zip(rows, cols):
            m = tuple(a + b for a, b in zip(self.monomials[i], self.monomials[j]))
            terms[m] = terms.get(m, 0.0) + M[i, j]
        return Polynomial(self.num_vars, terms)


@lru_cache(maxsize=64)
def power_vector(n: int, d: int) -> PowerVector:
    """All monomials in ``n`` variables of degree ``<= d`` in canonical order."""
    smr_dimensions(n, d)
    monos: list[Monomial] = []
    for k in range(d + 1):
        for combo in itertools.combinations_with_replacement(range(n), k):
            m = [0] * n
            for v in combo:
                m[v] += 1
            monos.append(tuple(m))
    return PowerVector(n, d, tuple(monos), {m: i for i, m in enumerate(monos)})


def sub_power_vector(phi: PowerVector, monomials) -> PowerVector:
    """Power vector over a subset of monomials, kept in canonical order."""
    monos = sorted({tuple(int(e) for e in m) for m in monomials}, key=monomial_key)
    if any(len(m) != phi.num_vars for m in monos):
        raise DimensionError("monomial length does not match the power vector")
    d = max((sum(m) for m in monos), default=0)
    return PowerVector(phi.num_vars, d, tuple(monos), {m: i for i, m in enumerate(monos)})


@dataclass(frozen=True)
class _PairTable:
    canonical: Mapping[Monomial, tuple[int, int]]
    others: Mapping[Monomial, tuple[tuple[int, int], ...]]


@lru_cache(maxsize=64)
def _pair_table(n: int, d: int) -> _PairTable:
    phi = power_vector(n, d)
    degs = phi.degrees()
    groups: dict[Monomial, list[tuple[int, int]]] = {}
    monos = phi.monomials
    for i in range(len(monos)):
        mi = monos[i]
        for j in range(i, len(monos)):
            m = tuple(a + b for a, b in zip(mi, monos[j]))
            groups.setdefault(m, []).append((i, j))
    canonical, others = {}, {}
    for m, pairs in groups.items():
        best = min(pairs, key=lambda p: (abs(int(degs[p[0]]) - int(degs[p[1]])), p))
        canonical[m] = best
        others[m] = tuple(p for p in pairs if p != best)
    return _PairTable(canonical, others)


def smr_lift_entries(p: Polynomial, phi: PowerVector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """COO triplets (full symmetric storage) of the SMR matrix of ``p`` over ``phi``."""
    if p.num_vars != phi.num_vars:
        raise DimensionError("polynomial and power vector disagree on variable count")
    if p.degree > 2 * phi.max_degree:
        raise DimensionError(
            f"degree {p.degree} exceeds what phi(n, {phi.max_degree}) can represent"
        )
    table = _pair_table(phi.num_vars, phi.max_degree)
    rows, cols, vals = [], [], []
    for m, c in p.items():
        i, j = table.canonical[m]
        if i == j:
            rows.append(i)
            cols.append(i)
            vals.append(c)
        else:
            rows += [i, j]
            cols += [j, i]
            vals += [c / 2.0, c / 2.0]
    return np.array(rows, dtype=int), np.array(cols, dtype=int), np.array(vals, dtype=float)


def smr_lift(p: Polynomial, phi: PowerVector) -> np.ndarray:
    """Symmetric matrix ``M`` with ``phi^T M phi == p``."""
    r, c, v = smr_lift_entries(p, phi)
    out = np.zeros((len(phi), len(phi)))
    np.add.at(out, (r, c), v)
    return out


def null_basis_entries(n: int, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Null-space basis as COO quadruplets ``(k, row, col, val)``.

    Matrix ``k`` couples a non-canonical pair ``(a, b)`` of some monomial with
    that monomial's canonical pair ``(i, j)`` so that the quadratic form cancels.
    """
    table = _pair_table(n, d)
    ks, rows, cols, vals = [], [], [], []
    k = 0
    for m in sorted(table.others, key=monomial_key):
        i, j = table.canonical[m]
        w0 = 1 if i == j else 2
        for a, b in table.others[m]:
            w1 = 1 if a == b else 2
            # canonical entry gets w1, the other gets -w0: w1*w0 - w0*w1 == 0
            for (r, c, v) in _sym_entries(i, j, w1) + _sym_entries(a, b, -w0):
                ks.append(k)
                rows.append(r)
                cols.append(c)
                vals.append(v)
            k += 1
    return (np.array(ks, dtype=int), np.array(rows, dtype=int),
            np.array(cols, dtype=int), np.array(vals, dtype=float))


def _sym_entries(i: int, j: int, v: float) -> list[tuple[int, int, float]]:
    if i == j:
        return [(i, i, float(v))]
    return [(i, j, float(v)), (j, i, float(v))]


def smr_null_basis(n: int, d: int) -> list[sp.csr_matrix]:
    """Linearly independent symmetric matrices ``N`` with ``phi^T N phi == 0``."""
    l, theta = smr_dimensions(n, d)
    ks, rows, cols, vals = null_basis_entries(n, d)
    out = []
    order = np.argsort(ks, kind="stable")
    ks, rows, cols, vals = ks[order], rows[order], cols[order], vals[order]
    bounds = np.searchsorted(ks, np.arange(theta + 1))
    for k in range(theta):
        s, e = bounds[k], bounds[k + 1]
        out.append(sp.csr_matrix((vals[s:e], (rows[s:e], cols[s:e])), shape=(l, l)))
    return out


@dataclass(frozen=True)
class SmrForm:
    """``p = phi^T (base + sum_k delta_k N_k) phi`` for every ``delta``."""

    phi: PowerVector
    base: np.ndarray
    null_basis: list

    def gram(self, delta: Iterable[float] | None = None) -> np.ndarray:
        G = self.base.copy()
        if delta is not None:
            for dk, N in zip(delta, self.null_basis):
                if dk:
                    G = G + dk * N.toarray()
        return G

    def reconstruct(self, delta: Iterable[float] | None = None) -> Polynomial:
        return self.phi.quadratic_form(self.gram(delta))


def half_degree(p: Polynomial) -> int:
    return math.ceil(p.degree / 2)


def smr_of(p: Polynomial) -> SmrForm:
    d = half_degree(p)
    phi = power_vector(p.num_vars, d)
    return SmrForm(phi, smr_lift(p, phi), smr_null_basis(p.num_vars, d))


class PolyEvaluator:
    """Batched evaluation of several polynomials sharing one monomial table."""

    def __init__(self, polys: Sequence[Polynomial]):
        if not polys:
            raise ValueError("need at least one polynomial")
        self.num_vars = polys[0].num_vars
        monos = sorted({m for p in polys for m in p._terms}, key=monomial_key)
        idx = {m: i for i, m in enumerate(monos)}
        self.exponents = np.array(monos, dtype=int).reshape(len(monos), self.num_vars)
        self.coefs = np.zeros((len(monos), len(polys)))
        for k, p in enumerate(polys):
            if p.num_vars != self.num_vars:
                raise DimensionError("mixed variable counts")
            for m, c in p._terms.items():
                self.coefs[idx[m], k] = c
        self.max_exp = int(self.exponents.max(initial=0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        if len(self.exponents) == 0:
            return np.zeros(batch + (self.coefs.shape[1],))
        # keep the (points x monomials) table near 2**22 entries
        rows = max(1, (1 << 22) // len(self.exponents))
        flat = x.reshape(-1, self.num_vars)
        if len(flat) > rows:
            out = np.vstack([self._eval(flat[k:k + rows]) for k in range(0, len(flat), rows)])
            return out.reshape(batch + (self.coefs.shape[1],))
        return self._eval(x)

    def _eval(self, x: np.ndarray) -> np.ndarray:
        batch = x.shape[:-1]
        powers = [np.ones_like(x)]
        for _ in range(self.max_exp):
            powers.append(powers[-1] * x)
        mons = np.ones(batch + (len(self.exponents),))
        for v in range(self.num_vars):
            col = self.exponents[:, v]
            if col.any():
                stack = np.stack([powers[e][..., v] for e in range(self.max_exp + 1)], axis=-1)
                mons = mons * stack[..., col]
        return mons @ self.coefs
