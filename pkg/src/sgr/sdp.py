"""Semidefinite feasibility / linear-objective interface.

Programs are stated over a vector of free scalars ``x``.  Each PSD block is an
affine symmetric map ``F0 + sum_k x_k F_k`` stored as the dense constant plus
a sparse ``(side*side, num_scalars)`` matrix whose column ``k`` is the
row-major flattening of ``F_k``.  Equalities are ``A x = b``.

Solving goes through cvxpy (Clarabel by default).  Every witness the solver
returns is re-checked here by direct eigenvalue computation; the solver's own
status is never trusted on its own.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

TOL_PSD = 1e-8
TOL_OBJ = 1e-6
TOL_EQ = 1e-7
MARGIN_CAP = 1.0


def default_tol_psd() -> float:
    env = os.environ.get("SGR_SOLVER_TOL")
    return float(env) if env else TOL_PSD


@dataclass
class PsdBlock:
    constant: np.ndarray
    coeffs: sp.csr_matrix
    label: str = ""

    @property
    def side(self) -> int:
        return self.constant.shape[0]

    def value(self, x: np.ndarray) -> np.ndarray:
        k = self.side
        M = self.constant + (self.coeffs @ x).reshape(k, k)
        return 0.5 * (M + M.T)

    def check(self, num_scalars: int, tol: float = 1e-12) -> None:
        k = self.side
        if self.constant.shape != (k, k) or self.coeffs.shape != (k * k, num_scalars):
            raise ValueError(f"block {self.label!r}: inconsistent dimensions")
        if not np.allclose(self.constant, self.constant.T, atol=tol):
            raise ValueError(f"block {self.label!r}: constant matrix not symmetric")
        # row r*k+c must equal row c*k+r for symmetric coefficient matrices
        perm = np.arange(k * k).reshape(k, k).T.ravel()
        diff = self.coeffs - self.coeffs[perm]
        if diff.nnz and abs(diff).max() > tol:
            raise ValueError(f"block {self.label!r}: coefficient matrices not symmetric")


@dataclass
class ConicProgram:
    num_scalars: int
    blocks: list[PsdBlock] = field(default_factory=list)
    eq_matrix: sp.csr_matrix | None = None
    eq_rhs: np.ndarray | None = None
    objective: np.ndarray | None = None

    def validate(self) -> None:
        for b in self.blocks:
            b.check(self.num_scalars)
        if self.eq_matrix is not None and self.eq_matrix.shape[1] != self.num_scalars:
            raise ValueError("equality matrix has wrong column count")
        if self.objective is not None and len(self.objective) != self.num_scalars:
            raise ValueError("objective has wrong length")

    def block_margins(self, x: np.ndarray) -> list[float]:
        return [float(np.linalg.eigvalsh(b.value(x))[0]) if b.side else np.inf for b in self.blocks]

    def equality_residual(self, x: np.ndarray) -> float:
        if self.eq_matrix is None or self.eq_matrix.shape[0] == 0:
            return 0.0
        return float(np.abs(self.eq_matrix @ x - self.eq_rhs).max())

    def with_extra_scalars(self, k: int) -> ConicProgram:
        """Same program with ``k`` additional scalars that appear nowhere."""
        n = self.num_scalars + k
        blocks = [PsdBlock(b.constant, sp.hstack([b.coeffs, sp.csr_matrix((b.side**2, k))]).tocsr(), b.label)
                  for b in self.blocks]
        eq = None if self.eq_matrix is None else sp.hstack(
            [self.eq_matrix, sp.csr_matrix((self.eq_matrix.shape[0], k))]).tocsr()
        obj = None if self.objective is None else np.concatenate([self.objective, np.zeros(k)])
        return ConicProgram(n, blocks, eq, self.eq_rhs, obj)


@dataclass
class ConicOutcome:
    status: str  # feasible | infeasible | unknown | unbounded
    witness: np.ndarray | None = None
    margin: float = -np.inf
    objective: float | None = None
    diagnostics: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


def _scale(block: PsdBlock, x: np.ndarray) -> float:
    return max(1.0, float(np.abs(block.value(x)).max()))


def _verified_margin(p: ConicProgram, x: np.ndarray) -> tuple[float, float]:
    """(worst scaled min-eigenvalue, equality residual) at ``x``."""
    worst = np.inf
    for b in p.blocks:
        if b.side == 0:
            continue
        ev = float(np.linalg.eigvalsh(b.value(x))[0])
        worst = min(worst, ev / _scale(b, x))
    return worst, p.equality_residual(x)


def _eq_scale(p: ConicProgram) -> float:
    if p.eq_rhs is None or len(p.eq_rhs) == 0:
        return 1.0
    return max(1.0, float(np.abs(p.eq_rhs).max()))


def _fixed_outcome(p: ConicProgram, tol: float) -> ConicOutcome:
    """Program without free scalars: just evaluate it."""
    x = np.zeros(0)
    margin, res = _verified_margin(p, x)
    ok = margin >= -tol and res <= TOL_EQ * _eq_scale(p)
    return ConicOutcome("feasible" if ok else "infeasible", x, margin, diagnostics="no decision scalars")


def _build(p: ConicProgram, x, t=None):
    cons = []
    for b in p.blocks:
        k = b.side
        if k == 0:
            continue
        M = b.constant + cp.reshape(b.coeffs @ x, (k, k), order="C")
        M = 0.5 * (M + M.T)
        cons.append(M >> (t * np.eye(k) if t is not None else 0))
    if p.eq_matrix is not None and p.eq_matrix.shape[0]:
        cons.append(p.eq_matrix @ x == p.eq_rhs)
    return cons


def _solve(prob: cp.Problem, solver: str | None) -> str:
    order = [solver] if solver else ["CLARABEL", "SCS"]
    last = ""
    for name in order:
        try:
            prob.solve(solver=name)
            return prob.status
        except cp.error.SolverError as exc:
            last = f"{name}: {exc}"
            log.debug("solver %s failed: %s", name, exc)
    return "solver_error: " + last


def solve_feasibility(p: ConicProgram, tol_psd: float | None = None, solver: str | None = None) -> ConicOutcome:
    """Decide whether all blocks can be made PSD simultaneously.

    Phase one solves the plain feasibility problem; its witness is accepted
    only after independent eigenvalue and residual checks, and an
    infeasibility certificate from the solver is taken at face value.  If
    phase one is inconclusive, phase two maximises a common eigenvalue margin
    ``t <= 1``: an optimal ``t`` clearly below zero is infeasibility evidence.
    """
    tol = default_tol_psd() if tol_psd is None else tol_psd
    p.validate()
    if p.num_scalars == 0:
        return _fixed_outcome(p, tol)
    x = cp.Variable(p.num_scalars)
    prob = cp.Problem(cp.Minimize(0), _build(p, x))
    status = _solve(prob, solver)
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return ConicOutcome("infeasible", diagnostics=f"solver status {status}")
    first = ""
    if x.value is not None:
        xv = np.asarray(x.value, dtype=float)
        margin, res = _verified_margin(p, xv)
        if margin >= -tol and res <= TOL_EQ * _eq_scale(p):
            return ConicOutcome("feasible", xv, margin, diagnostics=f"status {status}")
        first = f"phase one: status {status}, margin {margin:.3e}, eq residual {res:.3e}; "

    x = cp.Variable(p.num_scalars)
    t = cp.Variable()
    prob = cp.Problem(cp.Maximize(t), _build(p, x, t) + [t <= MARGIN_CAP])
    status = _solve(prob, solver)
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return ConicOutcome("infeasible", diagnostics=first + f"solver status {status}")
    if x.value is None or t.value is None:
        return ConicOutcome("unknown", diagnostics=first + f"solver status {status}")
    xv = np.asarray(x.value, dtype=float)
    margin, res = _verified_margin(p, xv)
    tval = float(t.value)
    if margin >= -tol and res <= TOL_EQ * _eq_scale(p):
        return ConicOutcome("feasible", xv, margin, diagnostics=first + f"t*={tval:.3e}, status {status}")
    if status == cp.OPTIMAL and tval < -max(1e3 * tol, 1e-6):
        return ConicOutcome("infeasible", xv, margin, diagnostics=first + f"optimal margin t*={tval:.3e} < 0")
    return ConicOutcome("unknown", xv, margin,
                        diagnostics=first + f"status {status}, t*={tval:.3e}, verified margin {margin:.3e}, "
                        f"eq residual {res:.3e}")


def solve_min_linear(p: ConicProgram, tol_psd: float | None = None, solver: str | None = None,
                     tol_obj: float = TOL_OBJ) -> ConicOutcome:
    """Minimise ``objective . x`` over the program; the witness is re-verified."""
    if p.objective is None:
        raise ValueError("program has no objective")
    tol = default_tol_psd() if tol_psd is None else tol_psd
    p.validate()
    if p.num_scalars == 0:
        out = _fixed_outcome(p, tol)
        out.objective = 0.0
        return out
    x = cp.Variable(p.num_scalars)
    prob = cp.Problem(cp.Minimize(p.objective @ x), _build(p, x))
    status = _solve(prob, solver)
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return ConicOutcome("infeasible", diagnostics=f"solver status {status}")
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        return ConicOutcome("unbounded", diagnostics=f"solver status {status}")
    if x.value is None:
        return ConicOutcome("unknown", diagnostics=f"solver status {status}")
    xv = np.asarray(x.value, dtype=float)
    margin, res = _verified_margin(p, xv)
    obj = float(p.objective @ xv)
    if margin >= -tol and res <= TOL_EQ * _eq_scale(p):
        return ConicOutcome("feasible", xv, margin, obj, diagnostics=f"status {status}")
    # back off from the boundary: any point within tol_obj of the optimum will do
    bound = obj + tol_obj * max(1.0, abs(obj))
    cut = PsdBlock(np.array([[bound]]), sp.csr_matrix(-p.objective.reshape(1, -1)), "objective cut")
    relaxed = ConicProgram(p.num_scalars, p.blocks + [cut], p.eq_matrix, p.eq_rhs)
    out = solve_feasibility(relaxed, tol, solver)
    if out.feasible:
        out.objective = float(p.objective @ out.witness)
        out.margin = _verified_margin(p, out.witness)[0]
        out.diagnostics = f"backed off from optimum {obj:.10g}; " + out.diagnostics
        return out
    return ConicOutcome("unknown", xv, margin, obj,
                        diagnostics=f"status {status}, verified margin {margin:.3e}, eq residual {res:.3e}")


def write_sdpa(p: ConicProgram, path) -> None:
    """Dump in sparse SDPA format: ``sum_k x_k F_k - F0 >= 0`` with ``F0 = -constant``.

    Equalities become a diagonal (LP) block holding both inequality directions.
    """
    p.validate()
    blocks = [b for b in p.blocks if b.side]
    n_eq = 0 if p.eq_matrix is None else p.eq_matrix.shape[0]
    struct = [b.side for b in blocks] + ([-2 * n_eq] if n_eq else [])
    c = p.objective if p.objective is not None else np.zeros(p.num_scalars)
    lines = [str(p.num_scalars), str(len(struct)), " ".join(map(str, struct)),
             " ".join(f"{v:.17g}" for v in c)]
    for bi, b in enumerate(blocks, start=1):
        k = b.side
        F0 = -b.constant
        for i in range(k):
            for j in range(i, k):
                if F0[i, j] != 0:
                    lines.append(f"0 {bi} {i + 1} {j + 1} {F0[i, j]:.17g}")
        coo = b.coeffs.tocoo()
        for r, s, v in zip(coo.row, coo.col, coo.data):
            i, j = divmod(int(r), k)
            if i <= j and v != 0:
                lines.append(f"{s + 1} {bi} {i + 1} {j + 1} {v:.17g}")
    if n_eq:
        bi = len(blocks) + 1
        A = p.eq_matrix.tocoo()
        for e, bval in enumerate(p.eq_rhs):
            if bval != 0:
                lines.append(f"0 {bi} {2 * e + 1} {2 * e + 1} {bval:.17g}")
                lines.append(f"0 {bi} {2 * e + 2} {2 * e + 2} {-bval:.17g}")
        for r, s, v in zip(A.row, A.col, A.data):
            lines.append(f"{s + 1} {bi} {2 * r + 1} {2 * r + 1} {v:.17g}")
            lines.append(f"{s + 1} {bi} {2 * r + 2} {2 * r + 2} {-v:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
