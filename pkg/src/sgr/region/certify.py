"""Sublevel-set certification: decrease condition, exclusion, level maximisation.

For a candidate ``W`` and level ``c`` the decrease condition asks for SOS
``s`` (and, in the inline-multiplier mode, SOS ``r_j``) with

    -Wdot - s (c - W) - sum_j r_j w_j   SOS,

which makes ``Wdot <= 0`` on ``{W <= c}``.  The largest ``c`` is found by
bisection on ``e`` in the affine family

    P_e = e (s + sigma2 W s) + sigma1 W s - Wdot - xi,

which is the decrease condition with ``s' = (sigma1 + sigma2 e) s`` and
``c = -e / (sigma1 + sigma2 e)``; ``P_e`` grows with ``e`` whenever ``s`` and
``W`` are SOS, so feasibility is monotone in ``e``.

Each excluded block ``{w_1 > 0, ..., w_p > 0}`` is kept outside the set by
``W - c - sum_i t_i w_i`` SOS with SOS ``t_i``; the largest such ``c`` comes
from one linear-objective SDP per block.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..polynomial import Polynomial, power_vector, sub_power_vector
from ..sdp import ConicProgram, default_tol_psd, solve_feasibility, solve_min_linear
from ..system import CertificationProblem, ExcludedBlock, build_wdot
from .sos import GramWitness, LinPoly, SosCertificate, SosProgram, merge_grams

log = logging.getLogger(__name__)

EXCLUSION_SHRINK = 1e-5
BRACKET_MARGIN = 1e-3


class CertificationRefused(RuntimeError):
    """No certificate at the requested degrees (not a proof that none exists)."""

    def __init__(self, message: str, status: str = "infeasible"):
        super().__init__(message)
        self.status = status


def _even_up(k: int) -> int:
    return k + (k % 2)


def _even_down(k: int) -> int:
    return k - (k % 2)


@dataclass
class Degrees:
    """Multiplier degrees; ``None`` picks the default rule."""

    s: int | None = None
    r: int | None = None
    t: int | None = None

    def s_degree(self, W: Polynomial, wdot: Polynomial) -> int:
        if self.s is not None:
            return self.s
        return _even_up(max(wdot.degree - W.degree, 2))

    def psi_degree(self, W: Polynomial, wdot: Polynomial) -> int:
        return max(wdot.degree, self.s_degree(W, wdot) + W.degree)

    def r_degree(self, W, wdot, w: Polynomial) -> int:
        if self.r is not None:
            return self.r
        return _even_down(max(self.psi_degree(W, wdot) - w.degree, 0))

    def t_degree(self, W: Polynomial, w: Polynomial) -> int:
        if self.t is not None:
            return self.t
        return _even_down(max(W.degree - w.degree, 0))

    def to_dict(self) -> dict:
        return {"s": self.s, "r": self.r, "t": self.t}


def check_w_positive(W: Polynomial, eps: float = 1e-6, tol_psd: float | None = None) -> None:
    """Require ``W - eps*|q|^2`` SOS (positive-definite SMR form of ``W``)."""
    n = W.num_vars
    sq = Polynomial.zero(n)
    for k in range(n):
        v = Polynomial.variable(n, k)
        sq = sq + v * v
    prog = SosProgram(n)
    prog.require_sos(LinPoly.from_poly(W - sq.scale(eps)), "W")
    out = solve_feasibility(prog.conic(), tol_psd)
    if not out.feasible:
        raise ValueError(f"W is not positive definite in SMR form ({out.status}: {out.diagnostics})")


# ---------------------------------------------------------------------------
# Decrease condition
# ---------------------------------------------------------------------------


def _decrease_program(problem, W, wdot, degrees, blocks_for_r):
    prog = SosProgram(problem.num_vars)
    ds = degrees.s_degree(W, wdot)
    s = prog.sos_multiplier(ds // 2, "s")
    rs = []
    for bk, block in enumerate(blocks_for_r):
        for pk, w in enumerate(block.polys):
            rd = degrees.r_degree(W, wdot, w)
            rs.append((f"r{bk + 1}_{pk + 1}", prog.sos_multiplier(rd // 2, f"r{bk + 1}_{pk + 1}"), w))
    return prog, s, rs


def certify_level_set(
    problem: CertificationProblem,
    c: float,
    W: Polynomial | None = None,
    degrees: Degrees | None = None,
    inline_unsafe_terms: bool = False,
    tol_psd: float | None = None,
) -> SosCertificate:
    """SOS certificate that ``Wdot <= 0`` on ``{W <= c}``."""
    W = problem.W if W is None else W
    degrees = degrees or Degrees()
    wdot = build_wdot(W, problem)
    rblocks = problem.unsafe_blocks if inline_unsafe_terms else ()
    prog, s, rs = _decrease_program(problem, W, wdot, degrees, rblocks)
    expr = LinPoly.from_poly(-wdot) - s * (Polynomial.constant(W.num_vars, c) - W)
    for _, r, w in rs:
        expr = expr - r * w
    half = math.ceil(degrees.psi_degree(W, wdot) / 2)
    prog.require_sos(expr, "remainder", half)
    conic = prog.conic()
    out = solve_feasibility(conic, tol_psd)
    if not out.feasible:
        raise CertificationRefused(f"decrease condition at c={c:g}: {out.status} ({out.diagnostics})", out.status)
    mults = {"s": (prog.gram("s", out, conic), Polynomial.constant(W.num_vars, c) - W)}
    for name, _, w in rs:
        mults[name] = (prog.gram(name, out, conic), w)
    return SosCertificate("decrease", -wdot, mults, prog.gram("remainder", out, conic),
                          {"c": c, "inline_unsafe_terms": inline_unsafe_terms})


# ---------------------------------------------------------------------------
# Exclusion of a block
# ---------------------------------------------------------------------------


def _exclusion_program(W, block: ExcludedBlock, degrees: Degrees, c: float | None):
    n = W.num_vars
    prog = SosProgram(n)
    cidx = None
    if c is None:
        cidx = prog.new_scalars(1)[0]
        level = LinPoly.scalar(n, cidx)
    else:
        level = LinPoly.from_poly(Polynomial.constant(n, c))
    expr = LinPoly.from_poly(W) - level
    ts = []
    top = W.degree
    for k, w in enumerate(block.polys):
        w = w.scale(1.0 / w.max_abs_coefficient())  # same set, better conditioning
        td = degrees.t_degree(W, w)
        t = prog.sos_multiplier(td // 2, f"t{k + 1}")
        expr = expr - t * w
        ts.append((f"t{k + 1}", w))
        top = max(top, td + w.degree)
    prog.require_sos(expr, "remainder", math.ceil(top / 2))
    return prog, cidx, ts


def certify_safety_exclusion(
    W: Polynomial,
    c: float,
    block: ExcludedBlock,
    degrees: Degrees | None = None,
    tol_psd: float | None = None,
) -> SosCertificate:
    """SOS certificate that ``{W <= c}`` misses the block."""
    degrees = degrees or Degrees()
    prog, _, ts = _exclusion_program(W, block, degrees, c)
    conic = prog.conic()
    out = solve_feasibility(conic, tol_psd)
    if not out.feasible:
        raise CertificationRefused(f"exclusion of {block.origin} at c={c:g}: {out.status} ({out.diagnostics})",
                                   out.status)
    mults = {name: (prog.gram(name, out, conic), w) for name, w in ts}
    return SosCertificate("exclusion", W - c, mults, prog.gram("remainder", out, conic),
                          {"c": c, "block": block.origin})


def max_exclusion_level(
    W: Polynomial,
    block: ExcludedBlock,
    degrees: Degrees | None = None,
    tol_psd: float | None = None,
    cap: float | None = None,
) -> tuple[float, SosCertificate | None]:
    """Largest ``c <= cap`` with an exclusion certificate.

    Without a cap an unbounded program returns ``(inf, None)``; callers must
    then certify a finite level separately.
    """
    degrees = degrees or Degrees()
    prog, cidx, ts = _exclusion_program(W, block, degrees, None)
    if cap is not None:
        n = W.num_vars
        prog.require_sos(LinPoly.from_poly(Polynomial.constant(n, cap)) - LinPoly.scalar(n, cidx), "cap", 0)
    prog.minimize({cidx: -1.0})
    conic = prog.conic()
    out = solve_min_linear(conic, tol_psd)
    if out.status == "unbounded" and cap is None:
        return math.inf, None
    if not out.feasible:
        raise CertificationRefused(f"exclusion of {block.origin}: {out.status} ({out.diagnostics})", out.status)
    c = float(out.witness[cidx])
    mults = {name: (prog.gram(name, out, conic), w) for name, w in ts}
    cert = SosCertificate("exclusion", W - c, mults, prog.gram("remainder", out, conic),
                          {"c": c, "block": block.origin})
    return c, cert


def _lower_exclusion_level(cert: SosCertificate, c_new: float) -> SosCertificate:
    """Exclusion certificate at a smaller level: the slack is a constant SOS term."""
    c_old = cert.info["c"]
    rem = cert.remainder
    n = rem.phi.num_vars
    const = sub_power_vector(rem.phi, [(0,) * n])
    phi, gram = merge_grams([(rem.phi, rem.gram), (const, np.array([[c_old - c_new]]))])
    W = cert.target + c_old
    return SosCertificate("exclusion", W - c_new, cert.multipliers, GramWitness(rem.name, phi, gram),
                          {**cert.info, "c": c_new})


# ---------------------------------------------------------------------------
# GEVP bisection
# ---------------------------------------------------------------------------


def assemble_gevp_lmi(
    problem: CertificationProblem,
    e: float,
    W: Polynomial | None = None,
    degrees: Degrees | None = None,
    sigma1: float = 1.0,
    sigma2: float = 1.0,
    inline_unsafe_terms: bool = False,
) -> tuple[SosProgram, ConicProgram]:
    W = problem.W if W is None else W
    degrees = degrees or Degrees()
    wdot = build_wdot(W, problem)
    rblocks = problem.unsafe_blocks if inline_unsafe_terms else ()
    prog, s, rs = _decrease_program(problem, W, wdot, degrees, rblocks)
    one = Polynomial.constant(W.num_vars, 1.0)
    expr = s * (one.scale(e) + W.scale(sigma1 + sigma2 * e)) - wdot
    for _, r, w in rs:
        expr = expr - r * w
    prog.require_sos(expr, "psi", math.ceil(degrees.psi_degree(W, wdot) / 2))
    return prog, prog.conic()


def level_from_e(e: float, sigma1: float, sigma2: float) -> float:
    return -e / (sigma1 + sigma2 * e)


def e_bracket(sigma1: float, sigma2: float) -> tuple[float, float]:
    r = sigma1 / sigma2
    return -r + BRACKET_MARGIN * r, 0.0


@dataclass
class CertifiedRegion:
    W: Polynomial
    c: float
    certificates: dict
    meta: dict = field(default_factory=dict)
    names: tuple = ()
    problem: CertificationProblem | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("certified level must be positive")

    def contains(self, q) -> np.ndarray:
        return np.asarray(self.W.evaluate(q)) <= self.c

    def verify(self, tol_identity: float = 1e-6, tol_psd: float | None = None) -> bool:
        tol = default_tol_psd() if tol_psd is None else tol_psd
        for cert in self.certificates.values():
            if not cert.verify(tol_identity, tol):
                return False
            if abs(cert.info.get("c", self.c) - self.c) > 1e-12 * max(1.0, self.c):
                return False
        return True

    def report(self) -> dict:
        return {
            "W": self.W.to_string(self.names or None),
            "c": self.c,
            "variables": list(self.names),
            "meta": self.meta,
            "verified": self.verify(),
            "certificates": {k: v.to_dict(self.names or None) for k, v in self.certificates.items()},
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.report(), fh, indent=2, default=float)


def _scaled_decrease(cert_psi: SosCertificate, W, wdot, e, sigma1, sigma2, c_gevp, c_final) -> SosCertificate:
    """Turn the certificate for ``P_e`` into a decrease certificate at ``c_final``.

    ``P_e = -Wdot - s'(c_gevp - W) - xi`` with ``s' = (sigma1 + sigma2 e) s``;
    at a lower level the slack ``s' (c_gevp - c_final)`` joins the remainder.
    """
    n = W.num_vars
    g_s, _ = cert_psi.multipliers["s"]
    scale = sigma1 + sigma2 * e
    s_prime = GramWitness("s", g_s.phi, g_s.gram * scale)
    rem = cert_psi.remainder
    phi, gram = merge_grams([(rem.phi, rem.gram), (s_prime.phi, (c_gevp - c_final) * s_prime.gram)])
    mults = {"s": (s_prime, Polynomial.constant(n, c_final) - W)}
    mults.update({k: v for k, v in cert_psi.multipliers.items() if k != "s"})
    return SosCertificate("decrease", -wdot, mults, GramWitness("remainder", phi, gram),
                          {**cert_psi.info, "c": c_final})


def estimate_c_gevp(
    problem: CertificationProblem,
    W: Polynomial | None = None,
    sigma1: float = 1.0,
    sigma2: float = 1.0,
    degrees: Degrees | None = None,
    bisect_tol: float = 1e-4,
    inline_unsafe_terms: bool = False,
    exclusion: bool = True,
    tol_psd: float | None = None,
    check_positive: bool = True,
) -> CertifiedRegion:
    """Largest certified level by bisection, then the exclusion post-pass."""
    if not (sigma1 > 0 and sigma2 > 0):
        raise ValueError("sigma1 and sigma2 must be positive")
    W = problem.W if W is None else W
    degrees = degrees or Degrees()
    if check_positive:
        check_w_positive(W, tol_psd=tol_psd)
    wdot = build_wdot(W, problem)
    n = W.num_vars
    unknown = 0

    def attempt(e):
        nonlocal unknown
        prog, conic = assemble_gevp_lmi(problem, e, W, degrees, sigma1, sigma2, inline_unsafe_terms)
        out = solve_feasibility(conic, tol_psd)
        if out.status == "unknown":
            unknown += 1
            log.info("backend unknown at e=%.6g: %s", e, out.diagnostics)
        if not out.feasible:
            return None
        c = level_from_e(e, sigma1, sigma2)
        mults = {"s": (prog.gram("s", out, conic), Polynomial.constant(n, c) - W)}
        for name in (b.label for b in conic.blocks if b.label.startswith("r")):
            bk, pk = (int(v) - 1 for v in name[1:].split("_"))
            mults[name] = (prog.gram(name, out, conic), problem.unsafe_blocks[bk].polys[pk])
        return SosCertificate("decrease", -wdot, mults, prog.gram("psi", out, conic),
                              {"e": e, "inline_unsafe_terms": inline_unsafe_terms})

    lo, hi = e_bracket(sigma1, sigma2)
    best = _global_decrease(problem, W, wdot, degrees, inline_unsafe_terms, tol_psd)
    unbounded = best is not None
    if unbounded:
        # -Wdot SOS: s = 0 satisfies the LMI at every e, so the bracket cap is feasible
        e_best = lo
        best.info["e"] = lo
    else:
        best = attempt(hi)
        if best is None:
            raise CertificationRefused("no feasible e in the bracket (decrease fails even at e = 0)",
                                       "unknown" if unknown else "infeasible")
        e_best = hi
        cap = attempt(lo)
        unbounded = cap is not None
        if unbounded:
            best, e_best = cap, lo
    if not unbounded:
        width = bisect_tol * sigma1 / sigma2
        while hi - lo > width:
            mid = 0.5 * (lo + hi)
            cert = attempt(mid)
            if cert is None:
                lo = mid
            else:
                hi, best, e_best = mid, cert, mid
    c_gevp = level_from_e(e_best, sigma1, sigma2)

    c_limits = {}
    excl = {}
    capped = set()
    if exclusion:
        # task blocks usually bind first; capping at the running minimum keeps
        # far-away blocks from producing badly scaled programs
        running = c_gevp
        for block in tuple(problem.task_blocks) + tuple(problem.unsafe_blocks):
            ck, cert = max_exclusion_level(W, block, degrees, tol_psd, cap=running)
            c_limits[block.origin] = ck
            excl[block.origin] = cert
            if ck >= running * (1.0 - 1e-6):
                capped.add(block.origin)
            running = min(running, ck)
    c_final = min([c_gevp] + list(c_limits.values()))
    if c_limits and c_final < c_gevp:
        c_final *= 1.0 - EXCLUSION_SHRINK
    if not c_final > 0:
        raise CertificationRefused(f"certified level {c_final:g} is not positive")

    certificates = {"decrease": _scaled_decrease(best, W, wdot, e_best, sigma1, sigma2, c_gevp, c_final)}
    for origin, cert in excl.items():
        if cert is None:
            cert = certify_safety_exclusion(W, c_final, _block_by_origin(problem, origin), degrees, tol_psd)
        else:
            cert = _lower_exclusion_level(cert, c_final)
        certificates[f"exclusion: {origin}"] = cert
    free = {k: v for k, v in c_limits.items() if k not in capped}
    binding = min(free, key=free.get) if free else "decrease"
    meta = {
        "sigma1": sigma1, "sigma2": sigma2, "e": e_best, "c_gevp": c_gevp,
        "c_exclusion": c_limits, "c_exclusion_capped": sorted(capped), "binding": binding, "unbounded": unbounded and binding == "decrease",
        "degrees": degrees.to_dict(), "inline_unsafe_terms": inline_unsafe_terms,
        "strict_exclusion": exclusion, "backend_unknown_count": unknown, "bisect_tol": bisect_tol,
        **problem.meta,
    }
    region = CertifiedRegion(W, c_final, certificates, meta, problem.names, problem)
    if not region.verify():
        raise CertificationRefused("certificate re-verification failed", "unknown")
    return region


def _global_decrease(problem, W, wdot, degrees, inline_unsafe, tol_psd) -> SosCertificate | None:
    """Certificate with ``s = 0`` when ``-Wdot`` is SOS (decrease at every level)."""
    if inline_unsafe and problem.unsafe_blocks:
        return None
    n = W.num_vars
    prog = SosProgram(n)
    half = math.ceil(degrees.psi_degree(W, wdot) / 2)
    prog.require_sos(LinPoly.from_poly(-wdot), "psi", half)
    conic = prog.conic()
    out = solve_feasibility(conic, tol_psd)
    if not out.feasible:
        return None
    ds = degrees.s_degree(W, wdot)
    phi_s = power_vector(n, ds // 2)
    zero = GramWitness("s", phi_s, np.zeros((len(phi_s), len(phi_s))))
    return SosCertificate("decrease", -wdot, {"s": (zero, Polynomial.zero(n))}, prog.gram("psi", out, conic),
                          {"inline_unsafe_terms": inline_unsafe})


def _block_by_origin(problem, origin) -> ExcludedBlock:
    for b in problem.excluded_blocks:
        if b.origin == origin:
            return b
    raise KeyError(origin)


def volume_surrogates(region: CertifiedRegion) -> tuple[float, float]:
    """``(eta, linear)`` = ``(c**m / det(Q), c / trace(Q))`` for the quadratic part ``Q`` of ``W``."""
    W = region.W
    m = W.num_vars
    Q = np.zeros((m, m))
    for mono, coef in W.items():
        if sum(mono) != 2:
            continue
        idx = [k for k, e in enumerate(mono) for _ in range(e)]
        i, j = idx
        if i == j:
            Q[i, i] += coef
        else:
            Q[i, j] += coef / 2
            Q[j, i] += coef / 2
    ev = np.linalg.eigvalsh(Q)
    if ev[0] <= 1e-12 * max(1.0, abs(ev[-1])):
        raise ValueError("quadratic part of W is singular; volume surrogates undefined")
    return region.c**m / float(np.prod(ev)), region.c / float(np.trace(Q))
