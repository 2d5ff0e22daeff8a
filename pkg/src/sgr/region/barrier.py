"""Barrier-shape validity certificates and barrier optimisation.

Barrier shapes are even polynomials in the pair distance ``z``.  Validity is
certified on the relevant interval ``[lo, hi]`` with univariate SOS:

* connectivity: ``Upsilon`` SOS, ``(dUpsilon/dz)/z`` SOS and
  ``dUpsilon/dz - s1 (z - lo) - s2 (hi - z)`` SOS (increasing on the interval),
  plus ``Upsilon(hi) = mu``;
* collision: ``Upsilon`` SOS (or only non-negative on the interval in the
  local variant), ``-dUpsilon/dz - s3 (z - lo) - s4 (hi - z)`` SOS
  (decreasing), plus ``Upsilon(lo) = mu``.

The optimisation alternates a level step (GEVP with the exclusion pass) with
a shape step that minimises the Gram trace of ``W`` while keeping ``W`` SOS,
the shapes valid, the decrease condition at the current level and multiplier
``s``, and every exclusion condition at the current level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..dynamics import BarrierShape, CoordinationModel, UnsafeSet, barrier_intervals
from ..polynomial import Polynomial
from ..sdp import solve_feasibility, solve_min_linear
from ..system import build_wdot, multi_agent_problem
from .certify import CertificationRefused, CertifiedRegion, Degrees, estimate_c_gevp
from .sos import LinPoly, SosCertificate, SosProgram

log = logging.getLogger(__name__)

BOUNDARY_RTOL = 1e-9


def _z_poly(coeffs_by_power: dict[int, float]) -> Polynomial:
    return Polynomial(1, {(e,): c for e, c in coeffs_by_power.items()})


def _shape_linpoly(coeffs, idx=None) -> LinPoly:
    """``sum_k a_k z^(2k)`` with numeric ``coeffs`` or scalar indices ``idx``."""
    if idx is None:
        return LinPoly.from_poly(_z_poly({2 * k: a for k, a in enumerate(coeffs)}))
    out = LinPoly(1)
    for k, i in idx.items():
        out = out + LinPoly.from_poly(_z_poly({2 * k: 1.0})).times_scalar(int(i))
    return out


def _derivative_linpoly(lp: LinPoly, divide_by_z: bool = False) -> LinPoly:
    lp = lp.compress()
    e = lp.monos[:, 0]
    keep = e > 0
    monos = (e[keep] - (2 if divide_by_z else 1))[:, None]
    return LinPoly(1, monos, lp.cols[keep], lp.vals[keep] * e[keep]).compress()


def _add_validity(prog: SosProgram, kind: str, upsilon: LinPoly, degree: int, lo: float, hi: float,
                  local: bool, prefix: str) -> list[tuple]:
    """Add the univariate conditions; returns ``(label, target, [(mult_label, factor)])``."""
    z = _z_poly({1: 1.0})
    one = _z_poly({0: 1.0})
    out = []
    mdeg = max(degree - 2, 0)  # multipliers for a derivative of odd degree ``degree - 1``
    if kind == "collision" and local:
        m5 = prog.sos_multiplier(mdeg // 2, f"{prefix}s5", num_vars=1)
        factor = (z - lo) * (one.scale(hi) - z)
        prog.require_sos(upsilon - m5 * factor, f"{prefix}nonneg", max(1, math.ceil(degree / 2)))
        out.append((f"{prefix}nonneg", upsilon, [(f"{prefix}s5", factor)]))
    else:
        prog.require_sos(upsilon, f"{prefix}sos", max(1, math.ceil(degree / 2)))
        out.append((f"{prefix}sos", upsilon, []))
    d = _derivative_linpoly(upsilon)
    if kind == "connectivity":
        r = _derivative_linpoly(upsilon, divide_by_z=True)
        prog.require_sos(r, f"{prefix}grad_factor", max(1, math.ceil((degree - 2) / 2)))
        out.append((f"{prefix}grad_factor", r, []))
        target = d
        names = (f"{prefix}s1", f"{prefix}s2")
    else:
        target = -d
        names = (f"{prefix}s3", f"{prefix}s4")
    m_lo = prog.sos_multiplier(mdeg // 2, names[0], num_vars=1)
    m_hi = prog.sos_multiplier(mdeg // 2, names[1], num_vars=1)
    f_lo, f_hi = z - lo, one.scale(hi) - z
    prog.require_sos(target - m_lo * f_lo - m_hi * f_hi, f"{prefix}monotone", max(1, math.ceil((degree - 1) / 2)))
    out.append((f"{prefix}monotone", target, [(names[0], f_lo), (names[1], f_hi)]))
    return out


def _validity_certificates(prog, conic, outcome, specs, kind) -> dict[str, SosCertificate]:
    certs = {}
    for label, target, mults in specs:
        t = target.evaluate_coeffs(outcome.witness)
        m = {name: (prog.gram(name, outcome, conic), f) for name, f in mults}
        certs[label] = SosCertificate(f"{kind} validity", t, m, prog.gram(label, outcome, conic))
    return certs


def barrier_interval(kind: str, geo, tau_norm: float, z_max: float | None = None) -> tuple[float, float]:
    if kind == "connectivity":
        return 0.0, geo.r_s - tau_norm
    return geo.d_s + tau_norm, (geo.r_z + tau_norm) if z_max is None else z_max


def barrier_validity_sos(
    shape: BarrierShape, interval: tuple[float, float], local: bool = False, tol_psd: float | None = None
) -> dict[str, SosCertificate]:
    """Univariate certificates that ``shape`` is a valid barrier on ``interval``."""
    lo, hi = interval
    if not hi > lo:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    boundary = hi if shape.kind == "connectivity" else lo
    val = float(shape.value(boundary))
    if abs(val - shape.mu) > BOUNDARY_RTOL * max(1.0, abs(shape.mu)):
        raise CertificationRefused(f"boundary value {val:.10g} does not interpolate mu = {shape.mu:.10g}")
    if shape.kind == "connectivity" and abs(shape.coeffs[0]) > BOUNDARY_RTOL * max(1.0, shape.mu):
        raise CertificationRefused("connectivity barrier must vanish at z = 0")
    prog = SosProgram(1)
    specs = _add_validity(prog, shape.kind, _shape_linpoly(shape.coeffs), max(shape.degree, 2), lo, hi,
                          local, "")
    conic = prog.conic()
    out = solve_feasibility(conic, tol_psd)
    if not out.feasible:
        raise CertificationRefused(f"{shape.kind} barrier not certified valid: {out.status} ({out.diagnostics})",
                                   out.status)
    certs = _validity_certificates(prog, conic, out, specs, shape.kind)
    for c in certs.values():
        c.info.update({"interval": [lo, hi], "boundary_value": val})
    return certs


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def min_gram_trace(W: Polynomial, tol_psd: float | None = None) -> float:
    """Smallest trace over all PSD Gram matrices of ``W`` (inf if not SOS)."""
    prog = SosProgram(W.num_vars)
    prog.require_sos(LinPoly.from_poly(W), "W")
    obj = prog.trace_objective("W")
    const = prog.block_trace_constant("W")
    if not obj:
        conic = prog.conic()
        out = solve_feasibility(conic, tol_psd)
        return const if out.feasible else math.inf
    prog.minimize(obj)
    out = solve_min_linear(prog.conic(), tol_psd)
    if not out.feasible:
        return math.inf
    return out.objective + const


@dataclass
class OptimizationResult:
    barrier_e: BarrierShape
    barrier_c: BarrierShape
    region: CertifiedRegion
    zeta: float
    kappa: float
    baseline_kappa: float
    history: list = field(default_factory=list)

    @property
    def traces(self) -> list[float]:
        return [h["trace"] for h in self.history]


def _w_parts(model: CoordinationModel, d_b: int):
    zero_e = BarrierShape("connectivity", (0.0,), model.barrier_e.mu)
    zero_c = BarrierShape("collision", (0.0,), model.barrier_c.mu)
    base = multi_agent_problem(replace(model, barrier_e=zero_e, barrier_c=zero_c), task_blocks=False).W
    K = d_b // 2
    parts_e, parts_c = {}, {}
    for k in range(0, K + 1):
        unit = tuple([0.0] * k + [1.0])
        if k >= 1:
            We = multi_agent_problem(replace(model, barrier_e=BarrierShape("connectivity", unit, 1.0),
                                             barrier_c=zero_c), task_blocks=False).W
            parts_e[k] = We - base
        Wc = multi_agent_problem(replace(model, barrier_e=zero_e, barrier_c=BarrierShape("collision", unit, 1.0)),
                                 task_blocks=False).W
        parts_c[k] = Wc - base
    return base, parts_e, parts_c


def _shape_step(model, unsafe, region, d_b, local_collision, tol_psd):
    """Trace minimisation over barrier coefficients at fixed ``s`` and ``c``."""
    problem = multi_agent_problem(model, unsafe)
    geo, form = model.geometry, model.formation
    iv = barrier_intervals(geo, form)
    W_fixed, parts_e, parts_c = _w_parts(model, d_b)
    m = problem.num_vars
    prog = SosProgram(m)
    ae = {k: i for k, i in zip(parts_e, prog.new_scalars(len(parts_e)))}
    ac = {k: i for k, i in zip(parts_c, prog.new_scalars(len(parts_c)))}
    Wlin = LinPoly.from_poly(W_fixed)
    for k, P in parts_e.items():
        if not P.is_zero():
            Wlin = Wlin + LinPoly.from_poly(P).times_scalar(ae[k])
    for k, P in parts_c.items():
        if not P.is_zero():
            Wlin = Wlin + LinPoly.from_poly(P).times_scalar(ac[k])
    prog.require_sos(Wlin, "W")

    mu1, mu2 = model.barrier_e.mu, model.barrier_c.mu
    _add_validity(prog, "connectivity", _shape_linpoly(None, ae), d_b, 0.0, iv.r_hat_s, False, "e_")
    prog.require_equal_scalar({ae[k]: iv.r_hat_s ** (2 * k) for k in ae}, mu1)
    _add_validity(prog, "collision", _shape_linpoly(None, ac), d_b, iv.d_hat_s, iv.z_max, local_collision, "c_")
    prog.require_equal_scalar({ac[k]: iv.d_hat_s ** (2 * k) for k in ac}, mu2)

    c = region.c
    wdot = build_wdot(problem.W, problem)
    s_poly = region.certificates["decrease"].multipliers["s"][0].poly()
    # Upsilon has degree d_b in z and z**2 is quadratic in q, so W has degree d_b
    deg_W = max(W_fixed.degree, d_b)
    if s_poly.is_zero():
        psi = LinPoly.from_poly(-wdot)
        psi_deg = wdot.degree
    else:
        psi = LinPoly.from_poly(-wdot - s_poly.scale(c)) + Wlin * s_poly
        psi_deg = max(wdot.degree, s_poly.degree + deg_W)
    prog.require_sos(psi, "psi", math.ceil(psi_deg / 2))

    for bk, block in enumerate(problem.excluded_blocks):
        expr = Wlin - Polynomial.constant(m, c)
        top = deg_W
        for pk, w in enumerate(block.polys):
            td = max(deg_W - w.degree, 0)
            td += td % 2
            t = prog.sos_multiplier(td // 2, f"x{bk}_t{pk}")
            expr = expr - t * w
            top = max(top, td + w.degree)
        prog.require_sos(expr, f"x{bk}", math.ceil(top / 2))

    prog.minimize(prog.trace_objective("W"))
    out = solve_min_linear(prog.conic(), tol_psd)
    if not out.feasible:
        return None, out
    x = out.witness
    Ke = max(parts_e) if parts_e else 0
    ce = [0.0] + [float(x[ae[k]]) for k in range(1, Ke + 1)]
    cc = [float(x[ac[k]]) for k in range(0, max(parts_c) + 1)]
    return (BarrierShape("connectivity", tuple(ce), mu1), BarrierShape("collision", tuple(cc), mu2)), out


def optimize_barriers(
    model: CoordinationModel,
    unsafe: UnsafeSet | None = None,
    degrees: Degrees | None = None,
    n_iters: int = 5,
    d_b: int = 4,
    sigma1: float = 1.0,
    sigma2: float = 1.0,
    bisect_tol: float = 1e-4,
    local_collision: bool = False,
    tol_psd: float | None = None,
) -> OptimizationResult:
    """Alternate level and shape steps; keeps the incumbent when a round does not improve.

    A round is accepted only if the Gram trace of ``W`` does not increase and
    the surrogate ``c / trace`` does not decrease, so the recorded trace
    sequence is non-increasing and the final surrogate is at least the
    baseline's.
    """
    if d_b < 2 or d_b % 2:
        raise ValueError("barrier degree d_b must be an even integer >= 2")
    degrees = degrees or Degrees()

    def level_step(mdl):
        prob = multi_agent_problem(mdl, unsafe)
        return estimate_c_gevp(prob, sigma1=sigma1, sigma2=sigma2, degrees=degrees,
                               bisect_tol=bisect_tol, tol_psd=tol_psd)

    region = level_step(model)
    zeta = min_gram_trace(region.W, tol_psd)
    kappa = region.c / zeta
    baseline = kappa
    history = [{"iteration": 0, "trace": zeta, "c": region.c, "kappa": kappa, "accepted": True}]
    current = model
    stalled = False
    for it in range(1, n_iters + 1):
        note = ""
        if not stalled:
            shapes, out = _shape_step(current, unsafe, region, d_b, local_collision, tol_psd)
            if shapes is None:
                note = f"shape step {out.status}: {out.diagnostics}"
                if out.status == "unknown":
                    stalled = True
            else:
                cand = replace(current, barrier_e=shapes[0], barrier_c=shapes[1])
                try:
                    cand_region = level_step(cand)
                    cand_zeta = min_gram_trace(cand_region.W, tol_psd)
                    cand_kappa = cand_region.c / cand_zeta
                    if cand_zeta <= zeta * (1 + 1e-9) + 1e-12 and cand_kappa >= kappa:
                        current, region, zeta, kappa = cand, cand_region, cand_zeta, cand_kappa
                        history.append({"iteration": it, "trace": zeta, "c": region.c, "kappa": kappa,
                                        "accepted": True})
                        continue
                    note = f"candidate trace {cand_zeta:.6g}, kappa {cand_kappa:.6g} not better"
                except CertificationRefused as exc:
                    note = f"level step refused: {exc}"
                stalled = True
        history.append({"iteration": it, "trace": zeta, "c": region.c, "kappa": kappa, "accepted": False,
                        "note": note or "stalled"})
    region.meta.update({"zeta": zeta, "kappa": kappa, "baseline_kappa": baseline, "d_b": d_b})
    return OptimizationResult(current.barrier_e, current.barrier_c, region, zeta, kappa, baseline, history)
