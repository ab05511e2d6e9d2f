"""Ellipticity tests, Neumann-series parametrices and Douglis-Nirenberg
block systems.

Orders are operational: a symbol "has order m" when its sampled,
(1+|xi|)^{-m}-normalized jets do not grow over the shell |xi| in
[10, 1e3].  Every verdict produced here is therefore a finite-sample
certificate, not a proof.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sp
from scipy.optimize import minimize_scalar

from .calculus import ExpansionConfig, sharp_product
from .errors import NotConverged, NotElliptic, ScenarioInvalid, ShapeMismatch
from .symbols import (CallableSymbol, Excised, ExpressionSymbol, Symbol, SymbolClass,
                      constant_symbol, linear_combination, measured_order, order_test,
                      pointwise_product, sample_chart_points, _directions)

__all__ = ["Verdict", "EllipticityReport", "ParametrixResult", "ellipticity_test_scalar",
           "neumann_parametrix", "dn_system_test", "excised_reciprocal", "residual",
           "CERTIFICATE_NOTE", "DEFAULT_SHELL"]

DEFAULT_SHELL = (10.0, 1e3)
CERTIFICATE_NOTE = ("sampled certificate: bounds and orders were checked on finitely many "
                    "covectors of the shell and are not a proof")
VANISH_TOL = 1e-12
NOISE_FLOOR = 1e-11


@dataclass(frozen=True)
class Verdict:
    kind: str                   # EllipticOfOrder | EllipticGeneral | NotElliptic | Inconclusive
    order: float | None = None

    def __str__(self):
        if self.kind == "EllipticOfOrder":
            return f"EllipticOfOrder({self.order:g})"
        return self.kind

    @property
    def elliptic(self):
        return self.kind in ("EllipticOfOrder", "EllipticGeneral")


def _num(v):
    """JSON-friendly float (infinities become strings)."""
    if v is None:
        return None
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_num(u) for u in v]
    v = float(v)
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return v


@dataclass
class EllipticityReport:
    verdict: Verdict
    witness: object = None                  # Symbol, or nested list of Symbols for systems
    constants: dict = field(default_factory=dict)
    failure_locus: list = field(default_factory=list)
    epsilon: float | None = None
    residual_orders: dict = field(default_factory=dict)
    samples: int = 0
    assembled: object = None
    note: str = CERTIFICATE_NOTE

    @property
    def elliptic(self):
        return self.verdict.elliptic

    def to_dict(self):
        return {"verdict": str(self.verdict),
                "constants": {k: _num(v) for k, v in self.constants.items()},
                "epsilon": _num(self.epsilon),
                "residual_orders": {k: _num(v) for k, v in self.residual_orders.items()},
                "samples": int(self.samples),
                "failure_locus": self.failure_locus,
                "note": self.note}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


@dataclass
class ParametrixResult:
    b: Symbol
    terms_used: int
    residual_orders: dict                  # {"right": a#b - 1, "left": b#a - 1}
    residual_sup: dict
    converged: bool
    history: list = field(default_factory=list)
    note: str = CERTIFICATE_NOTE

    def to_dict(self):
        return {"terms_used": self.terms_used, "converged": self.converged,
                "residual_orders": {k: _num(v) for k, v in self.residual_orders.items()},
                "residual": {k: _num(v) for k, v in self.residual_sup.items()},
                "history": [{k: _num(v) if not isinstance(v, (int, bool)) else v
                             for k, v in h.items()} for h in self.history],
                "note": self.note}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _points(a, K):
    M = a.manifold
    if M is None:
        raise ValueError("the symbol needs a manifold for sampling")
    return np.atleast_2d(np.asarray(sample_chart_points(M, 4) if K is None else K, dtype=float))


def excised_reciprocal(a, lam):
    """Pointwise reciprocal of a scalar symbol, excised for |xi| <= lam / 2."""
    if isinstance(a, ExpressionSymbol):
        rec = ExpressionSymbol(sp.Matrix([[sp.cancel(1 / a.matrix[0, 0])]]), a.dim,
                               SymbolClass(-a.order, a.cls.rho, a.cls.delta), manifold=a.manifold)
    else:
        rec = CallableSymbol(lambda x, z: 1.0 / a.evaluate(x, z)[..., 0, 0], a.dim,
                             SymbolClass(-a.order, a.cls.rho, a.cls.delta), manifold=a.manifold,
                             depends_on_x=getattr(a, "depends_on_x", True))
    return Excised(rec, lam)


def _is_zero(s):
    return isinstance(s, ExpressionSymbol) and all(e == 0 for e in s.matrix)


def _combine(terms):
    """sum c_j s_j; closed-form sums are only cancelled (simplify is far too slow
    on nested products)."""
    syms = [t for _, t in terms]
    if all(isinstance(t, ExpressionSymbol) for t in syms):
        mat = sum((sp.nsimplify(c) * t.matrix for c, t in terms), sp.zeros(*syms[0].block_shape))
        cls = SymbolClass(max(t.order for t in syms), syms[0].cls.rho, syms[0].cls.delta)
        manifold = next((t.manifold for t in syms if t.manifold is not None), None)
        return ExpressionSymbol(mat.applyfunc(sp.cancel), syms[0].dim, cls, manifold=manifold)
    return linear_combination(terms)


def residual(a, b, cfg=None):
    """a # b - 1 as a symbol."""
    prod = sharp_product(a, b, cfg)
    one = constant_symbol(1, a.dim, prod.block_shape, manifold=prod.manifold or a.manifold)
    return _combine([(1, prod), (-1, one)])


def _residual_stats(r, K, shell):
    """(measured order, sampled sup) of a residual symbol; exact zeros give -inf."""
    if _is_zero(r):
        return -math.inf, 0.0
    order = measured_order(r, K, shell, floor=NOISE_FLOOR)
    sup = order_test(r, 0.0, K, shell, max_depth=0).sup
    return order, sup


# ----------------------------------------------------------------------------
# scalar ellipticity
# ----------------------------------------------------------------------------

def _abs_values(a, x, zeta):
    return np.abs(a.evaluate(x, zeta)[..., 0, 0])


def _vanishing_rays(a, m, pts, shell, n_angles=720):
    """Directions along which |a| <= VANISH_TOL |xi|^m on the whole shell."""
    d = a.dim
    radii = np.geomspace(shell[0], shell[1], 9)
    rays = []
    for x in pts:
        if d == 1:
            cands = [np.array([1.0]), np.array([-1.0])]
        else:
            if d == 2:
                ang = np.linspace(0.0, 2 * math.pi, n_angles, endpoint=False)
                dirs = np.stack([np.cos(ang), np.sin(ang)], -1)
            else:
                dirs = _directions(d, n_angles)
            R = shell[1]
            q = _abs_values(a, np.broadcast_to(x, dirs.shape), R * dirs) / R ** m
            cands = []
            step = 2 * math.pi / n_angles
            for k in np.argsort(q)[:4]:
                if d == 2:
                    f = lambda t: float(_abs_values(a, x, R * np.array([math.cos(t), math.sin(t)])))
                    res = minimize_scalar(f, bounds=(ang[k] - step, ang[k] + step),
                                          method="bounded", options={"xatol": 1e-14})
                    t = res.x if res.fun < q[k] * R ** m else ang[k]
                    cands.append(np.array([math.cos(t), math.sin(t)]))
                else:
                    cands.append(dirs[k])
        for u in cands:
            zeta = radii[:, None] * u[None, :]
            vals = _abs_values(a, np.broadcast_to(x, zeta.shape), zeta)
            if np.all(vals <= VANISH_TOL * radii ** m):
                u = np.where(np.abs(u) < 1e-12, 0.0, u)
                rays.append({"x": x.tolist(), "direction": u.tolist(),
                             "radii": radii.tolist(), "values": vals.tolist()})
                break
    return rays


def ellipticity_test_scalar(a, m=None, K=None, witness=None, cfg=None, shell=DEFAULT_SHELL,
                            n_radii=24, n_dirs=32, slope_tol=0.1, check_witness=False):
    """Sampled test of |a(xi)| >= |xi|^m / C_K on the shell.

    Verdicts: EllipticOfOrder(m) when the bound holds with a shell-uniform
    constant, NotElliptic when a ray with |a| <= 1e-12 |xi|^m is found,
    EllipticGeneral when a supplied (or reciprocal) witness b makes
    a # b - 1 and b # a - 1 of negative measured order, else Inconclusive.
    """
    if a.block_shape != (1, 1):
        raise ShapeMismatch("ellipticity_test_scalar needs a scalar symbol")
    m = a.order if m is None else float(m)
    pts = _points(a, K)
    M = a.manifold
    report = EllipticityReport(Verdict("Inconclusive"))

    rays = _vanishing_rays(a, m, pts, shell)
    if rays:
        report.verdict = Verdict("NotElliptic")
        report.failure_locus = rays
        report.samples = len(pts) * 9
        return report

    radii = np.geomspace(shell[0], shell[1], n_radii)
    dirs = _directions(M.dim, n_dirs)
    shape = (len(pts), n_radii, len(dirs))
    zeta = np.broadcast_to(radii[None, :, None, None] * dirs[None, None, :, :], shape + (M.dim,))
    x = np.broadcast_to(pts[:, None, None, :], shape + (pts.shape[-1],))
    q = _abs_values(a, x, zeta) / radii[None, :, None] ** m
    report.samples = int(q.size)
    low = q.min(axis=(0, 2))
    qmin = float(low.min())
    slope = float(np.polyfit(np.log(radii), np.log(np.maximum(low, 1e-300)), 1)[0])
    report.constants = {"C_K": 1.0 / qmin if qmin > 0 else math.inf, "bound_slope": slope,
                        "shell_min": shell[0], "shell_max": shell[1]}
    bound_ok = qmin > 0 and slope >= -slope_tol
    if not bound_ok:
        idx = np.unravel_index(np.argmin(q), q.shape)
        report.failure_locus = [{"x": x[idx].tolist(), "zeta": zeta[idx].tolist(),
                                 "ratio": float(q[idx])}]

    if bound_ok and witness is None:
        report.verdict = Verdict("EllipticOfOrder", m)
        report.witness = excised_reciprocal(a, shell[0])
        if not check_witness:
            return report

    b = witness if witness is not None else report.witness
    if b is None:
        if qmin <= 0:
            return report
        b = excised_reciprocal(a, shell[0])
    right = residual(a, b, cfg)
    left = residual(b, a, cfg)
    ro, _ = _residual_stats(right, pts, shell)
    lo, _ = _residual_stats(left, pts, shell)
    report.residual_orders = {"right": ro, "left": lo}
    eps = -max(ro, lo)
    report.epsilon = eps
    if eps > slope_tol:
        report.witness = b
        if report.verdict.kind != "EllipticOfOrder":
            report.verdict = Verdict("EllipticGeneral")
    return report


# ----------------------------------------------------------------------------
# Neumann parametrix
# ----------------------------------------------------------------------------

def neumann_parametrix(a, b0, cfg=None, max_terms=8, tol_order=-6.0, K=None, shell=DEFAULT_SHELL,
                       raise_on_failure=True):
    """b = b0 # (1 + r + r#r + ...), r = 1 - a # b0, stopped once a # b - 1
    and b # a - 1 both pass the order ``tol_order`` test (or vanish)."""
    cfg = cfg or ExpansionConfig()
    pts = _points(a, K) if a.manifold is not None else None
    one = constant_symbol(1, a.dim, a.block_shape, manifold=a.manifold)

    r0 = residual(a, b0, cfg)
    zero0 = _is_zero(r0)
    if not zero0:
        o0, _ = _residual_stats(r0, pts, shell)
        if not o0 < -0.1:
            raise NotElliptic(f"a # b0 - 1 has measured order {o0:.3g}, not negative")
    r = _combine([(-1, r0)])

    power = one
    series = one
    history = []
    for n in range(1, max_terms + 1):
        if n > 1:
            power = sharp_product(power, r, cfg) if not zero0 else power
            series = _combine([(1, series), (1, power)])
        b = sharp_product(b0, series, cfg)
        right = residual(a, b, cfg)
        left = residual(b, a, cfg)
        ro, rs = _residual_stats(right, pts, shell)
        lo, ls = _residual_stats(left, pts, shell)
        ok_r = ro == -math.inf or bool(order_test(right, tol_order, pts, shell, floor=NOISE_FLOOR))
        ok_l = lo == -math.inf or bool(order_test(left, tol_order, pts, shell, floor=NOISE_FLOOR))
        history.append({"terms": n, "right": ro, "left": lo, "right_sup": rs, "left_sup": ls,
                        "passed": bool(ok_r and ok_l)})
        result = ParametrixResult(b, n, {"right": ro, "left": lo}, {"right": rs, "left": ls},
                                  bool(ok_r and ok_l), history)
        if ok_r and ok_l:
            return result
        if zero0:
            break
    if raise_on_failure:
        exc = NotConverged(f"no order {tol_order:g} residual after {max_terms} terms",
                           residual_orders=result.residual_orders)
        exc.result = result
        raise exc
    return result


# ----------------------------------------------------------------------------
# Douglis-Nirenberg systems
# ----------------------------------------------------------------------------

def _grid(blocks, name):
    rows = [list(r) for r in blocks]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ShapeMismatch(f"{name} must be a rectangular matrix of symbols")
    return rows


def dn_weights(orders):
    """Weights (s, t) with s_k = 0 and t_l = m_ll; checks m_kl <= s_k + t_l
    for the remaining blocks (None marks a vanishing block)."""
    n = len(orders)
    t = [orders[l][l] for l in range(n)]
    s = [0.0] * n
    for k in range(n):
        for l in range(n):
            if orders[k][l] is not None and orders[k][l] > s[k] + t[l] + 1e-12:
                raise ScenarioInvalid(f"block ({k}, {l}) of order {orders[k][l]} exceeds the "
                                      f"weights s_k + t_l = {s[k] + t[l]}")
    return s, t


def dn_system_test(blocks, principal=None, candidate=None, orders=None, K=None,
                   shell=DEFAULT_SHELL, floor=NOISE_FLOOR):
    """Checks sum_l p_kl b_lk' - delta_kk' at order -1 on samples.

    ``blocks`` is the square matrix of scalar symbols a_kl, ``principal``
    their principal parts (default: the blocks), ``candidate`` the matrix
    b_lk'.  None entries are zero blocks.
    """
    A = _grid(blocks, "blocks")
    n = len(A)
    if len(A[0]) != n:
        raise ShapeMismatch("a Douglis-Nirenberg system is square")
    P = _grid(principal, "principal parts") if principal is not None else A
    if candidate is None:
        raise ValueError("a candidate inverse b is required")
    B = _grid(candidate, "candidate")
    if len(P) != n or len(P[0]) != n or len(B) != n or len(B[0]) != n:
        raise ShapeMismatch("blocks, principal parts and candidate must have equal shapes")
    ref = next(s for row in A for s in row if s is not None)
    for row in (*A, *P, *B):
        for s in row:
            if s is not None and s.block_shape != (1, 1):
                raise ShapeMismatch("blocks must be scalar symbols")
    if orders is None:
        orders = [[None if s is None else s.order for s in row] for row in A]
    s_w, t_w = dn_weights(orders)
    pts = _points(ref, K)

    report = EllipticityReport(Verdict("Inconclusive"))
    worst = -math.inf
    all_ok = True
    for k in range(n):
        for kk in range(n):
            terms = [(1, pointwise_product(P[k][l], B[l][kk])) for l in range(n)
                     if P[k][l] is not None and B[l][kk] is not None]
            if k == kk:
                terms.append((-1, constant_symbol(1, ref.dim, manifold=ref.manifold)))
            if not terms:
                continue
            E = _combine(terms)
            target = s_w[k] - s_w[kk] - 1.0
            if _is_zero(E):
                o, ok = -math.inf, True
            else:
                o = measured_order(E, pts, shell, floor=floor)
                ok = bool(order_test(E, target, pts, shell, floor=floor))
            report.residual_orders[f"E{k + 1}{kk + 1}"] = o
            worst = max(worst, o - (s_w[k] - s_w[kk]))
            if not ok:
                all_ok = False
                report.failure_locus.append({"entry": [k, kk], "measured_order": _num(o)})
    report.constants = {"s": s_w, "t": t_w}
    report.epsilon = -worst
    report.samples = len(pts)
    if all_ok:
        report.verdict = Verdict("EllipticGeneral")
        report.witness = B
        report.assembled = _assemble(A)
    return report


def _assemble(A):
    """Block symbol with entries a_kl (zero blocks filled in) when all are closed form."""
    ref = next(s for row in A for s in row if s is not None)
    if not all(s is None or isinstance(s, ExpressionSymbol) for row in A for s in row):
        return A
    mat = sp.Matrix([[0 if s is None else s.matrix[0, 0] for s in row] for row in A])
    order = max(s.order for row in A for s in row if s is not None)
    return ExpressionSymbol(mat, ref.dim, SymbolClass(order, ref.cls.rho, ref.cls.delta),
                            manifold=ref.manifold)
