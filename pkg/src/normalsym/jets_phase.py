"""Jets of the phase function phi(y, xi) = <xi, z_x(y)>, x = pi(xi), and
of the coordinate change z_y -> z_x near the diagonal.

phi_{alpha beta}(xi) is d^alpha along z_x at y = x of the beta-th
derivative of phi(., xi) in normal coordinates z_y centred at y.  On
manifolds with closed-form geometry the entries come from exact Taylor
jets of nested exponential and logarithm maps; otherwise from central
differences of the same nested maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import taylor
from .bundle import inner_coefficient
from .errors import DepthExceeded, OracleMismatch

__all__ = ["PhaseJet", "ChartChangeJet", "phase_jet", "phase_table_jet", "chart_change_jet",
           "coincidence_tensor", "fd_derivatives", "MAX_PHASE_DEPTH"]

MAX_PHASE_DEPTH = 5
# finite-difference steps per total order, in units of the injectivity radius
FD_PHASE_STEPS = (1e-2, 1e-2, 1e-2, 1e-2, 3e-2, 6e-2)


@dataclass
class PhaseJet:
    base: object                       # Covector
    depth: int
    entries: dict = field(default_factory=dict)

    def __getitem__(self, key):
        alpha, beta = key
        return self.entries[(tuple(alpha), tuple(beta))]


@dataclass
class ChartChangeJet:
    base: np.ndarray                   # point (manifold representation)
    first: np.ndarray                  # [k, l]     d z_x^k / d z_y^l at y = x
    second: np.ndarray                 # [k, l, m]  d^2 z_x^k / d z_y^l d z_y^m at y = x
    third: np.ndarray                  # [k, n, l, m] its derivative along z_x^n
    discrepancy: float = 0.0


def fd_derivatives(f, steps, monomials, levels=2):
    """Central differences of f at 0 for the given multi-indices.

    f maps offsets of shape (P, B, n) to values of shape (P, B, ...);
    steps has shape (B, n) (or (n,)).  One Richardson level.
    Returns {m: array (B, ...)}.
    """
    steps = np.atleast_2d(np.asarray(steps, dtype=float))
    n = steps.shape[-1]
    scale = 2 ** levels
    points = {}
    plans = []
    for m in monomials:
        plan = []
        for lev in range(levels):
            unit = scale // 2 ** lev
            stencil = [((0,) * n, 1.0)]
            for k, p in enumerate(m):
                if p == 0:
                    continue
                new = []
                for off, c in stencil:
                    for j in range(p + 1):
                        o = list(off)
                        o[k] += (p - 2 * j) * unit // 2
                        new.append((tuple(o), c * (-1) ** j * math.comb(p, j)))
                stencil = new
            terms = []
            for off, c in stencil:
                points.setdefault(off, len(points))
                terms.append((points[off], c))
            plan.append(terms)
        plans.append(plan)
    keys = sorted(points, key=points.get)
    units = np.array(keys, dtype=float) / scale          # (P, n) in multiples of h
    offsets = units[:, None, :] * steps[None, :, :]
    vals = f(offsets)
    out = {}
    for m, plan in zip(monomials, plans):
        ests = []
        for lev, terms in enumerate(plan):
            acc = 0.0
            for idx, c in terms:
                acc = acc + c * vals[idx]
            h = np.prod((steps / 2 ** lev) ** np.array(m), axis=-1)
            h = h.reshape(h.shape + (1,) * (np.ndim(acc) - 1))
            ests.append(acc / h)
        out[tuple(m)] = (4 * ests[-1] - ests[-2]) / 3 if levels > 1 and sum(m) else ests[-1]
    return out


def _check(depth):
    if depth > MAX_PHASE_DEPTH or depth < 0:
        raise DepthExceeded(f"phase jets are available up to total order {MAX_PHASE_DEPTH}")


def phase_table_jet(P, depth):
    """phi_{alpha beta} with |alpha| + |beta| <= depth at a JetPoint, as
    jets in the outer variables of P."""
    _check(depth)
    M = P.manifold
    d = M.dim
    inner = taylor.space(2 * d, depth)
    S = taylor.product(P.space, inner)
    base = P.lift(S)
    frame_x = base.get_frame()
    u = [S.variable(P.space.nvars + k) for k in range(d)]
    w = [S.variable(P.space.nvars + d + k) for k in range(d)]
    y = M.exp_jet(base.y, frame_x, u)
    frame_y = M.frame_jet(y)
    q = M.exp_jet(y, frame_y, w)
    z = M.log_jet(base.y, frame_x, q)
    eta = [e if isinstance(e, taylor.Jet) else S.constant(e) for e in base.eta]
    phi = sum(e * zk for e, zk in zip(eta, z))
    out = {}
    for m in inner.monomials:
        out[(m[:d], m[d:])] = inner_coefficient(phi, P.space, inner, m)
    return out


def _nested_log_offsets(M, p, frame, zeta=None):
    """Function of offsets (P, B, 2d) -> z_x(exp_{exp_x(u)}(w)) (P, B, d)."""
    d = M.dim

    def f(off):
        u = off[..., :d]
        w = off[..., d:]
        pp = np.broadcast_to(p, off.shape[:-1] + p.shape[-1:])
        F = np.broadcast_to(frame, off.shape[:-1] + frame.shape[-2:])
        y = M.exp(pp, np.einsum("...k,...ka->...a", u, F))
        Fy = M.frame(y)
        q = M.exp(y, np.einsum("...k,...ka->...a", w, Fy))
        z = M.components(pp, M.log(pp, q), F)
        if zeta is None:
            return z
        return np.sum(z * zeta, axis=-1)
    return f


def phase_jet(xi, depth=3, exact=None):
    """PhaseJet of the covectors xi (a symbols.Covector)."""
    _check(depth)
    M = xi.manifold
    d = M.dim
    use_exact = M.supports_jets if exact is None else exact
    entries = {}
    if use_exact:
        tab = phase_table_jet(xi.point(), depth)
        for k, v in tab.items():
            entries[k] = np.real(v.value)
        return PhaseJet(xi, depth, entries)
    p = M.from_chart(xi.x).reshape(-1, M.ambient_dim)
    zeta = xi.zeta.reshape(-1, d)
    frame = M.frame(p)
    f = _nested_log_offsets(M, p, frame, zeta)
    ders = {}
    for order in range(depth + 1):
        # shooting noise ~1e-10 is amplified by h^-order; grow the step with the order
        h = FD_PHASE_STEPS[min(order, len(FD_PHASE_STEPS) - 1)] * M.injectivity_radius
        monos = [m for m in taylor.multi_indices(2 * d, order) if sum(m) == order]
        ders.update(fd_derivatives(f, np.full((p.shape[0], 2 * d), h), monos))
    batch = xi.x.shape[:-1]
    for m, v in ders.items():
        entries[(m[:d], m[d:])] = v.reshape(batch)
    return PhaseJet(xi, depth, entries)


def coincidence_tensor(curv):
    """Curvature formula for d/dz_x^n d^2 z_x^k / dz_y^l dz_y^m at y = x:
    (R^k_{lmn} + R^k_{mln}) / 3, indexed [k, n, l, m]."""
    R = curv.riemann
    return (np.einsum("...klmn->...knlm", R) + np.einsum("...kmln->...knlm", R)) / 3.0


def chart_change_jet(manifold, x, tol=1e-5, h=None):
    """Coordinate-change tensors at the diagonal, computed from curvature
    and, independently, from central differences of nested log maps.

    Raises OracleMismatch when the two disagree by more than ``tol``.
    """
    M = manifold
    d = M.dim
    p = np.asarray(x, dtype=float).reshape(-1, M.ambient_dim)
    frame = M.frame(p)
    T_curv = coincidence_tensor(M.curvature(p))
    if h is None:
        h = 1e-2 * min(1.0, M.injectivity_radius)
    monos = [m for m in taylor.multi_indices(2 * d, 3) if sum(m[:d]) <= 1 and sum(m[d:]) >= 1]
    ders = fd_derivatives(_nested_log_offsets(M, p, frame), np.full((p.shape[0], 2 * d), h), monos)
    B = p.shape[0]
    first = np.zeros((B, d, d))
    second = np.zeros((B, d, d, d))
    third = np.zeros((B, d, d, d, d))
    for m, v in ders.items():
        a, b = m[:d], m[d:]
        ls = [i for i in range(d) for _ in range(b[i])]
        if sum(a) == 0 and len(ls) == 1:
            first[:, :, ls[0]] = v
        elif sum(a) == 0 and len(ls) == 2:
            second[:, :, ls[0], ls[1]] = v
            second[:, :, ls[1], ls[0]] = v
        elif sum(a) == 1 and len(ls) == 2:
            n = a.index(1)
            third[:, :, n, ls[0], ls[1]] = v
            third[:, :, n, ls[1], ls[0]] = v
    disc = float(max(np.max(np.abs(first - np.eye(d))), np.max(np.abs(second)),
                     np.max(np.abs(third - T_curv))))
    if disc > tol:
        raise OracleMismatch(f"curvature formula and nested-log differences disagree by {disc:.2e}",
                             discrepancy=disc)
    shape = np.shape(x)[:-1]
    return ChartChangeJet(np.asarray(x), np.broadcast_to(np.eye(d), shape + (d, d)).copy(),
                          np.zeros(shape + (d, d, d)),
                          T_curv.reshape(shape + (d, d, d, d)), disc)
