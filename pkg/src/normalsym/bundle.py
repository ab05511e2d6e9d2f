"""Taylor jets over the cotangent bundle in normal-bundle coordinates.

A :class:`JetPoint` is a covector whose base point and frame components
are Taylor jets in some outer variables.  Displacing it horizontally
along exp and/or vertically in the fibre adds inner variables; the
coefficients of the inner monomials are again jets in the outer
variables.  This is what lets derived symbols (products, adjoints) be
differentiated exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import taylor

__all__ = ["JetPoint", "plain_point", "displace", "inner_coefficient", "solve_transpose"]

TRIVIAL = taylor.JetSpace(0, 0)


@dataclass
class JetPoint:
    manifold: object
    space: taylor.JetSpace
    y: list                 # ambient components of the base point
    eta: list               # covector components in the canonical frame at y
    frame: list = None      # canonical frame at y, [k][a]
    _chart: list = field(default=None, repr=False)

    @property
    def dim(self):
        return self.manifold.dim

    @property
    def batch(self):
        return self.eta[0].batch

    def chart(self):
        if self._chart is None:
            self._chart = self.manifold.chart_jet(self.y)
        return self._chart

    def get_frame(self):
        if self.frame is None:
            self.frame = self.manifold.frame_jet(self.y)
        return self.frame

    def lift(self, target, var_map=None):
        """The same point as a jet of a larger space (outer variables first)."""
        if var_map is None:
            var_map = tuple(range(self.space.nvars))
        up = lambda j: taylor.embed(j, target, var_map) if isinstance(j, taylor.Jet) else j
        frame = None if self.frame is None else [[up(e) for e in row] for row in self.frame]
        chart = None if self._chart is None else [up(c) for c in self._chart]
        return JetPoint(self.manifold, target, [up(c) for c in self.y],
                        [up(c) for c in self.eta], frame, chart)


def plain_point(manifold, x, zeta):
    """A JetPoint without variables at chart point x and frame components zeta."""
    x = np.asarray(x, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    x, zeta = np.broadcast_arrays(x, zeta)
    p = manifold.from_chart(x)
    const = lambda a: TRIVIAL.constant(a)
    frame = manifold.frame(p)
    return JetPoint(manifold, TRIVIAL, [const(p[..., a]) for a in range(p.shape[-1])],
                    [const(zeta[..., k]) for k in range(zeta.shape[-1])],
                    [[const(frame[..., k, a]) for a in range(frame.shape[-1])]
                     for k in range(frame.shape[-2])],
                    [const(x[..., k]) for k in range(x.shape[-1])])


def _as_jet(x, sp, batch):
    if isinstance(x, taylor.Jet):
        return x
    return sp.constant(np.broadcast_to(np.asarray(x, dtype=float), batch))


def solve_transpose(D, rhs):
    """Solve sum_j D[j][k] x_j = rhs_k for jets (Gauss elimination without
    pivoting; D is close to the identity where it is used)."""
    n = len(rhs)
    A = [[D[j][k] for j in range(n)] for k in range(n)]     # A[k][j] = D[j][k]
    b = list(rhs)
    for c in range(n):
        inv = 1.0 / A[c][c] if not isinstance(A[c][c], taylor.Jet) else A[c][c].reciprocal()
        for r in range(c + 1, n):
            f = A[r][c] * inv
            A[r] = [A[r][j] - f * A[c][j] for j in range(n)]
            b[r] = b[r] - f * b[c]
    x = [None] * n
    for r in range(n - 1, -1, -1):
        acc = b[r]
        for j in range(r + 1, n):
            acc = acc - A[r][j] * x[j]
        x[r] = acc / A[r][r]
    return x


def displace(P, inner, n_h, convention="normal"):
    """Add inner variables to P: the first ``n_h`` (0 or dim) move the base
    point along exp in the canonical frame, the remaining ``dim`` (if
    present) perturb the covector.

    convention "normal": covector components t are taken in the coframe
    dz_x (the symmetrized covariant derivative convention); "fibre": t
    perturbs the frame components at the displaced point.
    Returns the displaced JetPoint over taylor.product(P.space, inner).
    """
    M = P.manifold
    d = M.dim
    S = taylor.product(P.space, inner)
    n_out = P.space.nvars
    Q = P.lift(S)
    inner_vars = [S.variable(n_out + k) for k in range(inner.nvars)]
    u = inner_vars[:n_h]
    t = inner_vars[n_h:]
    batch = P.batch
    eta = [_as_jet(e, S, batch) for e in Q.eta]
    if n_h:
        frame = Q.get_frame()
        if M.flat:
            y = M.exp_jet(Q.y, frame, u)
            Dm = None
            frame_y = frame
        else:
            y, dy = M.exp_jet(Q.y, frame, u, derivative=True)
            frame_y = M.frame_jet(y)
            Dm = [[sum(frame_y[j][a] * dy[k][a] for a in range(len(y))) for k in range(d)]
                  for j in range(d)]
        y = [_as_jet(c, S, batch) for c in y]
        frame_y = [[_as_jet(e, S, batch) for e in row] for row in frame_y]
    else:
        y, frame_y, Dm = Q.y, Q.frame, None
    if t and convention == "normal":
        eta = [e + tk for e, tk in zip(eta, t)]
    if Dm is not None:
        eta = solve_transpose(Dm, eta)
    if t and convention == "fibre":
        eta = [e + tk for e, tk in zip(eta, t)]
    chart = Q._chart if not n_h else None
    return JetPoint(M, S, y, eta, frame_y, chart)


def inner_coefficient(jet, outer, inner, monomial, derivative=True):
    """Coefficient (or derivative, times monomial!) of an inner monomial,
    as a jet of the outer space."""
    c = jet.c.reshape(jet.c.shape[:-1] + (outer.size, inner.size))
    i = inner.index[tuple(monomial)]
    val = c[..., i]
    if derivative:
        val = val * inner.factorial[i]
    return taylor.Jet(outer, val.copy())
