"""The normal symbol calculus: product and adjoint expansions.

The product of two symbols is the truncated expansion

    sum_{alpha}  i^{-|alpha|}/alpha! D^alpha_zeta a . D^alpha_z b
  + sum_{k>=1} i^{k-|alpha|-|beta|} / (k! at! a_1!..a_k! b_1!..b_k!)
        D^alpha_zeta a . D^{at}_z [D^beta_zeta b at d phi] . prod_j phi_{a_j b_j}

with alpha = at + a_1 + ... + a_k, beta = b_1 + ... + b_k, |b_j| >= 2.
A summand lowers the order by |alpha| + |beta| - k, and only summands with
drop <= N are kept.  For N <= 2 the curvature form of the expansion is
used directly ("curvature" mode); the "general" mode sums the expansion
above with phase jets.

On flat manifolds closed-form inputs are handled symbolically, so the
classical expansions come out as exact expressions.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import sympy as sp

from . import taylor
from .bundle import displace, inner_coefficient
from .errors import ClassMismatch, DepthExceeded, JetDepthExceeded, ShapeMismatch
from .expression import variables
from .geometry import _constant_curvature
from .jets_phase import phase_jet, phase_table_jet
from .symbols import (Covector, DerivedSymbol, ExpressionSymbol, Symbol, SymbolClass,
                      closed_form, jet)

__all__ = ["ExpansionConfig", "ProductTerm", "ProductTermLedger", "SharpProduct", "Adjoint",
           "sharp_product", "adjoint_symbol", "apply_to_function_expansion", "term_ledger",
           "product_summands", "classical_composition", "LITERAL_R_COEFFICIENT"]

# coefficient of the curvature summand as printed in the usual statement of
# the second-order formula; the value implied by the general expansion is -1/3
LITERAL_R_COEFFICIENT = -1.0 / 12.0


@dataclass(frozen=True)
class ExpansionConfig:
    """Truncation of the expansions.

    max_order_drop: keep summands lowering the order by at most N.
    mode: "curvature" (N <= 2, curvature tensor closed form) or
    "general" (N <= 4, phase jets).
    r_coefficient: weight of the curvature summand in curvature mode.
    """

    max_order_drop: int = 2
    mode: str = "curvature"
    r_coefficient: float = -1.0 / 3.0
    symbolic: bool = True

    def __post_init__(self):
        N = self.max_order_drop
        if self.mode not in ("curvature", "general"):
            raise ValueError(f"unknown expansion mode {self.mode!r}")
        if self.mode == "curvature" and N not in (0, 1, 2):
            raise DepthExceeded("curvature mode supports N in {0, 1, 2}")
        if self.mode == "general" and not 0 <= N <= 4:
            raise DepthExceeded("general mode supports 0 <= N <= 4")

    @property
    def jet_depth(self):
        return self.max_order_drop + 2


# ----------------------------------------------------------------------------
# summand enumeration
# ----------------------------------------------------------------------------

def _mfact(m):
    return math.prod(math.factorial(k) for k in m)


def _add(*ms):
    return tuple(map(sum, zip(*ms)))


@dataclass(frozen=True)
class Summand:
    alpha_tilde: tuple
    alphas: tuple            # (alpha_1, ..., alpha_k)
    betas: tuple             # (beta_1, ..., beta_k)
    coefficient: complex     # i^{k-|alpha|-|beta|} / (k! at! prod alpha_j! prod beta_j!)
    ratio: Fraction          # real rational part of the coefficient

    @property
    def k(self):
        return len(self.alphas)

    @property
    def alpha(self):
        return _add(self.alpha_tilde, *self.alphas) if self.alphas else self.alpha_tilde

    @property
    def beta(self):
        d = len(self.alpha_tilde)
        return _add(*self.betas) if self.betas else (0,) * d

    @property
    def drop(self):
        return sum(self.alpha) + sum(self.beta) - self.k

    @property
    def vanishing(self):
        """True when a phase factor phi_{0 beta} with |beta| >= 2 occurs."""
        return any(sum(a) == 0 for a in self.alphas)


@functools.lru_cache(maxsize=None)
def product_summands(d, N, include_vanishing=False):
    """All summands of the product expansion with order drop <= N, in
    graded order (k, then alpha, then the phase factors)."""
    out = []
    pairs = [(a, b) for a in taylor.multi_indices(d, N + 1)
             for b in taylor.multi_indices(d, N + 1, min_order=2)
             if sum(a) + sum(b) - 1 <= N and (include_vanishing or sum(a) > 0)]

    def tuples(budget):
        # ordered tuples of phase factors with total drop <= budget
        yield ()
        for a, b in pairs:
            cost = sum(a) + sum(b) - 1
            if cost <= budget:
                for rest in tuples(budget - cost):
                    yield ((a, b),) + rest

    for combo in sorted(tuples(N), key=len):
        k = len(combo)
        alphas = tuple(a for a, _ in combo)
        betas = tuple(b for _, b in combo)
        base_drop = sum(sum(a) + sum(b) - 1 for a, b in combo)
        for at in taylor.multi_indices(d, N - base_drop):
            a_tot = sum(at) + sum(sum(a) for a in alphas)
            b_tot = sum(sum(b) for b in betas)
            power = (k - a_tot - b_tot) % 4
            ratio = Fraction(1, math.factorial(k) * _mfact(at)
                             * math.prod(_mfact(a) for a in alphas)
                             * math.prod(_mfact(b) for b in betas))
            coef = complex((1, 1j, -1, -1j)[power]) * float(ratio)
            out.append(Summand(at, alphas, betas, coef, ratio))
    return tuple(out)


# ----------------------------------------------------------------------------
# helpers on jets
# ----------------------------------------------------------------------------

def _block(s):
    """Scalar jet (batch) -> jet broadcastable against blocks (batch, 1, 1)."""
    return s.expand(-1).expand(-1)


def _vertical_table(a, P, order):
    inner = taylor.space(P.dim, order)
    Q = displace(P, inner, 0)
    J = a.eval_jet(Q)
    return {m: inner_coefficient(J, P.space, inner, m) for m in inner.monomials}


def _mixed_table(b, P, inner, convention):
    d = P.dim
    Q = displace(P, inner, d, convention)
    J = b.eval_jet(Q)
    return {(m[:d], m[d:]): inner_coefficient(J, P.space, inner, m) for m in inner.monomials}


def _check_pair(a, b):
    if a.block_shape[1] != b.block_shape[0]:
        raise ShapeMismatch(f"block shapes {a.block_shape} and {b.block_shape} do not compose")
    if (a.cls.rho, a.cls.delta) != (b.cls.rho, b.cls.delta):
        raise ClassMismatch(f"types ({a.cls.rho}, {a.cls.delta}) and "
                            f"({b.cls.rho}, {b.cls.delta}) differ")
    if a.dim != b.dim:
        raise ShapeMismatch("symbols live over manifolds of different dimension")


def _riemann_const(M):
    kappa = M.constant_curvature
    if kappa is None:
        return None
    return _constant_curvature(M.dim, kappa).riemann


# ----------------------------------------------------------------------------
# product
# ----------------------------------------------------------------------------

class SharpProduct(DerivedSymbol):
    """Truncated product expansion of two symbols."""

    def __init__(self, a, b, cfg, manifold=None):
        _check_pair(a, b)
        cls = SymbolClass(a.order + b.order, a.cls.rho, a.cls.delta)
        super().__init__(cls, (a.block_shape[0], b.block_shape[1]), a.dim,
                         f"sharp product (N={cfg.max_order_drop}, {cfg.mode})", (a, b),
                         manifold=manifold)
        self.cfg = cfg

    def _geometric(self):
        return True

    @property
    def exact_jets(self):
        M = self.manifold
        ok = M is not None and M.supports_jets
        if self.cfg.mode == "curvature" and ok and not M.flat:
            ok = M.constant_curvature is not None
        return ok and all(p.exact_jets for p in self.parents)

    # exact route ----------------------------------------------------------
    def eval_jet(self, P):
        a, b = self.parents
        N = self.cfg.max_order_drop
        A = _vertical_table(a, P, N)
        if self.cfg.mode == "curvature":
            return self._curvature_jet(P, A)
        d = P.dim
        G = _mixed_table(b, P, taylor.space(2 * d, N), "fibre")
        phi = phase_table_jet(P, N + 1) if N >= 2 else {}
        acc = None
        for s in product_summands(d, N):
            term = taylor.matmul(A[s.alpha], G[(s.alpha_tilde, s.beta)]) * s.coefficient
            for al, be in zip(s.alphas, s.betas):
                term = term * _block(phi[(al, be)].astype(complex))
            acc = term if acc is None else acc + term
        return acc

    def _curvature_jet(self, P, A):
        a, b = self.parents
        M = self.manifold
        d = P.dim
        N = self.cfg.max_order_drop
        n_v = 2 if N >= 2 and not M.flat else 0
        inner = taylor.split_space(d, N, d, n_v) if n_v else taylor.space(d, N)
        if n_v:
            B = _mixed_table(b, P, inner, "normal")
        else:
            Q = displace(P, inner, d)
            J = b.eval_jet(Q)
            z0 = (0,) * d
            B = {(m, z0): inner_coefficient(J, P.space, inner, m) for m in inner.monomials}
        z0 = (0,) * d
        acc = None
        for al in taylor.multi_indices(d, N):
            c = (-1j) ** sum(al) / _mfact(al)
            term = taylor.matmul(A[al], B[(al, z0)]) * c
            acc = term if acc is None else acc + term
        if n_v:
            R = _riemann_const(M)
            eta = [e.astype(complex) if isinstance(e, taylor.Jet) else e for e in P.eta]
            for n in range(d):
                en = tuple(int(i == n) for i in range(d))
                for l, m in itertools.product(range(d), repeat=2):
                    w = sum(R[k, m, l, n] * eta[k] for k in range(d) if R[k, m, l, n] != 0)
                    if isinstance(w, (int, float)):
                        continue
                    blm = _add(tuple(int(i == l) for i in range(d)),
                               tuple(int(i == m) for i in range(d)))
                    term = taylor.matmul(A[en], B[(z0, blm)]) * _block(w)
                    acc = acc + term * self.cfg.r_coefficient
        return acc

    # numeric route (finite-difference jets) -------------------------------
    def _evaluate_numeric(self, x, zeta, M):
        a, b = self.parents
        N = self.cfg.max_order_drop
        M = self.manifold if self.manifold is not None else M
        xi = Covector(M, x, zeta)
        d = M.dim
        JA = jet(a, xi, 0, N)
        z0 = (0,) * d
        if self.cfg.mode == "general":
            if 2 * N > 6:
                raise JetDepthExceeded("finite-difference general mode supports N <= 3")
            JB = jet(b, xi, N, N, convention="fibre")
            phi = phase_jet(xi, N + 1).entries if N >= 2 else {}
            acc = 0.0
            for s in product_summands(d, N):
                term = s.coefficient * (JA[(z0, s.alpha)] @ JB[(s.alpha_tilde, s.beta)])
                for al, be in zip(s.alphas, s.betas):
                    term = term * phi[(al, be)][..., None, None]
                acc = acc + term
            return acc
        JB = jet(b, xi, N, 0)
        acc = 0.0
        for al in taylor.multi_indices(d, N):
            acc = acc + (-1j) ** sum(al) / _mfact(al) * (JA[(z0, al)] @ JB[(al, z0)])
        if N >= 2 and not M.flat:
            JV = jet(b, xi, 0, 2)
            p = M.from_chart(xi.x)
            R = M.curvature(p).riemann
            w = np.einsum("...kmln,...k->...mln", R, xi.zeta)
            for n, l, m in itertools.product(range(d), repeat=3):
                en = tuple(int(i == n) for i in range(d))
                blm = _add(tuple(int(i == l) for i in range(d)), tuple(int(i == m) for i in range(d)))
                acc = acc + self.cfg.r_coefficient * (JA[(z0, en)] @ JV[(z0, blm)]) \
                    * w[..., m, l, n][..., None, None]
        return acc


def _tidy(e):
    try:
        return sp.cancel(sp.expand(e))
    except (sp.PolynomialError, TypeError, ValueError):
        return sp.simplify(e)


def classical_composition(a, b, N, dim):
    """Flat composition expansion sum_{|alpha| <= N} (-i)^|alpha|/alpha!
    d_zeta^alpha a d_x^alpha b of sympy matrices."""
    xs, zs = variables(dim)
    A = sp.Matrix(a)
    B = sp.Matrix(b)
    out = sp.zeros(A.shape[0], B.shape[1])
    for al in taylor.multi_indices(dim, N):
        dA, dB = A, B
        for k, n in enumerate(al):
            if n:
                dA = dA.diff(zs[k], n)
                dB = dB.diff(xs[k], n)
        out += (-sp.I) ** sum(al) / _mfact(al) * (dA * dB)
    return out.applyfunc(_tidy)


def _flat_symbolic(M, *syms):
    return (M is None or M.flat) and all(isinstance(s, ExpressionSymbol) for s in syms)


_S = sp.Symbol("s", positive=True)


def radial_profile(a):
    """Matrix h(s) with a(x, zeta) = h(|zeta|^2) when a is an x-independent
    isotropic closed-form symbol, else None."""
    if not isinstance(a, ExpressionSymbol) or a.depends_on_x:
        return None
    _, zs = variables(a.dim)
    sub = {z: 0 for z in zs[1:]}
    sub[zs[0]] = sp.sqrt(_S)
    h = a.matrix.subs(sub)
    s_expr = sum(z ** 2 for z in zs)
    back = h.subs(_S, s_expr)
    rng = np.random.default_rng(7)
    for _ in range(3):
        pt = dict(zip(zs, rng.normal(size=a.dim) * 3))
        lhs = np.array(a.matrix.subs(pt).evalf(), dtype=complex)
        rhs = np.array(back.subs(pt).evalf(), dtype=complex)
        if not np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12):
            return None
    return h


def isotropic_composition(ha, hb, N, dim, kappa, r_coefficient=-1 / 3):
    """N <= 2 product of radial profiles on a space of constant curvature
    kappa: horizontal first derivatives vanish, the second derivatives of
    |D(u)^{-T} zeta|^2 are (2 kappa / 3)(s delta - zeta zeta^T), and the
    R-term contracts to -4 kappa (d - 1) s f' g'.  Returns the profile."""
    out = ha * hb
    if N >= 2:
        c = kappa * (dim - 1) * (-sp.Rational(2, 3) - 4 * sp.nsimplify(r_coefficient))
        out = out + c * _S * ha.diff(_S) * hb.diff(_S)
    return out.applyfunc(lambda e: sp.factor(sp.cancel(e)))


def sharp_product(a, b, cfg=None, manifold=None):
    """Truncated product a # b (see module docstring)."""
    cfg = cfg or ExpansionConfig()
    _check_pair(a, b)
    M = manifold if manifold is not None else (a.manifold or b.manifold)
    if cfg.symbolic and _flat_symbolic(M, a, b):
        mat = classical_composition(a.matrix, b.matrix, cfg.max_order_drop, a.dim)
        cls = SymbolClass(a.order + b.order, a.cls.rho, a.cls.delta)
        return ExpressionSymbol(mat, a.dim, cls, manifold=M)
    if (cfg.symbolic and cfg.mode == "curvature" and M is not None
            and M.constant_curvature is not None):
        ha, hb = radial_profile(a), radial_profile(b)
        if ha is not None and hb is not None:
            h = isotropic_composition(ha, hb, cfg.max_order_drop, a.dim,
                                      sp.nsimplify(M.constant_curvature), cfg.r_coefficient)
            _, zs = variables(a.dim)
            mat = h.subs(_S, sum(z ** 2 for z in zs))
            cls = SymbolClass(a.order + b.order, a.cls.rho, a.cls.delta)
            return ExpressionSymbol(mat, a.dim, cls, manifold=M)
    if M is None:
        raise ValueError("a manifold is needed for the product of non-closed-form symbols")
    return SharpProduct(a, b, cfg, manifold=M)


# ----------------------------------------------------------------------------
# adjoint
# ----------------------------------------------------------------------------

def _conjugate_transpose(J):
    c = np.conj(np.swapaxes(J.c, -2, -3))
    return taylor.Jet(J.space, np.ascontiguousarray(c))


class Adjoint(DerivedSymbol):
    """Truncated adjoint expansion."""

    def __init__(self, a, cfg, manifold=None):
        r, c = a.block_shape
        super().__init__(a.cls, (c, r), a.dim, f"adjoint (N={cfg.max_order_drop})", (a,),
                         manifold=manifold)
        self.cfg = cfg

    def _geometric(self):
        return True

    @property
    def exact_jets(self):
        M = self.manifold
        return (M is not None and M.supports_jets and self.parents[0].exact_jets
                and (M.flat or M.constant_curvature is not None))

    def eval_jet(self, P):
        a = self.parents[0]
        M = self.manifold
        d = P.dim
        N = self.cfg.max_order_drop
        T = _mixed_table(a, P, taylor.box_space(d, N, d, N), "normal")
        T = {k: _conjugate_transpose(v) for k, v in T.items()}
        return self._assemble(T, d, N, None if M.flat else M.constant_curvature * (d - 1))

    def _assemble(self, T, d, N, ricci_scale, ricci=None):
        z0 = (0,) * d
        e = [tuple(int(i == k) for i in range(d)) for k in range(d)]
        acc = T[(z0, z0)]
        if N >= 1:
            for k in range(d):
                acc = acc - 1j * T[(e[k], e[k])]
        if N >= 2:
            for k, l in itertools.product(range(d), repeat=2):
                acc = acc - 0.5 * T[(_add(e[k], e[l]), _add(e[k], e[l]))]
            for k, l in itertools.product(range(d), repeat=2):
                if ricci is not None:
                    acc = acc - (1.0 / 6.0) * T[(z0, _add(e[k], e[l]))] * ricci[..., k, l][..., None, None]
                elif ricci_scale and k == l:
                    acc = acc - (ricci_scale / 6.0) * T[(z0, _add(e[k], e[l]))]
        return acc

    def _evaluate_numeric(self, x, zeta, M):
        a = self.parents[0]
        M = self.manifold if self.manifold is not None else M
        xi = Covector(M, x, zeta)
        d = M.dim
        N = self.cfg.max_order_drop
        tab = jet(a, xi, N, N)
        T = {k: np.conj(np.swapaxes(v, -1, -2)) for k, v in tab.entries.items()}
        ricci = M.curvature(M.from_chart(xi.x)).ricci
        return self._assemble(T, d, N, None, ricci)


def adjoint_symbol(a, cfg=None, manifold=None):
    """Truncated expansion of the symbol of the formal adjoint."""
    cfg = cfg or ExpansionConfig()
    if cfg.max_order_drop > 2:
        raise DepthExceeded("the adjoint expansion is implemented up to N = 2")
    if (a.cls.rho, a.cls.delta) != (1.0, 0.0) and a.cls.rho <= a.cls.delta:
        raise ClassMismatch("the adjoint expansion needs rho > delta")
    M = manifold if manifold is not None else a.manifold
    if cfg.symbolic and _flat_symbolic(M, a):
        xs, zs = variables(a.dim)
        A = a.matrix.T.applyfunc(sp.conjugate)
        out = sp.Matrix(A)
        N = cfg.max_order_drop
        for al in taylor.multi_indices(a.dim, N, min_order=1):
            dA = A
            for k, n in enumerate(al):
                if n:
                    dA = dA.diff(zs[k], n).diff(xs[k], n)
            out += (-sp.I) ** sum(al) / _mfact(al) * dA
        return ExpressionSymbol(out.applyfunc(_tidy), a.dim, a.cls, manifold=M)
    if M is None:
        raise ValueError("a manifold is needed for the adjoint of non-closed-form symbols")
    return Adjoint(a, cfg, manifold=M)


# ----------------------------------------------------------------------------
# action on functions
# ----------------------------------------------------------------------------

def _function_jets(f, xi, N):
    """D^alpha_z f at pi(xi), |alpha| <= N, as {alpha: array}."""
    M = xi.manifold
    d = M.dim
    if isinstance(f, str):
        f = closed_form(f, d, 0, manifold=M)
    if isinstance(f, Symbol):
        tab = jet(f, xi, N, 0)
        z0 = (0,) * d
        return {al: tab[(al, z0)][..., 0, 0] for al in taylor.multi_indices(d, N)}
    from .jets_phase import fd_derivatives
    p = M.from_chart(xi.x).reshape(-1, M.ambient_dim)
    F = M.frame(p)

    def g(off):
        pp = np.broadcast_to(p, off.shape[:-1] + p.shape[-1:])
        FF = np.broadcast_to(F, off.shape[:-1] + F.shape[-2:])
        y = M.exp(pp, np.einsum("...k,...ka->...a", off, FF))
        return np.asarray(f(M.chart_coords(y)), dtype=complex)

    h = 1e-2 * min(1.0, M.injectivity_radius)
    ders = fd_derivatives(g, np.full((p.shape[0], d), h), taylor.multi_indices(d, N))
    batch = np.shape(xi.x)[:-1]
    return {m: v.reshape(batch) for m, v in ders.items()}


def apply_to_function_expansion(a, f, xi, N):
    """Truncated expansion sum_{|alpha| <= N} i^{-|alpha|}/alpha! D^alpha_zeta a D^alpha_z f
    of e^{-i phi} Op(a)(f e^{i phi}) at pi(xi).

    ``f`` is a closed-form expression string, a position-only Symbol, or a
    callable on chart coordinates (differentiated numerically).
    """
    if N > 6:
        raise JetDepthExceeded("expansion depth exceeds the available jets")
    d = xi.manifold.dim
    A = jet(a, xi, 0, N)
    Fj = _function_jets(f, xi, N)
    z0 = (0,) * d
    acc = 0.0
    for al in taylor.multi_indices(d, N):
        acc = acc + (-1j) ** sum(al) / _mfact(al) * A[(z0, al)] * Fj[al][..., None, None]
    return acc[..., 0, 0] if a.is_scalar else acc


# ----------------------------------------------------------------------------
# ledger
# ----------------------------------------------------------------------------

@dataclass
class ProductTerm:
    summand: Summand
    value: np.ndarray
    drop: int
    predicted_order: float

    @property
    def alpha(self):
        return self.summand.alpha

    @property
    def coefficient(self):
        return self.summand.coefficient


@dataclass
class ProductTermLedger:
    base: object
    terms: list = field(default_factory=list)

    def total(self):
        return sum(t.value for t in self.terms)

    def by_drop(self, drop):
        return [t for t in self.terms if t.drop == drop]

    def select(self, k=None, alpha=None, beta=None):
        out = []
        for t in self.terms:
            s = t.summand
            if k is not None and s.k != k:
                continue
            if alpha is not None and s.alpha != tuple(alpha):
                continue
            if beta is not None and s.beta != tuple(beta):
                continue
            out.append(t)
        return out


def term_ledger(a, b, xi, cfg=None):
    """Every summand of the product expansion at xi with its value and the
    order it is predicted to have."""
    cfg = cfg or ExpansionConfig(mode="general")
    _check_pair(a, b)
    M = xi.manifold
    d = M.dim
    N = cfg.max_order_drop
    gap = a.cls.rho - a.cls.delta
    summands = product_summands(d, N, include_vanishing=True)
    exact = M.supports_jets and a.exact_jets and b.exact_jets
    if exact:
        P = xi.point()
        A = {k: v.value for k, v in _vertical_table(a, P, N).items()}
        depth = max(sum(s.alpha_tilde) + sum(s.beta) for s in summands)
        G = _mixed_table(b, P, taylor.space(2 * d, depth), "fibre")
        G = {k: v.value for k, v in G.items()}
        phi = {k: np.real(v.value) for k, v in phase_table_jet(P, min(N + 1, 5)).items()}
    else:
        A = {k[1]: v for k, v in jet(a, xi, 0, N).entries.items()}
        if 3 * N > 6:
            raise JetDepthExceeded("finite-difference ledger supports N <= 2")
        G = jet(b, xi, N, 2 * N, convention="fibre").entries
        phi = phase_jet(xi, min(N + 1, 5)).entries
    ledger = ProductTermLedger(xi)
    for s in summands:
        val = s.coefficient * (A[s.alpha] @ G[(s.alpha_tilde, s.beta)])
        for al, be in zip(s.alphas, s.betas):
            val = val * phi[(al, be)][..., None, None]
        ledger.terms.append(ProductTerm(s, val, s.drop, a.order + b.order - gap * s.drop))
    return ledger
