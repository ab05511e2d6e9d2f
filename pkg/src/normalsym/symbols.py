"""Symbols on the cotangent bundle: classes, evaluation, jets, seminorms
and asymptotic summation.

A symbol is a function a(x, zeta) of a chart point x and the components
zeta of a covector in the canonical orthonormal frame at x.  Values are
(rows, cols) blocks; scalar symbols are 1 x 1.  Symbols given by an
expression (closed form or polynomial in zeta) are differentiated
exactly with Taylor jets; others fall back on central differences with
Richardson extrapolation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from . import taylor
from .bundle import displace, inner_coefficient, plain_point
from .errors import JetDepthExceeded, NonDecreasingOrders, StepUnderflow
from .expression import parse, variables
from .geometry import smooth_step, smooth_step_jet

__all__ = [
    "SymbolClass", "Symbol", "ClosedForm", "Polynomial", "Tabulated", "Derived",
    "ExpressionSymbol", "CallableSymbol", "Covector", "JetTable", "AsymptoticSeries",
    "closed_form", "constant_symbol", "polynomial_symbol", "norm_squared", "jet",
    "seminorm", "order_test", "OrderVerdict", "asymptotic_sum", "excision",
    "polynomial_to_json", "polynomial_from_json", "sample_chart_points", "shell_covectors",
    "MAX_JET_DEPTH",
]

MAX_JET_DEPTH = 6


# ----------------------------------------------------------------------------
# classes and metadata
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SymbolClass:
    """Order mu and type (rho, delta)."""

    order: float
    rho: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        if not (0 <= self.delta < self.rho <= 1 and self.rho + self.delta >= 1):
            raise ValueError("type must satisfy 0 <= delta < rho <= 1 and rho + delta >= 1")

    def weight(self, n_h, n_v):
        """Exponent of (1+|xi|) bounding a derivative with n_h horizontal
        and n_v vertical orders."""
        return self.order + self.delta * n_h - self.rho * n_v

    def with_order(self, order):
        return SymbolClass(order, self.rho, self.delta)

    @property
    def gap(self):
        return self.rho - self.delta


@dataclass(frozen=True)
class ClosedForm:
    expr: object            # sympy Matrix


@dataclass(frozen=True)
class Polynomial:
    coefficients: dict      # multi-index -> sympy Matrix


@dataclass(frozen=True)
class Tabulated:
    description: str = "callable"
    grid: object = None


@dataclass(frozen=True)
class Derived:
    provenance: str
    parents: tuple = ()


# ----------------------------------------------------------------------------
# compiled expressions (work on numpy arrays and on Taylor jets)
# ----------------------------------------------------------------------------

_FUNCS = {sp.exp: taylor.exp, sp.sin: taylor.sin, sp.cos: taylor.cos, sp.log: taylor.log}


def _compile_node(e, slots):
    if e in slots:
        k = slots[e]
        return lambda env: env[k]
    if e.is_number:
        val = complex(e)
        val = val.real if val.imag == 0 else val
        return lambda env: val
    if e.is_Add:
        parts = [_compile_node(a, slots) for a in e.args]

        def add(env):
            acc = parts[0](env)
            for p in parts[1:]:
                acc = acc + p(env)
            return acc
        return add
    if e.is_Mul:
        parts = [_compile_node(a, slots) for a in e.args]

        def mul(env):
            acc = parts[0](env)
            for p in parts[1:]:
                acc = acc * p(env)
            return acc
        return mul
    if e.is_Pow:
        base = _compile_node(e.base, slots)
        ex = e.exp
        if ex.is_Integer:
            n = int(ex)
            if n < 0:
                return lambda env: 1.0 / _ipow(base(env), -n)
            return lambda env: _ipow(base(env), n)
        if ex.is_number:
            p = complex(ex)
            p = p.real if p.imag == 0 else p
            if p == 0.5:
                return lambda env: taylor.sqrt(base(env))
            return lambda env: _rpow(base(env), p)
        ef = _compile_node(ex, slots)
        return lambda env: _gpow(base(env), ef(env))
    fn = _FUNCS.get(e.func)
    if fn is not None:
        arg = _compile_node(e.args[0], slots)
        return lambda env: fn(arg(env))
    raise ValueError(f"cannot compile {e.func} in {e}")


def _ipow(b, n):
    if isinstance(b, taylor.Jet):
        return b ** n
    return np.power(b, n) if n else np.ones_like(b)


def _rpow(b, p):
    if isinstance(b, taylor.Jet):
        return taylor.power(b, p)
    b = np.asarray(b)
    if np.iscomplexobj(b) or np.any(np.real(b) < 0) or isinstance(p, complex):
        return np.power(b.astype(complex), p)
    return np.power(b, p)


def _gpow(b, q):
    if isinstance(b, taylor.Jet) or isinstance(q, taylor.Jet):
        lb = taylor.log(b) if isinstance(b, taylor.Jet) else np.log(np.asarray(b, dtype=complex))
        return taylor.exp(q * lb)
    return np.power(np.asarray(b, dtype=complex), q)


class CompiledMatrix:
    """Entries of a sympy matrix as callables of (x_1..x_d, zeta_1..zeta_d)."""

    def __init__(self, matrix, dim):
        self.matrix = sp.Matrix(matrix)
        self.dim = dim
        xs, zs = variables(dim)
        self.args = xs + zs
        reps, reduced = sp.cse(list(self.matrix), optimizations=None)
        slots = {s: k for k, s in enumerate(self.args)}
        self._steps = []
        for k, (sym, sub) in enumerate(reps):
            self._steps.append(_compile_node(sub, slots))
            slots[sym] = len(self.args) + k
        self._entries = [_compile_node(r, slots) for r in reduced]
        free = self.matrix.free_symbols
        self.uses_x = any(s in free for s in xs)

    def __call__(self, xs, zs):
        env = list(xs) + list(zs)
        for step in self._steps:
            env.append(step(env))
        return [f(env) for f in self._entries]


# ----------------------------------------------------------------------------
# symbols
# ----------------------------------------------------------------------------

class Symbol:
    """Base class.  Subclasses implement ``_values`` (numeric) and, when
    ``exact_jets`` is true, ``eval_jet`` on :class:`~normalsym.bundle.JetPoint`."""

    exact_jets = False
    depends_on_x = True

    def __init__(self, cls, block_shape, dim, metadata, manifold=None):
        self.cls = cls
        self.block_shape = tuple(int(n) for n in block_shape)
        self.dim = int(dim)
        self.metadata = metadata
        self.manifold = manifold

    @property
    def order(self):
        return self.cls.order

    @property
    def is_scalar(self):
        return self.block_shape == (1, 1)

    # numeric values, shape (..., rows, cols)
    def evaluate(self, x, zeta, manifold=None):
        raise NotImplementedError

    def __call__(self, x, zeta, manifold=None):
        v = self.evaluate(x, zeta, manifold)
        return v[..., 0, 0] if self.is_scalar else v

    def eval_jet(self, P):
        raise NotImplementedError(f"{type(self).__name__} has no exact jets")

    def uses_geometry(self):
        return self.manifold

    def __repr__(self):
        return f"{type(self).__name__}(order={self.order}, block={self.block_shape})"

    # pointwise algebra
    def __add__(self, other):
        return linear_combination([(1.0, self), (1.0, _as_symbol(other, self))])

    __radd__ = __add__

    def __sub__(self, other):
        return linear_combination([(1.0, self), (-1.0, _as_symbol(other, self))])

    def __rsub__(self, other):
        return linear_combination([(1.0, _as_symbol(other, self)), (-1.0, self)])

    def __neg__(self):
        return linear_combination([(-1.0, self)])

    def __mul__(self, other):
        if np.isscalar(other):
            return linear_combination([(other, self)])
        return pointwise_product(self, _as_symbol(other, self))

    def __rmul__(self, other):
        if np.isscalar(other):
            return linear_combination([(other, self)])
        return pointwise_product(_as_symbol(other, self), self)


def _manifold_of(*syms, manifold=None):
    for s in syms:
        if getattr(s, "manifold", None) is not None:
            return s.manifold
    return manifold


class ExpressionSymbol(Symbol):
    """Symbol given by a sympy matrix in x1..xd, zeta1..zetad."""

    exact_jets = True

    def __init__(self, matrix, dim, cls, metadata=None, manifold=None):
        matrix = sp.Matrix(matrix)
        super().__init__(cls, matrix.shape, dim,
                         metadata if metadata is not None else ClosedForm(matrix), manifold)
        self.matrix = matrix
        self._compiled = CompiledMatrix(matrix, dim)
        self.depends_on_x = self._compiled.uses_x

    @property
    def expr(self):
        return self.matrix[0, 0] if self.is_scalar else self.matrix

    def evaluate(self, x, zeta, manifold=None):
        x = np.asarray(x, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        x, zeta = np.broadcast_arrays(x, zeta)
        vals = self._compiled([x[..., k] for k in range(self.dim)],
                              [zeta[..., k] for k in range(self.dim)])
        batch = x.shape[:-1]
        out = np.empty(batch + (len(vals),), dtype=complex)
        for k, v in enumerate(vals):
            out[..., k] = v
        return out.reshape(batch + self.block_shape)

    def eval_jet(self, P):
        sp_ = P.space
        batch = P.batch
        xs = P.chart() if self.depends_on_x else [0.0] * self.dim
        vals = self._compiled(xs, P.eta)
        jets = [v if isinstance(v, taylor.Jet) else sp_.constant(np.broadcast_to(v, batch))
                for v in vals]
        out = taylor.stack([j.astype(complex) for j in jets], axis=-1)
        return taylor.Jet(sp_, out.c.reshape(batch + self.block_shape + (sp_.size,)))


class CallableSymbol(Symbol):
    """Black-box symbol; ``fn(x, zeta)`` returns (..., rows, cols) or (...)."""

    def __init__(self, fn, dim, cls, block_shape=(1, 1), metadata=None, manifold=None,
                 depends_on_x=True):
        super().__init__(cls, block_shape, dim, metadata or Tabulated(), manifold)
        self.fn = fn
        self.depends_on_x = depends_on_x

    def evaluate(self, x, zeta, manifold=None):
        x = np.asarray(x, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        x, zeta = np.broadcast_arrays(x, zeta)
        v = np.asarray(self.fn(x, zeta), dtype=complex)
        return v.reshape(x.shape[:-1] + self.block_shape)


class DerivedSymbol(Symbol):
    """Symbol computed from others; exact jets when all parents have them
    and the manifold supports jets."""

    def __init__(self, cls, block_shape, dim, provenance, parents, manifold=None):
        manifold = _manifold_of(*parents, manifold=manifold)
        super().__init__(cls, block_shape, dim, Derived(provenance, tuple(parents)), manifold)
        self.parents = tuple(parents)
        self.depends_on_x = any(p.depends_on_x for p in parents) or self._geometric()

    def _geometric(self):
        return False

    @property
    def exact_jets(self):
        M = self.manifold
        ok = M is None or M.supports_jets
        return ok and all(p.exact_jets for p in self.parents)

    def evaluate(self, x, zeta, manifold=None):
        M = self.manifold if self.manifold is not None else manifold
        if self.exact_jets:
            if M is None:
                raise ValueError("derived symbol needs a manifold to evaluate")
            return self.eval_jet(plain_point(M, x, zeta)).value
        return self._evaluate_numeric(np.asarray(x, dtype=float), np.asarray(zeta, dtype=float), M)

    def _evaluate_numeric(self, x, zeta, manifold):
        raise NotImplementedError


class LinearCombination(DerivedSymbol):
    def __init__(self, terms):
        coefs = [c for c, _ in terms]
        syms = [s for _, s in terms]
        shape = syms[0].block_shape
        if any(s.block_shape != shape for s in syms):
            from .errors import ShapeMismatch
            raise ShapeMismatch("block shapes differ in a sum")
        cls = SymbolClass(max(s.order for s in syms), syms[0].cls.rho, syms[0].cls.delta)
        super().__init__(cls, shape, syms[0].dim, "linear combination", syms)
        self.coefs = coefs

    def eval_jet(self, P):
        acc = None
        for c, s in zip(self.coefs, self.parents):
            v = s.eval_jet(P) * c
            acc = v if acc is None else acc + v
        return acc

    def _evaluate_numeric(self, x, zeta, M):
        return sum(c * s.evaluate(x, zeta, M) for c, s in zip(self.coefs, self.parents))


class PointwiseProduct(DerivedSymbol):
    def __init__(self, a, b):
        if a.block_shape[1] != b.block_shape[0]:
            from .errors import ShapeMismatch
            raise ShapeMismatch("blocks are not composable")
        cls = SymbolClass(a.order + b.order, a.cls.rho, a.cls.delta)
        super().__init__(cls, (a.block_shape[0], b.block_shape[1]), a.dim, "pointwise product",
                         (a, b))

    def eval_jet(self, P):
        return taylor.matmul(self.parents[0].eval_jet(P), self.parents[1].eval_jet(P))

    def _evaluate_numeric(self, x, zeta, M):
        return self.parents[0].evaluate(x, zeta, M) @ self.parents[1].evaluate(x, zeta, M)


def _sympy_ok(*syms):
    return all(isinstance(s, ExpressionSymbol) for s in syms)


def linear_combination(terms):
    terms = [(c, s) for c, s in terms]
    syms = [s for _, s in terms]
    if _sympy_ok(*syms) and all(s.block_shape == syms[0].block_shape for s in syms):
        mat = sum((sp.nsimplify(c) * s.matrix for c, s in terms), sp.zeros(*syms[0].block_shape))
        cls = SymbolClass(max(s.order for s in syms), syms[0].cls.rho, syms[0].cls.delta)
        return ExpressionSymbol(sp.simplify(mat), syms[0].dim, cls,
                                manifold=_manifold_of(*syms))
    return LinearCombination(terms)


def pointwise_product(a, b):
    if _sympy_ok(a, b):
        cls = SymbolClass(a.order + b.order, a.cls.rho, a.cls.delta)
        return ExpressionSymbol(sp.simplify(a.matrix * b.matrix), a.dim, cls,
                                manifold=_manifold_of(a, b))
    return PointwiseProduct(a, b)


def _as_symbol(other, like):
    if isinstance(other, Symbol):
        return other
    return constant_symbol(other, like.dim, like.block_shape, manifold=like.manifold)


# ----------------------------------------------------------------------------
# constructors
# ----------------------------------------------------------------------------

def _to_matrix(expr, dim):
    if isinstance(expr, str):
        return sp.Matrix([[parse(expr, dim)]])
    if isinstance(expr, (list, tuple)):
        return sp.Matrix([[parse(e, dim) if isinstance(e, str) else sp.sympify(e) for e in row]
                          for row in expr])
    if isinstance(expr, sp.MatrixBase):
        return sp.Matrix(expr)
    return sp.Matrix([[sp.sympify(expr)]])


def closed_form(expr, dim, order, rho=1.0, delta=0.0, manifold=None):
    """Symbol from an expression string (see :mod:`normalsym.expression`),
    a sympy expression, or a nested list of those for a block symbol."""
    return ExpressionSymbol(_to_matrix(expr, dim), dim, SymbolClass(order, rho, delta),
                            manifold=manifold)


def constant_symbol(value, dim, block_shape=(1, 1), manifold=None):
    if np.isscalar(value):
        mat = sp.nsimplify(value) * sp.eye(block_shape[0]) if block_shape[0] == block_shape[1] \
            else sp.ones(*block_shape) * sp.nsimplify(value)
    else:
        mat = sp.Matrix(value)
    return ExpressionSymbol(mat, dim, SymbolClass(0), Polynomial({(0,) * dim: mat}),
                            manifold=manifold)


def norm_squared(dim, manifold=None):
    """l(xi) = |xi|^2, in frame components."""
    return polynomial_symbol({tuple(2 * int(i == k) for i in range(dim)): 1 for k in range(dim)},
                             dim, manifold=manifold)


def polynomial_symbol(coeffs, dim=None, manifold=None):
    """sum_alpha c_alpha(x) zeta^alpha for a finite table of coefficients.

    Coefficients may be numbers, expression strings in x1..xd, sympy
    expressions or matrices.  The class is (degree, 1, 0).
    """
    coeffs = {tuple(int(k) for k in a): c for a, c in coeffs.items()}
    if dim is None:
        dim = len(next(iter(coeffs)))
    xs, zs = variables(dim)
    table = {}
    for a, c in coeffs.items():
        if len(a) != dim:
            raise ValueError("multi-index length must equal the dimension")
        m = _to_matrix(c, dim)
        if any(s in m.free_symbols for s in zs):
            raise ValueError("coefficients must be position functions")
        if m != sp.zeros(*m.shape):
            table[a] = m
    if not table:
        table = {(0,) * dim: sp.Matrix([[0]])}
    shape = next(iter(table.values())).shape
    mat = sp.zeros(*shape)
    for a, m in table.items():
        mono = sp.Mul(*[z ** k for z, k in zip(zs, a)])
        mat += m * mono
    degree = max(sum(a) for a in table)
    return ExpressionSymbol(mat, dim, SymbolClass(degree), Polynomial(table), manifold=manifold)


def polynomial_to_json(sym):
    if not isinstance(sym.metadata, Polynomial):
        raise TypeError("not a polynomial symbol")
    rows = []
    for a, m in sorted(sym.metadata.coefficients.items(), key=lambda t: (sum(t[0]), t[0])):
        val = str(m[0, 0]) if m.shape == (1, 1) else [[str(e) for e in r] for r in m.tolist()]
        rows.append({"alpha": list(a), "value": val})
    return json.dumps({"dim": sym.dim, "block_shape": list(sym.block_shape),
                       "coefficients": rows}, sort_keys=True)


def _sympy_str_to_expr(s, dim):
    xs, zs = variables(dim)
    loc = {str(v): v for v in xs + zs}
    return sp.sympify(s, locals=loc)


def polynomial_from_json(text, manifold=None):
    data = json.loads(text) if isinstance(text, str) else text
    dim = int(data["dim"])
    coeffs = {}
    for row in data["coefficients"]:
        v = row["value"]
        if isinstance(v, list):
            coeffs[tuple(row["alpha"])] = sp.Matrix([[_sympy_str_to_expr(e, dim) for e in r]
                                                     for r in v])
        else:
            coeffs[tuple(row["alpha"])] = _sympy_str_to_expr(v, dim)
    return polynomial_symbol(coeffs, dim, manifold=manifold)


# ----------------------------------------------------------------------------
# covectors and jet tables
# ----------------------------------------------------------------------------

@dataclass
class Covector:
    """Covectors over chart points x with frame components zeta (batched)."""

    manifold: object
    x: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.zeta, dtype=float)
        self.x, self.zeta = np.broadcast_arrays(x, z)

    @property
    def norm(self):
        return np.linalg.norm(self.zeta, axis=-1)

    def point(self):
        return plain_point(self.manifold, self.x, self.zeta)

    def scaled(self, c):
        return Covector(self.manifold, self.x, c * self.zeta)


@dataclass
class JetTable:
    base: Covector
    max_horizontal: int
    max_vertical: int
    entries: dict = field(default_factory=dict)
    convention: str = "normal"

    def __getitem__(self, key):
        alpha, beta = key
        return self.entries[(tuple(alpha), tuple(beta))]

    def value(self):
        d = self.base.manifold.dim
        return self.entries[((0,) * d, (0,) * d)]


def _check_depth(*depths):
    if any(k < 0 for k in depths) or sum(depths) > MAX_JET_DEPTH:
        raise JetDepthExceeded(f"jet depth {sum(depths)} exceeds {MAX_JET_DEPTH}")


def jet(a, xi, depth_h, depth_v, convention="normal", exact=None):
    """Symmetrized covariant derivatives D^{alpha,beta} a at the covectors xi.

    Horizontal derivatives differentiate along normal coordinates z_x,
    vertical ones along the fibre coordinates; with convention "normal"
    the fibre coordinates are those induced by z_x, with "fibre" they are
    the frame components at the moved point.
    """
    _check_depth(depth_h, depth_v)
    M = xi.manifold
    d = M.dim
    use_exact = a.exact_jets and M.supports_jets if exact is None else exact
    if use_exact:
        inner = taylor.box_space(d, depth_h, d, depth_v)
        P = xi.point()
        Q = displace(P, inner, d, convention)
        J = a.eval_jet(Q)
        entries = {}
        for m in inner.monomials:
            entries[(m[:d], m[d:])] = inner_coefficient(J, P.space, inner, m).value
        return JetTable(xi, depth_h, depth_v, entries, convention)
    return _fd_jet(a, xi, depth_h, depth_v, convention)


def _moved(M, x, zeta, v, w, convention):
    """(chart point, frame components) after moving by v along exp and by w
    in the fibre; v, w have shape (..., d)."""
    p = M.from_chart(x)
    F = M.frame(p)
    V = np.einsum("...k,...ka->...a", v, F)
    y = M.exp(p, V)
    if M.flat:
        eta = zeta + w
        return M.chart_coords(y), eta
    dV = M.dexp(p, V)                                   # [..., j, a]
    dy = np.einsum("...kj,...ja->...ka", F, dV)         # d y / d v_k
    Fy = M.frame(y)
    D = M.inner(y[..., None, None, :], Fy[..., :, None, :], dy[..., None, :, :])  # [j, k]
    if convention == "normal":
        eta = np.linalg.solve(np.swapaxes(D, -1, -2), (zeta + w)[..., None])[..., 0]
    else:
        eta = np.linalg.solve(np.swapaxes(D, -1, -2), zeta[..., None])[..., 0] + w
    return M.chart_coords(y), eta


def _central_weights(n):
    """Offsets (in units of h/2) and weights of the n-th central difference."""
    offs = [n - 2 * j for j in range(n + 1)]
    wts = [(-1) ** j * math.comb(n, j) for j in range(n + 1)]
    return offs, wts


def _fd_jet(a, xi, depth_h, depth_v, convention, levels=2, rtol=1e-2):
    M = xi.manifold
    d = M.dim
    x, zeta = xi.x, xi.zeta
    batch = x.shape[:-1]
    hx = 1e-3 * M.injectivity_radius
    hv = 1e-3 * (1.0 + np.linalg.norm(zeta, axis=-1))
    monos = [(al, be) for al in taylor.multi_indices(d, depth_h)
             for be in taylor.multi_indices(d, depth_v)]
    # offsets in units of h / 2**levels, level l uses step h / 2**l
    scale = 2 ** levels
    points = {}
    plans = []
    for al, be in monos:
        m = al + be
        plan = []
        for lev in range(levels):
            step_units = scale // 2 ** lev      # h / 2**lev in base units
            stencil = [((), 1.0)]
            for k, n in enumerate(m):
                if n == 0:
                    continue
                offs, wts = _central_weights(n)
                stencil = [(s + ((k, o * step_units // 2),), c * w)
                           for s, c in stencil for o, w in zip(offs, wts)]
            terms = []
            for s, c in stencil:
                key = [0] * (2 * d)
                for k, o in s:
                    key[k] += o
                key = tuple(key)
                points.setdefault(key, len(points))
                terms.append((points[key], c))
            plan.append((terms, step_units))
        plans.append(plan)
    keys = sorted(points, key=points.get)
    units = np.array(keys, dtype=float) / scale           # multiples of h
    n_pts = len(keys)
    v = units[:, None, :d] * hx                            # (P, 1, d)
    w = units[:, None, d:] * hv.reshape(-1)[None, :, None] if batch else units[:, None, d:] * hv
    xb = np.broadcast_to(x.reshape(-1, d), (n_pts,) + (int(np.prod(batch)) if batch else 1, d))
    zb = np.broadcast_to(zeta.reshape(-1, d), xb.shape)
    vb = np.broadcast_to(v, xb.shape)
    wb = np.broadcast_to(w.reshape(n_pts, -1, d), xb.shape)
    y, eta = _moved(M, xb, zb, vb, wb, convention)
    vals = a.evaluate(y, eta, M)                           # (P, B, r, c)
    entries = {}
    worst = 0.0
    hvb = hv.reshape(-1)
    for (al, be), plan in zip(monos, plans):
        ests = []
        for lev, (terms, step_units) in enumerate(plan):
            acc = 0.0
            for idx, c in terms:
                acc = acc + c * vals[idx]
            hfac = (hx / 2 ** lev) ** sum(al) * (hvb / 2 ** lev) ** sum(be)
            ests.append(acc / hfac[:, None, None])
        best = (4 * ests[-1] - ests[-2]) / 3
        if sum(al) + sum(be) > 0:
            err = np.abs(best - ests[-1])
            zn = 1.0 + np.linalg.norm(zeta.reshape(-1, d), axis=-1)[:, None, None]
            scale_v = np.abs(best) + np.abs(vals[0]) * zn ** -sum(be) + 1e-300
            worst = max(worst, float(np.max(err / scale_v)))
        entries[(al, be)] = best.reshape(batch + a.block_shape)
    if worst > rtol:
        raise StepUnderflow(f"Richardson extrapolation did not settle (residual {worst:.2e})",
                            residual=worst)
    return JetTable(xi, depth_h, depth_v, entries, convention)


# ----------------------------------------------------------------------------
# seminorms and order tests
# ----------------------------------------------------------------------------

def sample_chart_points(manifold, n_per_axis=32):
    """Deterministic uniform grid of chart points (avoiding chart poles)."""
    kind = manifold.kind
    if kind == "Circle":
        L = 2 * math.pi * manifold.radius
        return (np.arange(n_per_axis) + 0.5)[:, None] * (L / n_per_axis)
    if kind == "FlatTorus":
        axes = [(np.arange(n_per_axis) + 0.5) * (Lk / n_per_axis) for Lk in manifold.periods]
    elif kind == "Sphere2":
        axes = [np.linspace(0.05 * math.pi, 0.85 * math.pi, n_per_axis),
                (np.arange(n_per_axis) + 0.5) * (2 * math.pi / n_per_axis)]
    else:
        axes = [np.linspace(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), n_per_axis)
                for lo, hi in manifold.bounds]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _directions(d, n_dirs):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        ang = 2 * math.pi * (np.arange(n_dirs) + 0.5) / n_dirs
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    rng = np.random.default_rng(12345)
    v = rng.normal(size=(n_dirs, d))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def shell_covectors(manifold, points, shell=(1.0, 1e3), n_radii=64, n_dirs=16):
    """Covectors over ``points`` with log-spaced norms and fixed directions;
    shape (points, radii, directions, d)."""
    radii = np.geomspace(shell[0], shell[1], n_radii)
    dirs = _directions(manifold.dim, n_dirs)
    zeta = radii[:, None, None] * dirs[None, :, :]
    x = np.asarray(points, dtype=float)[:, None, None, :]
    zeta = np.broadcast_to(zeta[None], (x.shape[0],) + zeta.shape)
    return Covector(manifold, np.broadcast_to(x, zeta.shape), zeta), radii


def _normalized(a, xi, alpha, beta, chunk=4096):
    d = xi.manifold.dim
    alpha = tuple(alpha) if alpha is not None else (0,) * d
    beta = tuple(beta) if beta is not None else (0,) * d
    _check_depth(sum(alpha), sum(beta))
    flat_x = xi.x.reshape(-1, d)
    flat_z = xi.zeta.reshape(-1, d)
    out = np.empty(flat_x.shape[0])
    w = a.cls.weight(sum(alpha), sum(beta))
    for s in range(0, flat_x.shape[0], chunk):
        cv = Covector(xi.manifold, flat_x[s:s + chunk], flat_z[s:s + chunk])
        tab = jet(a, cv, sum(alpha), sum(beta))
        val = tab[(alpha, beta)]
        nrm = np.linalg.norm(val, ord=2, axis=(-2, -1)) if not a.is_scalar else np.abs(val[..., 0, 0])
        out[s:s + chunk] = nrm / (1.0 + np.linalg.norm(cv.zeta, axis=-1)) ** w
    return out.reshape(xi.x.shape[:-1])


def seminorm(a, K, alpha, beta, shell=(1.0, 1e3), manifold=None, n_radii=64, n_dirs=16):
    """Sampled seminorm sup ||D^{alpha,beta} a|| (1+|xi|)^{-(mu + delta|alpha| - rho|beta|)}.

    K is an array of chart points or None for the default 32^d grid.
    """
    M = manifold if manifold is not None else a.manifold
    if K is None:
        K = sample_chart_points(M)
    xi, _ = shell_covectors(M, K, shell, n_radii, n_dirs)
    return float(np.max(_normalized(a, xi, alpha, beta)))


@dataclass
class OrderVerdict:
    passed: bool
    order: float
    slope: float
    sup: float
    radii: np.ndarray
    profile: np.ndarray

    def __bool__(self):
        return bool(self.passed)


def log_slope(r, v, floor=0.0):
    """Least-squares slope of log(max(v, floor)) against log r."""
    v = np.maximum(np.asarray(v, dtype=float), floor if floor > 0 else 1e-300)
    return float(np.polyfit(np.log(r), np.log(v), 1)[0])


def order_test(a, order=None, K=None, shell=(10.0, 1e3), manifold=None, max_depth=2,
               n_radii=16, n_dirs=8, slope_tol=0.1, floor=0.0):
    """Operational check that a is of the given order on the shell: the
    sup over samples of every normalized derivative with |alpha|+|beta|
    <= max_depth must be finite and must not grow (fitted log-log slope
    over the shell <= slope_tol).  ``floor`` is an absolute noise level
    below which normalized values count as zero."""
    M = manifold if manifold is not None else a.manifold
    if order is not None and order != a.order:
        a = _reclassed(a, order)
    if K is None:
        K = sample_chart_points(M, 4)
    xi, radii = shell_covectors(M, K, shell, n_radii, n_dirs)
    d = M.dim
    worst_slope = -np.inf
    sup = 0.0
    prof_all = np.zeros(len(radii))
    for total in range(max_depth + 1):
        for nh in range(total + 1):
            for al in taylor.multi_indices(d, nh, nh):
                for be in taylor.multi_indices(d, total - nh, total - nh):
                    vals = _normalized(a, xi, al, be)
                    prof = vals.max(axis=(0, 2))
                    sup = max(sup, float(np.max(prof)))
                    prof_all = np.maximum(prof_all, prof)
                    if np.max(prof) > floor:
                        worst_slope = max(worst_slope, log_slope(radii, prof, floor))
    if not np.isfinite(worst_slope):
        worst_slope = 0.0
    passed = bool(np.isfinite(sup) and worst_slope <= slope_tol)
    return OrderVerdict(passed, a.order, worst_slope, sup, radii, prof_all)


def measured_order(a, K=None, shell=(10.0, 1e3), manifold=None, n_radii=16, n_dirs=8, floor=0.0):
    """Fitted log-log slope of sup |a| over the shell (an operational order)."""
    M = manifold if manifold is not None else a.manifold
    if K is None:
        K = sample_chart_points(M, 4)
    xi, radii = shell_covectors(M, K, shell, n_radii, n_dirs)
    b = _reclassed(a, 0.0)
    prof = _normalized(b, xi, None, None).max(axis=(0, 2))
    if np.max(prof) <= floor:
        return -np.inf
    return log_slope(radii, prof, floor)


class _Reclassed(Symbol):
    """Same function with another declared class."""

    def __init__(self, base, cls):
        super().__init__(cls, base.block_shape, base.dim, base.metadata, base.manifold)
        self.base = base
        self.depends_on_x = base.depends_on_x

    @property
    def exact_jets(self):
        return self.base.exact_jets

    def evaluate(self, x, zeta, manifold=None):
        return self.base.evaluate(x, zeta, manifold)

    def eval_jet(self, P):
        return self.base.eval_jet(P)


def _reclassed(a, order):
    return _Reclassed(a, a.cls.with_order(order))


# ----------------------------------------------------------------------------
# excision and asymptotic sums
# ----------------------------------------------------------------------------

def excision(t):
    """0 for t <= 1/2, 1 for t >= 1 (smooth); works on jets."""
    if isinstance(t, taylor.Jet):
        return 1.0 - smooth_step_jet((t - 0.5) * 2.0)
    return 1.0 - smooth_step((np.asarray(t, dtype=float) - 0.5) * 2.0)


class Excised(DerivedSymbol):
    """chi(|xi| / lam) a(xi)."""

    def __init__(self, a, lam):
        super().__init__(a.cls, a.block_shape, a.dim, f"excised at {lam:g}", (a,))
        self.lam = float(lam)

    def _weight(self, eta):
        r = taylor.sqrt(sum(e * e for e in eta))
        return excision(r * (1.0 / self.lam))

    def eval_jet(self, P):
        w = self._weight(P.eta)
        v = self.parents[0].eval_jet(P)
        return v * w.expand(-1).expand(-1)

    def _evaluate_numeric(self, x, zeta, M):
        w = excision(np.linalg.norm(zeta, axis=-1) / self.lam)
        return w[..., None, None] * self.parents[0].evaluate(x, zeta, M)

    def evaluate(self, x, zeta, manifold=None):
        if self.exact_jets and (self.manifold or manifold) is not None:
            return super().evaluate(x, zeta, manifold)
        return self._evaluate_numeric(np.asarray(x, dtype=float), np.asarray(zeta, dtype=float),
                                      manifold)


@dataclass
class AsymptoticSeries:
    terms: list             # [(mu_j, Symbol)]
    weights: list           # lambda_j

    @property
    def orders(self):
        return [m for m, _ in self.terms]


class AsymptoticSum(DerivedSymbol):
    def __init__(self, series):
        syms = [s for _, s in series.terms]
        self.series = series
        excised = [Excised(s, lam) for s, lam in zip(syms, series.weights)]
        cls = SymbolClass(series.terms[0][0], syms[0].cls.rho, syms[0].cls.delta)
        super().__init__(cls, syms[0].block_shape, syms[0].dim, "asymptotic sum", excised)

    def eval_jet(self, P):
        acc = None
        for e in self.parents:
            v = e.eval_jet(P)
            acc = v if acc is None else acc + v
        return acc

    def _evaluate_numeric(self, x, zeta, M):
        return sum(e._evaluate_numeric(x, zeta, M) for e in self.parents)

    def evaluate(self, x, zeta, manifold=None):
        if self.exact_jets and (self.manifold or manifold) is not None:
            return super().evaluate(x, zeta, manifold)
        return self._evaluate_numeric(np.asarray(x, dtype=float), np.asarray(zeta, dtype=float),
                                      manifold)

    def partial_remainder(self, k):
        """s - sum_{j<=k} a_j (k counts from 0)."""
        syms = [s for _, s in self.series.terms[:k + 1]]
        return linear_combination([(1.0, self)] + [(-1.0, s) for s in syms])


def asymptotic_sum(terms, manifold=None, shell=(1.0, 1e3), budget=0.5, max_scale=2 ** 20,
                   K=None):
    """Borel-type summation sum_j chi(|xi|/lambda_j) a_j.

    lambda_0 = 1; for j >= 1 the scale is doubled until the excised term,
    measured as a symbol of the previous order mu_{j-1}, has sampled
    seminorm (alpha = beta = 0) at most budget * 2^-j on the shell.
    """
    terms = [(float(m), s) for m, s in terms]
    orders = [m for m, _ in terms]
    if any(b >= a for a, b in zip(orders, orders[1:])):
        raise NonDecreasingOrders("orders must be strictly decreasing")
    M = manifold if manifold is not None else _manifold_of(*[s for _, s in terms])
    if K is None and M is not None:
        K = sample_chart_points(M, 4)
    weights = [1.0]
    for j in range(1, len(terms)):
        mu_prev = orders[j - 1]
        lam = 1.0
        while True:
            e = _reclassed(Excised(terms[j][1], lam), mu_prev)
            if M is None or seminorm(e, K, None, None, shell, M, 24, 8) <= budget * 2.0 ** -j:
                break
            lam *= 2
            if lam > max_scale:
                raise NonDecreasingOrders("no excision scale found below 2^20")
        weights.append(lam)
    series = AsymptoticSeries(terms, weights)
    out = AsymptoticSum(series)
    if out.manifold is None:
        out.manifold = M
    return out
