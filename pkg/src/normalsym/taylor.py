"""Truncated multivariate Taylor arithmetic.

A :class:`Jet` stores the Taylor coefficients of a function of ``n``
variables about a base point, truncated at total degree ``order``.
Coefficients beyond the order are unknown, not zero. Jets carry an
arbitrary leading batch shape so that one expression can be expanded at
many base points at once.

Arithmetic (``+ - * / **``) and the elementary functions below return
jets again, so any closed-form expression evaluated on jets produces its
exact partial derivatives up to the truncation order::

    >>> S = space(2, 3)
    >>> x, y = S.variables([0.5, 2.0])
    >>> f = exp(x) * y**2
    >>> round(float(f.derivative((1, 2))), 10)   # d/dx d^2/dy^2 at (0.5, 2)
    3.2974425414
"""
from __future__ import annotations

import functools
import itertools
import math

import numpy as np

__all__ = ["JetSpace", "Jet", "space", "product", "split_space", "box_space", "embed",
           "restrict", "exp", "sin", "cos", "sqrt", "atan",
           "power", "multi_indices"]


def multi_indices(n, order, min_order=0):
    """All multi-indices of length n with min_order <= |m| <= order,
    graded lexicographic (degree first, then lexicographic descending)."""
    out = []
    for deg in range(min_order, order + 1):
        for combo in itertools.combinations_with_replacement(range(n), deg):
            m = [0] * n
            for i in combo:
                m[i] += 1
            out.append(tuple(m))
    return out


class JetSpace:
    """Monomial bookkeeping for jets over a downward closed set of
    multi-indices (by default all of total degree <= ``order``).

    ``order`` is the largest total degree present; it bounds the nilpotency
    index used by the series in this module.
    """

    def __init__(self, nvars, order=None, monomials=None, pairs=None):
        self.nvars = int(nvars)
        if monomials is None:
            monomials = multi_indices(self.nvars, int(order))
        self.monomials = [tuple(int(k) for k in m) for m in monomials]
        if self.monomials[0] != (0,) * self.nvars:
            raise ValueError("the constant monomial must come first")
        self.index = {m: i for i, m in enumerate(self.monomials)}
        self.size = len(self.monomials)
        self.degree = np.array([sum(m) for m in self.monomials])
        self.order = int(self.degree.max()) if self.size else 0
        self.factorial = np.array([math.prod(math.factorial(k) for k in m)
                                   for m in self.monomials], dtype=float)
        if pairs is None:
            pairs = self._pairs()
        left, right, target = pairs
        perm = np.argsort(target, kind="stable")
        self._left = np.asarray(left)[perm]
        self._right = np.asarray(right)[perm]
        target = np.asarray(target)[perm]
        self._starts = np.searchsorted(target, np.arange(self.size))
        # derivative maps: d/dx_k sends monomial m to m - e_k with factor m_k
        self._deriv = []
        for k in range(self.nvars):
            src, dst, fac = [], [], []
            for i, m in enumerate(self.monomials):
                if m[k] > 0:
                    mm = list(m)
                    mm[k] -= 1
                    src.append(i)
                    dst.append(self.index[tuple(mm)])
                    fac.append(m[k])
            self._deriv.append((np.array(src, dtype=int), np.array(dst, dtype=int),
                                np.array(fac, dtype=float)))
        self._embed_cache = {}

    def _pairs(self):
        left, right, target = [], [], []
        for i, a in enumerate(self.monomials):
            for j, b in enumerate(self.monomials):
                t = self.index.get(tuple(p + q for p, q in zip(a, b)))
                if t is not None:
                    left.append(i)
                    right.append(j)
                    target.append(t)
        return left, right, target

    def _pair_lists(self):
        order = np.argsort(self._left * self.size + self._right, kind="stable")
        tgt = np.repeat(np.arange(self.size), np.diff(np.append(self._starts, len(self._left))))
        return self._left[order], self._right[order], tgt[order]

    def constant(self, value, batch=None):
        value = np.asarray(value)
        dtype = np.result_type(value.dtype, float)
        shape = value.shape if batch is None else np.broadcast_shapes(value.shape, tuple(batch))
        c = np.zeros(shape + (self.size,), dtype=dtype)
        c[..., 0] = value
        return Jet(self, c)

    def variable(self, k, value=0.0):
        """The k-th coordinate expanded about ``value``."""
        jet = self.constant(value)
        e = [0] * self.nvars
        e[k] = 1
        i = self.index.get(tuple(e))
        if i is not None:
            jet.c[..., i] = 1.0
        return jet

    def variables(self, values):
        values = list(values)
        if len(values) != self.nvars:
            raise ValueError("need one base value per variable")
        return [self.variable(k, v) for k, v in enumerate(values)]

    def mul(self, a, b):
        prod = a[..., self._left] * b[..., self._right]
        return np.add.reduceat(prod, self._starts, axis=-1)

    def embedding(self, target, var_map):
        """Index array sending coefficients of this space into ``target``;
        variable k of this space becomes variable var_map[k] there."""
        key = (id(target), tuple(var_map))
        idx = self._embed_cache.get(key)
        if idx is None:
            idx = []
            for m in self.monomials:
                mm = [0] * target.nvars
                for k, p in enumerate(m):
                    mm[var_map[k]] += p
                idx.append(target.index.get(tuple(mm), -1))
            idx = np.array(idx)
            self._embed_cache[key] = idx
        return idx


@functools.lru_cache(maxsize=64)
def space(nvars, order):
    """All monomials of total degree <= order."""
    return JetSpace(nvars, order)


@functools.lru_cache(maxsize=256)
def product(a, b):
    """Jets in the variables of ``a`` followed by those of ``b``; the
    monomial set is the product of both sets."""
    mons = [ma + mb for ma in a.monomials for mb in b.monomials]
    la, ra, ta = (np.asarray(x) for x in a._pair_lists())
    lb, rb, tb = (np.asarray(x) for x in b._pair_lists())
    nb = b.size
    left = (la[:, None] * nb + lb[None, :]).ravel()
    right = (ra[:, None] * nb + rb[None, :]).ravel()
    target = (ta[:, None] * nb + tb[None, :]).ravel()
    return JetSpace(a.nvars + b.nvars, monomials=mons, pairs=(left, right, target))


@functools.lru_cache(maxsize=64)
def split_space(n_u, order_u, n_t, order_t):
    """Monomials u^a (|a| <= order_u) and t^b (|b| <= order_t), no mixed
    terms: enough for separate horizontal and vertical derivatives."""
    mons = [m + (0,) * n_t for m in multi_indices(n_u, order_u)]
    mons += [(0,) * n_u + m for m in multi_indices(n_t, order_t, 1)]
    return JetSpace(n_u + n_t, monomials=mons)


@functools.lru_cache(maxsize=64)
def box_space(n_u, order_u, n_t, order_t):
    """Monomials u^a t^b with |a| <= order_u and |b| <= order_t."""
    return product(space(n_u, order_u), space(n_t, order_t))


def embed(jet, target, var_map):
    """Re-express ``jet`` as a jet of ``target`` (monomials missing from
    the target are dropped, i.e. truncated)."""
    idx = jet.space.embedding(target, var_map)
    keep = idx >= 0
    c = np.zeros(jet.c.shape[:-1] + (target.size,), dtype=jet.c.dtype)
    c[..., idx[keep]] = jet.c[..., keep]
    return Jet(target, c)


def restrict(jet, target, var_map):
    """Coefficients of ``target`` monomials read off ``jet``; target
    variable k is variable var_map[k] of the source."""
    idx = target.embedding(jet.space, var_map)
    if np.any(idx < 0):
        raise ValueError("target monomials not available in the source jet")
    return Jet(target, jet.c[..., idx].copy())


def _coeffs(x, sp):
    if isinstance(x, Jet):
        if x.space is not sp:
            raise ValueError("jets from different spaces")
        return x.c
    return sp.constant(x).c


class Jet:
    """Truncated Taylor expansion with batch shape ``c.shape[:-1]``."""

    __array_priority__ = 100

    def __init__(self, sp, c):
        self.space = sp
        self.c = c

    # --- basic access -------------------------------------------------
    @property
    def value(self):
        return self.c[..., 0]

    @property
    def batch(self):
        return self.c.shape[:-1]

    def coefficient(self, m):
        return self.c[..., self.space.index[tuple(m)]]

    def derivative(self, m):
        """Partial derivative d^m at the base point."""
        i = self.space.index[tuple(m)]
        return self.c[..., i] * self.space.factorial[i]

    def derivatives(self):
        return self.c * self.space.factorial

    def deriv(self, k):
        """Jet of the partial derivative in variable k.  The top-degree
        coefficients of the result are unknown; truncate before use."""
        src, dst, fac = self.space._deriv[k]
        c = np.zeros_like(self.c)
        c[..., dst] = self.c[..., src] * fac
        return Jet(self.space, c)

    def truncate(self, order):
        sp = space(self.space.nvars, order)
        idx = [self.space.index[m] for m in sp.monomials]
        return Jet(sp, self.c[..., idx])

    def conj(self):
        return Jet(self.space, np.conj(self.c))

    @property
    def real(self):
        return Jet(self.space, self.c.real.copy())

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Jet(self.space, self.c[key + (slice(None),)])

    def nilpotent(self):
        c = self.c.copy()
        c[..., 0] = 0
        return Jet(self.space, c)

    def sum(self, axis):
        """Sum over a batch axis."""
        axis = axis - 1 if axis < 0 else axis
        return Jet(self.space, self.c.sum(axis=axis))

    def expand(self, axis):
        axis = axis - 1 if axis < 0 else axis
        return Jet(self.space, np.expand_dims(self.c, axis))

    def astype(self, dtype):
        return Jet(self.space, self.c.astype(dtype))

    # --- arithmetic ---------------------------------------------------
    def __add__(self, other):
        return Jet(self.space, self.c + _coeffs(other, self.space))

    __radd__ = __add__

    def __neg__(self):
        return Jet(self.space, -self.c)

    def __pos__(self):
        return self

    def __sub__(self, other):
        return Jet(self.space, self.c - _coeffs(other, self.space))

    def __rsub__(self, other):
        return Jet(self.space, _coeffs(other, self.space) - self.c)

    def __mul__(self, other):
        if isinstance(other, Jet):
            return Jet(self.space, self.space.mul(self.c, other.c))
        other = np.asarray(other)
        return Jet(self.space, self.c * other[..., None])

    __rmul__ = __mul__

    def reciprocal(self):
        a0 = self.value
        t = self.nilpotent() * (1.0 / a0)
        # 1/(a0 (1 + t)) = (1/a0) sum (-t)^j
        acc = self.space.constant(np.ones_like(a0))
        for _ in range(self.space.order):
            acc = 1.0 - t * acc
        return acc * (1.0 / a0)

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        other = np.asarray(other)
        return Jet(self.space, self.c / other[..., None])

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, Jet):
            if p.space.order == 0 or not np.any(p.nilpotent().c):
                p = p.value
            else:
                return exp(p * log(self))
        p = np.asarray(p)
        if p.ndim == 0 and np.isreal(p) and float(np.real(p)).is_integer():
            return _int_power(self, int(np.real(p)))
        return power(self, p)

    def __rpow__(self, base):
        return exp(self * np.log(base))

    def __repr__(self):
        return f"Jet(nvars={self.space.nvars}, order={self.space.order}, batch={self.batch})"


def stack(jets, axis=0):
    """Stack jets of one space along a new batch axis."""
    jets = list(jets)
    sp_ = jets[0].space
    axis = axis - 1 if axis < 0 else axis
    cs = [j.c if isinstance(j, Jet) else sp_.constant(j).c for j in jets]
    shape = np.broadcast_shapes(*(c.shape for c in cs))
    return Jet(sp_, np.stack([np.broadcast_to(c, shape) for c in cs], axis=axis))


def matmul(a, b):
    """Matrix product of jets with batch shapes (..., r, k) and (..., k, c)."""
    prod = a.expand(-1) * b.expand(-3)
    return prod.sum(-2)


def _int_power(x, n):
    if n < 0:
        return _int_power(x.reciprocal(), -n)
    result = x.space.constant(np.ones(x.batch, dtype=x.c.dtype))
    base = x
    while n:
        if n & 1:
            result = result * base
        n >>= 1
        if n:
            base = base * base
    return result


def compose(x, derivs):
    """f(x) from the values f^(j)(x0), j = 0..order, given as a list."""
    n = x.nilpotent()
    order = x.space.order
    acc = x.space.constant(derivs[order] / math.factorial(order))
    for j in range(order - 1, -1, -1):
        acc = acc * n + derivs[j] / math.factorial(j)
    return acc


def _lift(fn):
    @functools.wraps(fn)
    def wrapper(x):
        if isinstance(x, Jet):
            return fn(x)
        return getattr(np, fn.__name__)(x)
    return wrapper


@_lift
def exp(x):
    e = np.exp(x.value)
    return compose(x, [e] * (x.space.order + 1))


@_lift
def sin(x):
    s, c = np.sin(x.value), np.cos(x.value)
    cyc = [s, c, -s, -c]
    return compose(x, [cyc[j % 4] for j in range(x.space.order + 1)])


@_lift
def cos(x):
    s, c = np.sin(x.value), np.cos(x.value)
    cyc = [c, -s, -c, s]
    return compose(x, [cyc[j % 4] for j in range(x.space.order + 1)])


@_lift
def log(x):
    a0 = x.value
    ders = [np.log(a0)]
    for j in range(1, x.space.order + 1):
        ders.append((-1) ** (j - 1) * math.factorial(j - 1) / a0 ** j)
    return compose(x, ders)


def power(x, p):
    """x**p for real or complex p (base value must be nonzero)."""
    if not isinstance(x, Jet):
        return np.power(x, p)
    a0 = x.value
    ders = []
    coef = np.ones_like(np.asarray(p, dtype=complex if np.iscomplexobj(p) else float))
    for j in range(x.space.order + 1):
        ders.append(coef * a0 ** (p - j))
        coef = coef * (p - j)
    return compose(x, ders)


def sqrt(x):
    if not isinstance(x, Jet):
        return np.sqrt(x)
    return power(x, 0.5)


def atan(x):
    """Arc tangent, expanded through atan(a) = atan(a0) + atan(t),
    t = (a - a0)/(1 + a a0), whose series has no constant term."""
    if not isinstance(x, Jet):
        return np.arctan(x)
    a0 = x.value
    t = (x - a0) / (1.0 + x * a0)
    t2 = t * t
    acc = x.space.constant(np.zeros_like(a0))
    # atan t = t - t^3/3 + t^5/5 - ...
    kmax = x.space.order // 2
    for k in range(kmax, -1, -1):
        acc = acc * t2 + (-1) ** k / (2 * k + 1)
    return acc * t + np.arctan(a0)


def atan2(y, x):
    """atan2 for jets whose base point has x > 0 after rotation; uses the
    base angle as reference so the series argument is small."""
    if not isinstance(y, Jet) and not isinstance(x, Jet):
        return np.arctan2(y, x)
    sp = y.space if isinstance(y, Jet) else x.space
    y = y if isinstance(y, Jet) else sp.constant(y)
    x = x if isinstance(x, Jet) else sp.constant(x)
    t0 = np.arctan2(y.value, x.value)
    c, s = np.cos(t0), np.sin(t0)
    # rotate by -t0: the rotated point lies on the positive real axis
    num = y * c - x * s
    den = x * c + y * s
    return atan(num / den) + t0
