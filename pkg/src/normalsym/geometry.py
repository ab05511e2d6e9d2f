"""Riemannian kernel: exponential and logarithm maps, frames, parallel
transport, curvature and the normal-coordinate density.

Points and tangent vectors are stored in an ambient representation:
arc length on the circle, periodic coordinates on the torus, vectors in
R^3 for the round sphere and chart coordinates for a generic chart.
Components of tangent vectors with respect to an orthonormal frame are
what the public functions exchange.  All arrays may carry leading batch
dimensions.

Curvature follows the convention R(d/dz^m) = sum R^k_{mln} d/dz^k (x)
dz^l (x) dz^n, i.e. R^k_{mln} is the k-th component of R(e_l, e_n) e_m.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import sympy as sp

from . import taylor
from .errors import PointOutsideRadius, ShootingDiverged, VectorOutsideRadius
from .expression import parse, variables

__all__ = [
    "Manifold", "Circle", "FlatTorus", "Sphere2", "GenericChart", "NormalChart",
    "CurvatureData", "Cutoff", "exp_map", "log_map", "parallel_transport",
    "curvature", "density_rho", "theta_matrix", "generic_chart_from_json", "gauss_lemma_defect",
    "stereographic_sphere_chart",
]


# ----------------------------------------------------------------------------
# cutoff
# ----------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(96)


def _bump(u):
    out = np.zeros_like(u)
    inside = np.abs(u) < 1
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def _bump_tail(s):
    """Integral of exp(-1/(1-u^2)) over [s, 1]."""
    s = np.clip(np.asarray(s, dtype=float), -1.0, 1.0)
    half = 0.5 * (1.0 - s)
    nodes = 0.5 * (1.0 + s)[..., None] + half[..., None] * _GL_X
    return half * (_bump(nodes) @ _GL_W)


_BUMP_MASS = float(_bump_tail(np.array(-1.0)))


def smooth_step(t):
    """1 for t <= 0, 0 for t >= 1, smooth and monotone in between."""
    t = np.asarray(t, dtype=float)
    out = np.where(t <= 0, 1.0, 0.0)
    mid = (t > 0) & (t < 1)
    out[mid] = _bump_tail(2.0 * t[mid] - 1.0) / _BUMP_MASS
    return out


def smooth_step_jet(t):
    """smooth_step composed with a Taylor jet."""
    if not isinstance(t, taylor.Jet):
        return smooth_step(t)
    K = t.space.order
    t0 = np.asarray(t.value.real, dtype=float)
    one = taylor.space(1, K)
    tau = one.variable(0)
    s = (tau + t0) * 2.0 - 1.0
    inside = np.abs(t0 * 2 - 1) < 1
    s0 = np.where(inside, s.value, 0.0)
    s = s + (s0 - s.value)
    phi = taylor.exp(-(1.0 - s * s).reciprocal()).c * inside[..., None]
    derivs = [smooth_step(t0)]
    for n in range(1, K + 1):
        # d^n/dtau^n of -(2/mass) int_0^tau phi = -(2/mass) (n-1)! coef_{n-1}
        derivs.append(-2.0 / _BUMP_MASS * math.factorial(n - 1) * phi[..., n - 1])
    return taylor.compose(t, derivs)


@dataclass(frozen=True)
class Cutoff:
    """Radial plateau function: 1 up to inner_fraction*radius, 0 beyond
    outer_fraction*radius, with a transition built from the normalised
    primitive of exp(-1/(1-t^2))."""

    radius: float
    inner_fraction: float = 0.15
    outer_fraction: float = 0.95

    def __post_init__(self):
        if not 0 < self.inner_fraction < self.outer_fraction < 1:
            raise ValueError("need 0 < inner_fraction < outer_fraction < 1")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def inner(self):
        return self.inner_fraction * self.radius

    @property
    def outer(self):
        return self.outer_fraction * self.radius

    def __call__(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        return smooth_step((r - self.inner) / (self.outer - self.inner))

    def of_vector(self, v):
        return self(np.linalg.norm(np.asarray(v, dtype=float), axis=-1))

    def scaled(self, inner_fraction=None, outer_fraction=None):
        return Cutoff(self.radius,
                      self.inner_fraction if inner_fraction is None else inner_fraction,
                      self.outer_fraction if outer_fraction is None else outer_fraction)


# ----------------------------------------------------------------------------
# curvature container
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class CurvatureData:
    riemann: np.ndarray   # [..., k, m, l, n]
    ricci: np.ndarray     # [..., m, n]

    @classmethod
    def from_riemann(cls, riemann):
        riemann = np.asarray(riemann, dtype=float)
        return cls(riemann, np.einsum("...kmkn->...mn", riemann))


def _constant_curvature(dim, kappa, batch=()):
    d = np.eye(dim)
    r = kappa * (np.einsum("kl,mn->kmln", d, d) - np.einsum("kn,ml->kmln", d, d))
    return CurvatureData.from_riemann(np.broadcast_to(r, batch + r.shape).copy())


# ----------------------------------------------------------------------------
# manifolds
# ----------------------------------------------------------------------------

class Manifold:
    """Common interface; subclasses provide the geometry."""

    kind = "abstract"
    dim: int
    ambient_dim: int
    injectivity_radius: float
    closed_form = True
    flat = False

    # -- representation helpers --
    def inner(self, p, v, w):
        return np.sum(v * w, axis=-1)

    def norm(self, p, v):
        return np.sqrt(np.abs(self.inner(p, v, v)))

    def frame(self, p):
        """Canonical orthonormal frame, rows are the frame vectors."""
        raise NotImplementedError

    def components(self, p, v, frame=None):
        frame = self.frame(p) if frame is None else frame
        return self.inner(p[..., None, :], v[..., None, :], frame)

    def vector(self, p, comps, frame=None):
        frame = self.frame(p) if frame is None else frame
        return np.einsum("...k,...ka->...a", comps, frame)

    def distance(self, p, q):
        return self.norm(p, self.log(p, q))

    def chart_coords(self, p):
        return np.asarray(p, dtype=float)

    def from_chart(self, c):
        return np.asarray(c, dtype=float)

    def wrap(self, p):
        return p

    # -- geometry --
    def exp(self, p, v):
        raise NotImplementedError

    def log(self, p, q):
        raise NotImplementedError

    def transport(self, p, v, w):
        raise NotImplementedError

    def curvature(self, p):
        raise NotImplementedError

    def rho(self, p, q):
        raise NotImplementedError

    def theta(self, p, q):
        raise NotImplementedError

    def sample_points(self, n, rng):
        raise NotImplementedError

    def default_cutoff(self):
        return Cutoff(self.injectivity_radius)

    def describe(self):
        return {"kind": self.kind, "dim": self.dim,
                "injectivity_radius": self.injectivity_radius}

    # -- Taylor jets (closed-form kinds) --
    def exp_jet(self, p, frame, v):
        """Jets of the ambient components of exp_p(sum v_k frame_k) for
        jet variables v (base value 0)."""
        raise NotImplementedError

    def frame_jet(self, pj):
        raise NotImplementedError

    def chart_jet(self, pj):
        return list(pj)

    def log_jet(self, p, frame, q):
        raise NotImplementedError

    @property
    def supports_jets(self):
        return self.closed_form

    # sectional curvature when constant (None otherwise)
    constant_curvature = None

    def dexp(self, p, V):
        """Columns d exp_p / dV^j at V (ambient components), [..., j, a]."""
        raise NotImplementedError


class _Flat(Manifold):
    flat = True
    constant_curvature = 0.0

    def dexp(self, p, V):
        V = np.asarray(V, dtype=float)
        return np.broadcast_to(np.eye(self.dim), V.shape[:-1] + (self.dim, self.dim)).copy()

    def frame(self, p):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(np.eye(self.dim), p.shape[:-1] + (self.dim, self.dim)).copy()

    def exp(self, p, v):
        return self.wrap(np.asarray(p, dtype=float) + v)

    def transport(self, p, v, w):
        return np.array(w, dtype=float, copy=True)

    def curvature(self, p):
        p = np.asarray(p, dtype=float)
        return _constant_curvature(self.dim, 0.0, p.shape[:-1])

    def rho(self, p, q):
        return np.ones(np.broadcast_shapes(np.shape(p), np.shape(q))[:-1])

    def theta(self, p, q):
        shape = np.broadcast_shapes(np.shape(p), np.shape(q))[:-1]
        return np.broadcast_to(np.eye(self.dim), shape + (self.dim, self.dim)).copy()

    def exp_jet(self, p, frame, u, derivative=False):
        y = [p[a] + sum(uk * frame[k][a] for k, uk in enumerate(u)) for a in range(self.dim)]
        if derivative:
            return y, [[frame[k][a] for a in range(self.dim)] for k in range(self.dim)]
        return y

    def frame_jet(self, y):
        return [[float(a == k) for a in range(self.dim)] for k in range(self.dim)]

    def log_jet(self, p, frame, q):
        diff = [q[a] - p[a] for a in range(self.dim)]
        return [sum(diff[a] * frame[k][a] for a in range(self.dim)) for k in range(self.dim)]


@dataclass(frozen=True, eq=False)
class Circle(_Flat):
    """Circle of the given radius, parametrised by arc length."""

    radius: float = 1.0
    kind = "Circle"
    dim = 1
    ambient_dim = 1

    @property
    def injectivity_radius(self):
        return math.pi * self.radius

    @property
    def periods(self):
        return np.array([2 * math.pi * self.radius])

    def wrap(self, p):
        return np.mod(p, 2 * math.pi * self.radius)

    def log(self, p, q):
        L = 2 * math.pi * self.radius
        d = np.mod(np.asarray(q, dtype=float) - p + L / 2, L) - L / 2
        return d

    def sample_points(self, n, rng):
        return rng.uniform(0, 2 * math.pi * self.radius, size=(n, 1))

    def describe(self):
        return {**super().describe(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class FlatTorus(_Flat):
    """R^d modulo the lattice of the given periods."""

    periods: tuple = (2 * math.pi, 2 * math.pi)
    kind = "FlatTorus"

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(float(L) for L in self.periods))

    @property
    def dim(self):
        return len(self.periods)

    @property
    def ambient_dim(self):
        return len(self.periods)

    @property
    def injectivity_radius(self):
        return min(self.periods) / 2

    def wrap(self, p):
        return np.mod(p, np.array(self.periods))

    def log(self, p, q):
        L = np.array(self.periods)
        return np.mod(np.asarray(q, dtype=float) - p + L / 2, L) - L / 2

    def sample_points(self, n, rng):
        return rng.uniform(0, 1, size=(n, self.dim)) * np.array(self.periods)

    def describe(self):
        return {**super().describe(), "periods": list(self.periods)}


def _sinc(x):
    return np.sinc(np.asarray(x) / math.pi)


@dataclass(frozen=True, eq=False)
class Sphere2(Manifold):
    """Round 2-sphere of radius R embedded in R^3.

    The canonical frame is the parallel transport of ((1,0,0),(0,1,0)) from
    the north pole along meridians; it is smooth away from the south pole.
    Chart coordinates are (colatitude, longitude).
    """

    radius: float = 1.0
    kind = "Sphere2"
    dim = 2
    ambient_dim = 3

    @property
    def injectivity_radius(self):
        return math.pi * self.radius

    def frame(self, p):
        u = np.asarray(p, dtype=float) / self.radius
        ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
        w = 1.0 + uz
        e1 = np.stack([1 - ux * ux / w, -ux * uy / w, -ux], axis=-1)
        e2 = np.stack([-ux * uy / w, 1 - uy * uy / w, -uy], axis=-1)
        return np.stack([e1, e2], axis=-2)

    def project(self, p, v):
        u = p / self.radius
        return v - np.sum(v * u, axis=-1, keepdims=True) * u

    def exp(self, p, v):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        R = self.radius
        r = np.linalg.norm(v, axis=-1, keepdims=True)
        return np.cos(r / R) * p + _sinc(r / R) * v

    def log(self, p, q):
        R = self.radius
        u = np.asarray(p, dtype=float) / R
        w = np.asarray(q, dtype=float) / R
        c = np.sum(u * w, axis=-1, keepdims=True)
        t = w - c * u
        s = np.linalg.norm(t, axis=-1, keepdims=True)
        ang = np.arctan2(s, c)
        return R * t / _sinc(ang)

    def transport(self, p, v, w):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        R = self.radius
        r = np.linalg.norm(v, axis=-1, keepdims=True)
        safe = np.where(r > 0, r, 1.0)
        T = np.where(r > 0, v / safe, 0.0)
        u = p / R
        a = np.sum(w * T, axis=-1, keepdims=True)
        t_new = -np.sin(r / R) * u + np.cos(r / R) * T
        return w + a * (t_new - T)

    def curvature(self, p):
        p = np.asarray(p, dtype=float)
        return _constant_curvature(2, 1.0 / self.radius ** 2, p.shape[:-1])

    def rho(self, p, q):
        r = np.linalg.norm(self.log(p, q), axis=-1)
        return _sinc(r / self.radius)

    def theta(self, p, q):
        z = self.components(p, self.log(p, q))
        r = np.linalg.norm(z, axis=-1)
        s = _sinc(r / self.radius)
        safe = np.where(r > 0, r, 1.0)[..., None]
        n = z / safe
        P = n[..., :, None] * n[..., None, :]
        eye = np.eye(2)
        return P + s[..., None, None] * (eye - P)

    def chart_coords(self, p):
        u = np.asarray(p, dtype=float) / self.radius
        th = np.arctan2(np.hypot(u[..., 0], u[..., 1]), u[..., 2])
        la = np.mod(np.arctan2(u[..., 1], u[..., 0]), 2 * math.pi)
        return np.stack([th, la], axis=-1)

    def from_chart(self, c):
        c = np.asarray(c, dtype=float)
        th, la = c[..., 0], c[..., 1]
        return self.radius * np.stack([np.sin(th) * np.cos(la), np.sin(th) * np.sin(la),
                                       np.cos(th)], axis=-1)

    @property
    def constant_curvature(self):
        return 1.0 / self.radius ** 2

    def dexp(self, p, V):
        p = np.asarray(p, dtype=float)
        V = np.asarray(V, dtype=float)
        R = self.radius
        r = np.linalg.norm(V, axis=-1, keepdims=True)
        x = r / R
        safe = np.where(x > 1e-4, x, 1.0)
        # d/dV of cos(|V|/R) p + sinc(|V|/R) V
        dcos = np.where(x > 1e-4, -np.sin(x) / safe, -1.0 + x ** 2 / 6) / R ** 2
        dsinc = np.where(x > 1e-4, (np.cos(x) - np.sin(x) / safe) / safe ** 2,
                         -1.0 / 3 + x ** 2 / 30) / R ** 2
        s = _sinc(x)
        eye = np.eye(3)
        return (dcos[..., None] * V[..., :, None] * p[..., None, :]
                + dsinc[..., None] * V[..., :, None] * V[..., None, :]
                + s[..., None] * eye)

    def sample_points(self, n, rng):
        x = rng.normal(size=(n, 3))
        return self.radius * x / np.linalg.norm(x, axis=-1, keepdims=True)

    def describe(self):
        return {**super().describe(), "radius": self.radius}

    # -- jets --
    def exp_jet(self, p, frame, u, derivative=False):
        R = self.radius
        sp_ = u[0].space
        s = sum(uk * uk for uk in u) * (1.0 / R ** 2)
        n_max = sp_.order // 2 + 2
        # cos(sqrt s), sin(sqrt s)/sqrt s and their s-derivatives as series in s
        cs = [(-1) ** n / math.factorial(2 * n) for n in range(n_max + 1)]
        fs = [(-1) ** n / math.factorial(2 * n + 1) for n in range(n_max + 1)]

        def series(coef):
            acc = sp_.constant(np.zeros(u[0].batch))
            for c in reversed(coef):
                acc = acc * s + c
            return acc

        c0, f0 = series(cs), series(fs)
        tang = [sum(uk * frame[k][a] for k, uk in enumerate(u)) for a in range(3)]
        y = [c0 * p[a] + f0 * tang[a] for a in range(3)]
        if not derivative:
            return y
        c1 = series([n * cs[n] for n in range(1, n_max + 1)])
        f1 = series([n * fs[n] for n in range(1, n_max + 1)])
        dy = []
        for k, uk in enumerate(u):
            g = uk * (2.0 / R ** 2)
            dy.append([c1 * g * p[a] + f1 * g * tang[a] + f0 * frame[k][a] for a in range(3)])
        return y, dy

    def log_jet(self, p, frame, q):
        """Normal coordinates of q about p; q must coincide with p at the
        base of the jet."""
        R = self.radius
        u = [c * (1.0 / R) for c in p]
        w = [c * (1.0 / R) for c in q]
        uw = sum(a * b for a, b in zip(u, w))
        t = [w[a] - uw * u[a] for a in range(3)]
        s2 = sum(c * c for c in t)
        if np.max(np.abs(s2.value)) > 1e-20:
            raise ValueError("log_jet needs coincident base points")
        sp_ = s2.space
        acc = sp_.constant(np.zeros(s2.batch))
        for n in range(sp_.order // 2 + 1, -1, -1):
            acc = acc * s2 + math.factorial(2 * n) / (4 ** n * math.factorial(n) ** 2 * (2 * n + 1))
        return [acc * sum(t[a] * frame[k][a] for a in range(3)) * R for k in range(2)]

    def frame_jet(self, pj):
        R = self.radius
        ux, uy, uz = (c * (1.0 / R) for c in pj)
        w = (1.0 + uz).reciprocal()
        e1 = [1 - ux * ux * w, -(ux * uy * w), -ux]
        e2 = [-(ux * uy * w), 1 - uy * uy * w, -uy]
        return [e1, e2]

    def chart_jet(self, pj):
        R = self.radius
        ux, uy, uz = (c * (1.0 / R) for c in pj)
        rxy = taylor.sqrt(ux * ux + uy * uy)
        th = taylor.atan2(rxy, uz)
        la = taylor.atan2(uy, ux)
        la = la + (np.mod(la.value, 2 * math.pi) - la.value)
        return [th, la]


# ----------------------------------------------------------------------------
# generic chart: geodesic ODE
# ----------------------------------------------------------------------------

def _gram_schmidt(g, dim):
    """Rows: orthonormal frame obtained from the coordinate basis."""
    batch = g.shape[:-2]
    frame = np.zeros(batch + (dim, dim))
    for k in range(dim):
        v = np.zeros(batch + (dim,))
        v[..., k] = 1.0
        for j in range(k):
            e = frame[..., j, :]
            v = v - np.einsum("...a,...ab,...b->...", v, g, e)[..., None] * e
        nrm = np.sqrt(np.einsum("...a,...ab,...b->...", v, g, v))
        frame[..., k, :] = v / nrm[..., None]
    return frame


@dataclass(frozen=True, eq=False)
class GenericChart(Manifold):
    """A single coordinate chart with a user supplied metric.

    ``metric`` maps an array of points (..., d) to (..., d, d).  Geodesics
    are integrated with classical RK4, step min(1e-2, radius/200) in arc
    length; logarithms use Newton shooting.  Metric derivatives come from
    central differences (h = 1e-4) with one Richardson level.
    """

    metric_fn: object = None
    ndim: int = 2
    injectivity: float = 1.0
    bounds: tuple = None
    fd_step: float = 1e-4
    newton_max_iter: int = 50
    newton_tol: float = 1e-10
    label: str = "GenericChart"
    kind = "GenericChart"
    closed_form = False

    @property
    def dim(self):
        return self.ndim

    @property
    def ambient_dim(self):
        return self.ndim

    @property
    def injectivity_radius(self):
        return self.injectivity

    @property
    def step(self):
        return min(1e-2, self.injectivity / 200.0)

    def metric(self, p):
        p = np.asarray(p, dtype=float)
        g = np.asarray(self.metric_fn(p), dtype=float)
        return np.broadcast_to(g, p.shape[:-1] + (self.ndim, self.ndim))

    def inner(self, p, v, w):
        g = self.metric(np.broadcast_to(p, np.broadcast_shapes(np.shape(p), np.shape(v))))
        return np.einsum("...a,...ab,...b->...", v, g, w)

    def frame(self, p):
        return _gram_schmidt(self.metric(p), self.ndim)

    def components(self, p, v, frame=None):
        frame = self.frame(p) if frame is None else frame
        g = self.metric(p)
        return np.einsum("...a,...ab,...kb->...k", v, g, frame)

    # -- metric derivatives --
    def _first(self, p, h):
        d = self.ndim
        out = []
        for m in range(d):
            e = np.zeros(d)
            e[m] = h
            out.append((self.metric(p + e) - self.metric(p - e)) / (2 * h))
        return np.stack(out, axis=-3)

    def metric_derivative(self, p):
        """[..., m, i, j] = d_m g_ij."""
        p = np.asarray(p, dtype=float)
        h = self.fd_step
        return (4 * self._first(p, h / 2) - self._first(p, h)) / 3

    def _second(self, p, h):
        d = self.ndim
        g0 = self.metric(p)
        out = np.zeros(p.shape[:-1] + (d, d, d, d))
        for m in range(d):
            em = np.zeros(d)
            em[m] = h
            out[..., m, m, :, :] = (self.metric(p + em) - 2 * g0 + self.metric(p - em)) / h ** 2
            for n in range(m + 1, d):
                en = np.zeros(d)
                en[n] = h
                val = (self.metric(p + em + en) - self.metric(p + em - en)
                       - self.metric(p - em + en) + self.metric(p - em - en)) / (4 * h * h)
                out[..., m, n, :, :] = val
                out[..., n, m, :, :] = val
        return out

    def metric_second_derivative(self, p):
        p = np.asarray(p, dtype=float)
        h = self.fd_step
        return (4 * self._second(p, h / 2) - self._second(p, h)) / 3

    def christoffel(self, p, dg=None):
        """[..., k, i, j] = Gamma^k_ij."""
        p = np.asarray(p, dtype=float)
        g = self.metric(p)
        ginv = np.linalg.inv(g)
        dg = self.metric_derivative(p) if dg is None else dg
        # lowered: Gamma_{l i j} = (d_i g_lj + d_j g_li - d_l g_ij)/2
        low = 0.5 * (np.einsum("...ilj->...lij", dg) + np.einsum("...jli->...lij", dg)
                     - dg)
        return np.einsum("...kl,...lij->...kij", ginv, low)

    def christoffel_derivative(self, p):
        """[..., m, k, i, j] = d_m Gamma^k_ij."""
        p = np.asarray(p, dtype=float)
        g = self.metric(p)
        ginv = np.linalg.inv(g)
        dg = self.metric_derivative(p)
        ddg = self.metric_second_derivative(p)
        low = 0.5 * (np.einsum("...ilj->...lij", dg) + np.einsum("...jli->...lij", dg) - dg)
        dlow = 0.5 * (np.einsum("...milj->...mlij", ddg) + np.einsum("...mjli->...mlij", ddg)
                      - ddg)
        dginv = -np.einsum("...ka,...mab,...bl->...mkl", ginv, dg, ginv)
        return (np.einsum("...mkl,...lij->...mkij", dginv, low)
                + np.einsum("...kl,...mlij->...mkij", ginv, dlow))

    # -- ODE integration --
    def _rhs(self, x, u, extra):
        G = self.christoffel(x)
        du = -np.einsum("...kij,...i,...j->...k", G, u, u)
        dW = [-np.einsum("...kij,...i,...j->...k", G, u, w) for w in extra]
        return u, du, dW

    def _integrate(self, p, v, extra=()):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        p, v = np.broadcast_arrays(p, v)
        length = float(np.max(self.norm(p, v))) if v.size else 0.0
        n = max(1, int(math.ceil(length / self.step)))
        dt = 1.0 / n
        x, u = p.copy(), v.copy()
        W = [np.broadcast_to(w, x.shape).copy() for w in extra]
        for _ in range(n):
            k1x, k1u, k1w = self._rhs(x, u, W)
            k2x, k2u, k2w = self._rhs(x + 0.5 * dt * k1x, u + 0.5 * dt * k1u,
                                      [w + 0.5 * dt * a for w, a in zip(W, k1w)])
            k3x, k3u, k3w = self._rhs(x + 0.5 * dt * k2x, u + 0.5 * dt * k2u,
                                      [w + 0.5 * dt * a for w, a in zip(W, k2w)])
            k4x, k4u, k4w = self._rhs(x + dt * k3x, u + dt * k3u,
                                      [w + dt * a for w, a in zip(W, k3w)])
            x = x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            u = u + dt / 6 * (k1u + 2 * k2u + 2 * k3u + k4u)
            W = [w + dt / 6 * (a + 2 * b + 2 * c + e)
                 for w, a, b, c, e in zip(W, k1w, k2w, k3w, k4w)]
        return x, u, W

    def exp(self, p, v):
        return self._integrate(p, v)[0]

    def transport(self, p, v, w):
        return self._integrate(p, v, (w,))[2][0]

    def _exp_jacobian(self, p, v, h=1e-6):
        """d exp_p / dv at v (coordinate components), central differences."""
        d = self.ndim
        stack_p = [p] * (2 * d)
        stack_v = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            stack_v += [v + e, v - e]
        x = self.exp(np.stack(stack_p), np.stack(stack_v))
        cols = [(x[2 * j] - x[2 * j + 1]) / (2 * h) for j in range(d)]
        return np.stack(cols, axis=-1)

    def dexp(self, p, V, h=1e-6):
        p = np.asarray(p, dtype=float)
        V = np.asarray(V, dtype=float)
        p, V = np.broadcast_arrays(p, V)
        rows = []
        for j in range(self.ndim):
            e = np.zeros(self.ndim)
            e[j] = h
            both = self.exp(np.stack([p, p]), np.stack([V + e, V - e]))
            rows.append((both[0] - both[1]) / (2 * h))
        return np.stack(rows, axis=-2)

    def log(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        p, q = np.broadcast_arrays(p, q)
        shape = p.shape
        P = p.reshape(-1, self.ndim)
        Q = q.reshape(-1, self.ndim)
        V = Q - P
        d = self.ndim
        h = 1e-7
        res = np.inf
        for _ in range(self.newton_max_iter):
            stack_p = np.concatenate([P] * (d + 1))
            stack_v = [V]
            for j in range(d):
                e = np.zeros(d)
                e[j] = h
                stack_v.append(V + e)
            X = self.exp(stack_p, np.concatenate(stack_v)).reshape(d + 1, -1, d)
            F = X[0] - Q
            res = float(np.max(np.abs(F))) if F.size else 0.0
            if res <= self.newton_tol:
                return V.reshape(shape)
            J = np.stack([(X[j + 1] - X[0]) / h for j in range(d)], axis=-1)
            V = V - np.linalg.solve(J, F[..., None])[..., 0]
        raise ShootingDiverged(f"Newton shooting did not converge (residual {res:.3e})",
                               residual=res)

    def curvature(self, p):
        p = np.asarray(p, dtype=float)
        G = self.christoffel(p)
        dG = self.christoffel_derivative(p)
        # R^k_{mln} = d_l G^k_{nm} - d_n G^k_{lm} + G^k_{lp} G^p_{nm} - G^k_{np} G^p_{lm}
        Rc = (np.einsum("...lknm->...kmln", dG) - np.einsum("...nklm->...kmln", dG)
              + np.einsum("...klp,...pnm->...kmln", G, G)
              - np.einsum("...knp,...plm->...kmln", G, G))
        E = self.frame(p)              # rows e_a, columns coordinate components
        Einv = np.linalg.inv(E)        # [K, a]
        R = np.einsum("...Ka,...KMLN,...bM,...cL,...dN->...abcd", Einv, Rc, E, E, E)
        return CurvatureData.from_riemann(R)

    def _jacobian_frame(self, p, q):
        v = self.log(p, q)
        J = self._exp_jacobian(p, v)             # coordinate columns d y / d V^j
        E = self.frame(p)
        return v, np.einsum("...aj,...kj->...ak", J, E)   # columns d y/ d z^k

    def rho(self, p, q):
        _, Jz = self._jacobian_frame(p, q)
        g = self.metric(q)
        return np.sqrt(np.linalg.det(g)) * np.abs(np.linalg.det(Jz))

    def theta(self, p, q):
        v, Jz = self._jacobian_frame(p, q)
        E = self.frame(p)
        T = np.stack([self.transport(p, v, E[..., l, :]) for l in range(self.ndim)], axis=-2)
        g = self.metric(q)
        return np.einsum("...ak,...ab,...lb->...kl", Jz, g, T)

    def sample_points(self, n, rng):
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return lo + (hi - lo) * rng.uniform(size=(n, self.ndim))

    def describe(self):
        return {**super().describe(), "label": self.label,
                "bounds": None if self.bounds is None else [list(b) for b in self.bounds]}


def generic_chart_from_json(spec):
    """Build a GenericChart from {dim, bounds, metric, injectivity_radius}.

    ``metric`` is either one expression (a conformal factor multiplying the
    identity) or a d x d nested list of expressions in x1..xd.
    """
    if isinstance(spec, str):
        spec = json.loads(spec)
    dim = int(spec["dim"])
    xs, _ = variables(dim)
    m = spec["metric"]
    if isinstance(m, str):
        factor = parse(m, dim)
        mat = factor * sp.eye(dim)
    else:
        mat = sp.Matrix([[parse(str(e), dim) for e in row] for row in m])
    if mat.shape != (dim, dim):
        raise ValueError("metric must be a dim x dim matrix")
    fns = [[sp.lambdify(xs, mat[i, j], "numpy") for j in range(dim)] for i in range(dim)]

    def metric_fn(p):
        p = np.asarray(p, dtype=float)
        args = [p[..., k] for k in range(dim)]
        out = np.empty(p.shape[:-1] + (dim, dim))
        for i in range(dim):
            for j in range(dim):
                out[..., i, j] = fns[i][j](*args)
        return out

    bounds = tuple(tuple(float(v) for v in b) for b in spec.get("bounds", [[-1, 1]] * dim))
    inj = float(spec.get("injectivity_radius", 1.0))
    return GenericChart(metric_fn=metric_fn, ndim=dim, injectivity=inj, bounds=bounds,
                        label=spec.get("label", "GenericChart"))


def stereographic_sphere_chart(radius=1.0, injectivity=None):
    """The round sphere in stereographic coordinates, as a GenericChart."""
    R = radius

    def metric_fn(p):
        p = np.asarray(p, dtype=float)
        s = np.sum(p * p, axis=-1) / R ** 2
        f = 4.0 / (1.0 + s) ** 2
        return f[..., None, None] * np.eye(p.shape[-1])

    inj = math.pi * R if injectivity is None else injectivity
    return GenericChart(metric_fn=metric_fn, ndim=2, injectivity=inj,
                        bounds=((-R, R), (-R, R)), label="stereographic-sphere")


# ----------------------------------------------------------------------------
# normal charts and chart-level operations
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NormalChart:
    """Normal coordinates z_x about ``base`` for an orthonormal ``frame``."""

    manifold: Manifold
    base: np.ndarray
    frame: np.ndarray = None
    radius: float = None

    def __post_init__(self):
        M = self.manifold
        base = np.asarray(self.base, dtype=float)
        object.__setattr__(self, "base", base)
        frame = M.frame(base) if self.frame is None else np.asarray(self.frame, dtype=float)
        object.__setattr__(self, "frame", frame)
        radius = M.injectivity_radius if self.radius is None else float(self.radius)
        if not 0 < radius <= M.injectivity_radius * (1 + 1e-12):
            raise ValueError("chart radius must lie in (0, injectivity radius]")
        object.__setattr__(self, "radius", radius)
        gram = M.inner(base[..., None, None, :], frame[..., :, None, :], frame[..., None, :, :])
        tol = 1e-12 if M.closed_form else 1e-8
        if np.max(np.abs(gram - np.eye(M.dim))) > tol * 10:
            raise ValueError("frame is not orthonormal at the base point")

    @property
    def dim(self):
        return self.manifold.dim

    def vector(self, v):
        return np.einsum("...k,...ka->...a", np.asarray(v, dtype=float), self.frame)

    def exp(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(np.linalg.norm(v, axis=-1) >= self.radius):
            raise VectorOutsideRadius("tangent vector norm must be below the chart radius")
        return self.manifold.exp(self.base, self.vector(v))

    def log(self, y):
        M = self.manifold
        V = M.log(self.base, np.asarray(y, dtype=float))
        z = M.components(self.base, V, self.frame)
        if np.any(np.linalg.norm(z, axis=-1) >= self.radius):
            raise PointOutsideRadius("point lies outside the chart radius")
        return z

    def transported_frame(self, v):
        """The frame at exp(v) obtained by parallel transport of this one."""
        M = self.manifold
        V = self.vector(v)
        rows = [M.transport(self.base, V, self.frame[..., k, :]) for k in range(M.dim)]
        return np.stack(rows, axis=-2)


def exp_map(chart, v):
    return chart.exp(v)


def log_map(chart, y):
    return chart.log(y)


def parallel_transport(manifold, x, v, w, frame=None):
    """Transport w (components at x) along t -> exp_x(t v); returns the
    components in the canonical frame at exp_x(v)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(np.linalg.norm(v, axis=-1) >= manifold.injectivity_radius):
        raise VectorOutsideRadius("transport vector exceeds the injectivity radius")
    F = manifold.frame(x) if frame is None else frame
    V = manifold.vector(x, v, F)
    W = manifold.vector(x, np.asarray(w, dtype=float), F)
    y = manifold.exp(x, V)
    Wy = manifold.transport(x, V, W)
    return manifold.components(y, Wy)


def curvature(manifold, x):
    return manifold.curvature(np.asarray(x, dtype=float))


def _check_close(manifold, x, y):
    d = manifold.distance(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    if np.any(d >= manifold.injectivity_radius):
        raise PointOutsideRadius("points are further apart than the injectivity radius")


def density_rho(manifold, x, y):
    _check_close(manifold, x, y)
    return manifold.rho(np.asarray(x, dtype=float), np.asarray(y, dtype=float))


def theta_matrix(manifold, x, y):
    """theta[k, l] with d/dz_x^k = sum_l theta[k, l] e_l, e the frame at y
    transported from x along the geodesic."""
    _check_close(manifold, x, y)
    return manifold.theta(np.asarray(x, dtype=float), np.asarray(y, dtype=float))


def gauss_lemma_defect(manifold, n=100, rng=None, scale=0.8):
    """Componentwise max of z_x(y) + z_y(x) over n random pairs, the frame
    at y being the parallel transport of the frame at x; also returns the
    exp/log round-trip error.  ``scale`` is the fraction of the
    injectivity radius used for |z_x(y)|."""
    M = manifold
    rng = np.random.default_rng(0) if rng is None else rng
    p = M.sample_points(n, rng)
    d = M.dim
    v = rng.normal(size=(n, d))
    v *= rng.uniform(0.05, scale, size=(n, 1)) * M.injectivity_radius / np.linalg.norm(v, axis=1,
                                                                                     keepdims=True)
    F = M.frame(p)
    V = M.vector(p, v, F)
    y = M.exp(p, V)
    Fy = np.stack([M.transport(p, V, M.vector(p, np.eye(d)[k] + 0 * v, F)) for k in range(d)],
                  axis=-2)
    back = M.components(p, M.log(p, y), F)
    zy = M.components(y, M.log(y, p), Fy)
    return float(np.max(np.abs(v + zy))), float(np.max(np.abs(back - v)))
