"""Discrete quantization Op_psi(a) and symbol extraction on built-in manifolds.

Fields live on quadrature meshes with a band-limited interpolant (Fourier
modes on Circle/FlatTorus, spherical harmonics on Sphere2).  Op(a) f (x) is

    (2 pi)^{-d} int_{T*_x} int_{T_x} a(x, zeta) e^{-i <zeta, v>} psi(v) f(exp_x v) dv dzeta

and is evaluated by one of three routes:

``differential``
    for symbols polynomial in zeta, a(x, -i d_v) applied to the interpolant
    composed with exp (exact, independent of psi);
``fourier``
    on flat meshes: the v-integral is done exactly on Fourier modes through
    the transform of psi, the zeta-integral by the trapezoid rule;
``lift``
    plain quadrature of the lift on a Cartesian grid of T_x X (any mesh,
    cost-guarded).

Normalization: (2 pi)^{-d/2} in the fibre transform and in its inverse, so
quantize(polynomial) is exactly the differential operator.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import sympy as sp
from scipy.signal import fftconvolve

from . import taylor
from .bundle import JetPoint, displace, inner_coefficient, plain_point
from .errors import NyquistExceeded, ResolutionInsufficient, ShapeMismatch
from .expression import variables
from .geometry import Circle, FlatTorus, Sphere2
from .symbols import ExpressionSymbol

__all__ = ["FourierMesh", "SphereMesh", "GridField", "default_mesh", "LiftSamples",
           "microlocal_lift", "fiber_fourier", "inverse_fiber_fourier", "cartesian_grid",
           "polar_grid", "dual_grid", "sphere_harmonics",
           "cutoff_transform", "SpectralOperator", "QuantizedOperator", "AdjointOperator",
           "ComposedOperator", "quantize", "adjoint_quantize", "extract_symbol",
           "exact_composition_symbol", "zeta_degree", "export_binary", "import_binary",
           "export_csv"]

LIFT_BUDGET = 4e8           # max (targets x lift samples x modes) for the lift route


# ----------------------------------------------------------------------------
# spherical harmonics (arrays or jets)
# ----------------------------------------------------------------------------

def _stack(items, axis=-1):
    if isinstance(items[0], taylor.Jet):
        return taylor.stack(items, axis=axis)
    return np.stack(items, axis=axis)


def _legendre_S(z, L):
    """S_l^m(z) for 0 <= m <= l <= L, with Y_lm = S_l^m(z) (x + i y)^m on the
    unit sphere.  Returns a list over l of arrays/jets with last axis m."""
    out = []
    diag = 1.0 / math.sqrt(4 * math.pi)
    prev2 = prev = None
    for l in range(L + 1):
        A = np.zeros(L + 1)
        AB = np.zeros(L + 1)
        for m in range(l):
            A[m] = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            if m < l - 1:
                AB[m] = A[m] * math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
        if l > 0:
            diag = -diag * math.sqrt((2 * l + 1) / (2 * l))
        D = np.zeros(L + 1)
        D[l] = diag
        if isinstance(z, taylor.Jet):
            zz = z.expand(-1)
            cur = zz.space.constant(np.broadcast_to(D, z.batch + (L + 1,)))
        else:
            zz = z[..., None]
            cur = np.broadcast_to(D, np.shape(z) + (L + 1,)).astype(float)
        if prev is not None:
            cur = cur + (zz * prev) * A
        if prev2 is not None:
            cur = cur - prev2 * AB
        out.append(cur)
        prev2, prev = prev, cur
    return out


def _sphere_modes(L):
    ls, ms = [], []
    for l in range(L + 1):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    return np.array(ls), np.array(ms)


def _sphere_parts(x, y, z, L):
    """S_l^m stacked as (..., l, m) and the powers (x + i y)^m, (x - i y)^m."""
    S = _stack(_legendre_S(z, L), axis=-2)
    w = x + 1j * y
    wc = x - 1j * y
    if isinstance(z, taylor.Jet):
        one = z.space.constant(np.ones(z.batch, dtype=complex))
        w, wc = w.astype(complex), wc.astype(complex)
    else:
        one = np.ones(np.shape(z), dtype=complex)
    W, Wc = [one], [one]
    for m in range(1, L + 1):
        W.append(W[-1] * w)
        Wc.append(Wc[-1] * wc)
    return S, _stack(W), _stack(Wc)


def sphere_harmonics(x, y, z, L):
    """Complex orthonormal Y_lm on the unit sphere at ambient (x, y, z),
    in mode order (l, m = -l..l); arrays or jets, mode axis last."""
    S, W, Wc = _sphere_parts(x, y, z, L)
    ls, ms = _sphere_modes(L)
    am = np.abs(ms)
    sign = np.where(ms < 0, (-1.0) ** am, 1.0)
    if isinstance(z, taylor.Jet):
        pos = (ms >= 0).astype(float)
        Wsel = W[(Ellipsis, am)] * pos + Wc[(Ellipsis, am)] * ((1 - pos) * sign)
        return S[(Ellipsis, ls, am)].astype(complex) * Wsel
    Wsel = np.where(ms >= 0, W[..., am], Wc[..., am] * sign)
    return S[..., ls, am] * Wsel


def sphere_series_jet(coefs, x, y, z, L):
    """Jets of sum_lm c_lm Y_lm at jet points, one column of coefficients
    at a time: (..., columns).  Contracts over l before multiplying by the
    powers of x +- i y."""
    S, W, Wc = _sphere_parts(x, y, z, L)
    ls, ms = _sphere_modes(L)
    mvals = np.arange(-L, L + 1)
    am = np.abs(mvals)
    sign = np.where(mvals < 0, (-1.0) ** am, 1.0)
    Wsel = taylor.stack([W[(Ellipsis, int(m))] if m >= 0 else Wc[(Ellipsis, int(-m))] * float(sign[i])
                         for i, m in enumerate(mvals)], axis=-1)            # (..., 2L+1)
    Sg = S.c[..., :, am, :]                                                 # (..., l, 2L+1, s)
    cols = []
    for col in np.asarray(coefs).reshape(len(ls), -1).T:
        C = np.zeros((L + 1, 2 * L + 1), dtype=complex)
        C[ls, ms + L] = col
        A = taylor.Jet(S.space, np.einsum("...lms,lm->...ms", Sg, C))
        cols.append((A * Wsel).sum(-1))
    return taylor.stack(cols, axis=-1)


# ----------------------------------------------------------------------------
# meshes and fields
# ----------------------------------------------------------------------------

class Mesh:
    manifold = None
    nodes = None            # ambient coordinates (n, ambient_dim)
    weights = None          # quadrature weights (n,)
    n_modes = 0

    @property
    def size(self):
        return self.nodes.shape[0]

    @property
    def chart(self):
        return self.manifold.chart_coords(self.nodes)

    def field(self, values):
        return GridField(self, np.asarray(values))

    def sample(self, fn):
        """GridField of fn(ambient points)."""
        return GridField(self, np.asarray(fn(self.nodes), dtype=complex))

    def inner(self, f, g):
        f = f.values if isinstance(f, GridField) else f
        g = g.values if isinstance(g, GridField) else g
        w = self.weights.reshape((-1,) + (1,) * (np.ndim(f) - 1))
        return np.sum(w * np.conj(f) * g, axis=0)

    def project(self, values):
        """Band-limited projection evaluated back on the nodes."""
        return self.synthesis(self.analysis(values))

    def interpolate(self, values, points):
        return self.synthesis(self.analysis(values), points)


class FourierMesh(Mesh):
    """Uniform grid on Circle / FlatTorus with the Fourier interpolant.

    Modes exclude the Nyquist frequency, so the band-limited space has
    (n-1)^d functions.
    """

    def __init__(self, manifold, n=None):
        self.manifold = manifold
        d = manifold.dim
        if n is None:
            n = 256 if d == 1 else 64
        self.n = int(n)
        self.periods = np.asarray(manifold.periods, dtype=float).reshape(d)
        axes = [np.arange(self.n) * L / self.n for L in self.periods]
        grid = np.meshgrid(*axes, indexing="ij")
        self.nodes = np.stack([g.ravel() for g in grid], axis=-1)
        self.weights = np.full(self.nodes.shape[0], float(np.prod(self.periods)) / self.n ** d)
        idx = np.fft.fftfreq(self.n, 1.0 / self.n).astype(int)
        keep = np.abs(idx) < self.n / 2
        self._keep = keep
        self._idx1 = idx[keep]
        mi = np.meshgrid(*([self._idx1] * d), indexing="ij")
        self.mode_index = np.stack([m.ravel() for m in mi], axis=-1)       # integers
        self.frequencies = self.mode_index * (2 * np.pi / self.periods)
        self.n_modes = self.mode_index.shape[0]
        self.nyquist = float(np.min(np.pi * self.n / self.periods))

    @property
    def lattice_step(self):
        return 2 * np.pi / self.periods

    def _grid(self, values):
        d = self.manifold.dim
        v = np.asarray(values)
        return v.reshape((self.n,) * d + v.shape[1:]), v.shape[1:]

    def analysis(self, values):
        d = self.manifold.dim
        g, tail = self._grid(values)
        c = np.fft.fftn(g, axes=tuple(range(d))) / self.n ** d
        for ax in range(d):
            c = np.compress(self._keep, c, axis=ax)
        return c.reshape((self.n_modes,) + tail)

    def _full(self, coefs):
        d = self.manifold.dim
        tail = coefs.shape[1:]
        m = len(self._idx1)
        c = coefs.reshape((m,) * d + tail)
        full = np.zeros((self.n,) * d + tail, dtype=complex)
        sel = np.ix_(*([np.nonzero(self._keep)[0]] * d))
        full[sel] = c
        return full

    def synthesis(self, coefs, points=None):
        d = self.manifold.dim
        coefs = np.asarray(coefs)
        if points is None:
            full = self._full(coefs)
            v = np.fft.ifftn(full, axes=tuple(range(d))) * self.n ** d
            return v.reshape((self.size,) + coefs.shape[1:])
        return self.derivative_synthesis(coefs, [(0,) * d], points)[(0,) * d]

    def derivative_synthesis(self, coefs, betas, points=None, chunk=2048):
        """d^beta_v of sum_k c_k e^{i k.(p + v)} at v = 0, for each beta."""
        d = self.manifold.dim
        coefs = np.asarray(coefs)
        out = {}
        if points is None:
            for be in betas:
                fac = np.prod((1j * self.frequencies) ** np.array(be), axis=-1)
                c = coefs * fac.reshape((-1,) + (1,) * (coefs.ndim - 1))
                full = self._full(c)
                v = np.fft.ifftn(full, axes=tuple(range(d))) * self.n ** d
                out[tuple(be)] = v.reshape((self.size,) + coefs.shape[1:])
            return out
        points = np.asarray(points, dtype=float).reshape(-1, d)
        flat = coefs.reshape(self.n_modes, -1)
        for be in betas:
            fac = np.prod((1j * self.frequencies) ** np.array(be), axis=-1)
            res = np.empty((points.shape[0], flat.shape[1]), dtype=complex)
            for s in range(0, points.shape[0], chunk):
                E = np.exp(1j * points[s:s + chunk] @ self.frequencies.T) * fac
                res[s:s + chunk] = E @ flat
            out[tuple(be)] = res.reshape((points.shape[0],) + coefs.shape[1:])
        return out

    def describe(self):
        return {"kind": "fourier", "n": self.n, "periods": self.periods.tolist()}


class SphereMesh(Mesh):
    """Gauss-Legendre (in cos theta) x uniform longitude grid on Sphere2 with
    the spherical-harmonic interpolant of degree n_lat - 1."""

    def __init__(self, manifold, n_lat=48, n_lon=96, degree=None):
        self.manifold = manifold
        self.n_lat, self.n_lon = int(n_lat), int(n_lon)
        self.L = int(degree if degree is not None else n_lat - 1)
        if 2 * self.L >= self.n_lon or self.L > 2 * self.n_lat - 1:
            raise ResolutionInsufficient("grid too coarse for the requested degree")
        R = manifold.radius
        z, wz = np.polynomial.legendre.leggauss(self.n_lat)
        z = z[::-1].copy()
        wz = wz[::-1].copy()
        th = np.arccos(z)
        lam = 2 * np.pi * np.arange(self.n_lon) / self.n_lon
        TH, LA = np.meshgrid(th, lam, indexing="ij")
        self.nodes = manifold.from_chart(np.stack([TH.ravel(), LA.ravel()], axis=-1))
        self.weights = np.repeat(wz, self.n_lon) * (2 * np.pi / self.n_lon) * R ** 2
        self._z, self._wz, self._lam = z, wz, lam
        self.ls, self.ms = _sphere_modes(self.L)
        self.n_modes = len(self.ls)
        S = _legendre_S(z, self.L)
        Sall = np.stack(S, axis=-2)                      # (n_lat, l, m)
        am = np.abs(self.ms)
        sign = np.where(self.ms < 0, (-1.0) ** am, 1.0)
        sin = np.sqrt(np.clip(1 - z ** 2, 0, None))
        # Pbar_l^m(z) = S_l^m(z) sin^m, with the sign of negative m
        self._P = Sall[:, self.ls, am] * sin[:, None] ** am * sign       # (n_lat, modes)
        self.nyquist = self.L / R

    def analysis(self, values):
        v = np.asarray(values)
        tail = v.shape[1:]
        g = v.reshape((self.n_lat, self.n_lon) + tail)
        G = np.fft.fft(g, axis=1) * (2 * np.pi / self.n_lon)          # sum f e^{-i m lam}
        Gm = np.take(G, np.mod(self.ms, self.n_lon), axis=1)           # (n_lat, modes, ...)
        R = self.manifold.radius
        w = (self._wz[:, None] * self._P).reshape((self.n_lat, self.n_modes) + (1,) * len(tail))
        return R * np.sum(w * Gm, axis=0)

    def synthesis(self, coefs, points=None):
        coefs = np.asarray(coefs)
        R = self.manifold.radius
        tail = coefs.shape[1:]
        if points is None:
            # sum_m e^{i m lam} sum_l c_lm Pbar_l^m(z)
            c = coefs.reshape((self.n_modes, -1))
            T = np.einsum("im,mk->imk", self._P, c)                   # (n_lat, modes, K)
            F = np.zeros((self.n_lat, self.n_lon, c.shape[1]), dtype=complex)
            np.add.at(F, (slice(None), np.mod(self.ms, self.n_lon)), T)
            v = np.fft.ifft(F, axis=1) * self.n_lon / R
            return v.reshape((self.size,) + tail)
        return self.derivative_synthesis(coefs, [(0, 0)], points)[(0, 0)]

    def derivative_synthesis(self, coefs, betas, points=None, chunk=256):
        """d^beta_v of the interpolant at exp_p(sum v_k e_k(p)), v = 0."""
        M = self.manifold
        pts = self.nodes if points is None else np.asarray(points, dtype=float).reshape(-1, 3)
        coefs = np.asarray(coefs)
        flat = coefs.reshape(self.n_modes, -1)
        order = max((sum(b) for b in betas), default=0)
        out = {tuple(b): np.empty((pts.shape[0], flat.shape[1]), dtype=complex) for b in betas}
        if order == 0:
            for s in range(0, pts.shape[0], chunk):
                p = pts[s:s + chunk] / M.radius
                Y = sphere_harmonics(p[:, 0], p[:, 1], p[:, 2], self.L) / M.radius
                out[(0, 0)][s:s + chunk] = Y @ flat
        else:
            S = taylor.space(2, order)
            for s in range(0, pts.shape[0], chunk):
                p = pts[s:s + chunk]
                F = M.frame(p)
                u = [S.variable(k) + np.zeros(p.shape[0]) for k in range(2)]
                y = M.exp_jet([p[:, a] for a in range(3)],
                              [[F[:, k, a] for a in range(3)] for k in range(2)], u)
                y = [c * (1.0 / M.radius) for c in y]
                if flat.shape[1] <= 16:
                    G = sphere_series_jet(flat, y[0], y[1], y[2], self.L)
                    for b in betas:
                        out[tuple(b)][s:s + chunk] = G.derivative(b) / M.radius
                else:
                    Y = sphere_harmonics(y[0], y[1], y[2], self.L)
                    for b in betas:
                        out[tuple(b)][s:s + chunk] = (Y.derivative(b) / M.radius) @ flat
        return {k: v.reshape((pts.shape[0],) + coefs.shape[1:]) for k, v in out.items()}

    def describe(self):
        return {"kind": "sphere", "n_lat": self.n_lat, "n_lon": self.n_lon, "degree": self.L}


def default_mesh(manifold, **kw):
    """Default mesh: Circle 256 nodes, FlatTorus 64^2, Sphere2 48 x 96."""
    if isinstance(manifold, (Circle, FlatTorus)):
        return FourierMesh(manifold, **kw)
    if isinstance(manifold, Sphere2):
        return SphereMesh(manifold, **kw)
    raise ResolutionInsufficient(f"no quadrature mesh for {type(manifold).__name__}")


@dataclass
class GridField:
    mesh: Mesh
    values: np.ndarray

    @property
    def manifold(self):
        return self.mesh.manifold

    @property
    def nodes(self):
        return self.mesh.nodes

    def coefficients(self):
        return self.mesh.analysis(self.values)

    def at(self, points):
        return self.mesh.interpolate(self.values, points)

    def integral(self):
        w = self.mesh.weights.reshape((-1,) + (1,) * (self.values.ndim - 1))
        return np.sum(w * self.values, axis=0)


# ----------------------------------------------------------------------------
# microlocal lift and fibre Fourier transform
# ----------------------------------------------------------------------------

@dataclass
class LiftSamples:
    """Samples of a function on T_x X: points v (n, d) with quadrature
    weights, in frame components."""

    v: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    base: np.ndarray = None
    step: float = None


def cartesian_grid(radius, n, d):
    """Uniform grid with n points per axis on [-radius, radius)^d (periodic
    trapezoid rule), returned as (points, weights, step)."""
    h = 2.0 * radius / n
    ax = -radius + h * np.arange(n)
    g = np.meshgrid(*([ax] * d), indexing="ij")
    pts = np.stack([c.ravel() for c in g], axis=-1)
    return pts, np.full(pts.shape[0], h ** d), h


def polar_grid(radius, n_r, n_theta):
    """Gauss-Legendre radii times uniform angles on the disc (d = 2)."""
    r, wr = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * radius * (r + 1)
    wr = 0.5 * radius * wr
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    R, T = np.meshgrid(r, th, indexing="ij")
    pts = np.stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()], axis=-1)
    w = (wr[:, None] * r[:, None] * (2 * np.pi / n_theta) * np.ones_like(T)).ravel()
    return pts, w


def microlocal_lift(f, x, psi=None, grid="polar", n=64, n_theta=None):
    """v -> psi(v) f(exp_x v) sampled on a grid of T_x X of radius
    outer_fraction * injectivity radius (scalar bundles: tau is trivial).

    ``f`` is a GridField (band-limited interpolation).  ``grid`` is "polar"
    (d = 2: n Gauss radii by n_theta angles; d = 1: the symmetric Gauss
    grid) or "cartesian" (n per axis, periodic trapezoid; pairs exactly with
    ``dual_grid``).
    """
    M = f.manifold
    psi = psi or M.default_cutoff()
    d = M.dim
    p = M.from_chart(np.asarray(x, dtype=float))
    h = None
    if grid == "polar" and d == 2:
        v, w = polar_grid(psi.outer, n, n_theta or 2 * n)
    elif grid == "polar":
        r, w = np.polynomial.legendre.leggauss(2 * n)
        v, w = (psi.outer * r)[:, None], psi.outer * w
    else:
        v, w, h = cartesian_grid(psi.outer, n, d)
    F = M.frame(p)
    q = M.exp(np.broadcast_to(p, (v.shape[0],) + p.shape), v @ F)
    vals = psi.of_vector(v) * f.at(q)
    return LiftSamples(v, w, vals, p, h)


def fiber_fourier(g, zeta, sign=-1):
    """(2 pi)^{-d/2} sum w e^{sign i <zeta, v>} g(v): quadrature of the
    fibre Fourier transform (sign=-1) or its inverse (sign=+1)."""
    zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
    d = g.v.shape[1]
    out = np.empty(zeta.shape[0], dtype=complex)
    gw = g.weights * g.values
    for s in range(0, zeta.shape[0], 1024):
        out[s:s + 1024] = np.exp(sign * 1j * zeta[s:s + 1024] @ g.v.T) @ gw
    return out * (2 * np.pi) ** (-d / 2)


def inverse_fiber_fourier(ghat, v):
    """Inverse transform of samples ``ghat`` (a LiftSamples on the dual
    grid) at the points v."""
    return fiber_fourier(ghat, v, sign=+1)


def dual_grid(g):
    """The zeta grid dual to a Cartesian lift grid (exact DFT pairing)."""
    n = int(round(g.v.shape[0] ** (1.0 / g.v.shape[1])))
    d = g.v.shape[1]
    step = 2 * np.pi / (n * g.step)
    ax = step * (np.arange(n) - n // 2)
    m = np.meshgrid(*([ax] * d), indexing="ij")
    pts = np.stack([c.ravel() for c in m], axis=-1)
    return pts, np.full(pts.shape[0], step ** d)


# ----------------------------------------------------------------------------
# transform of the cut-off on the mode lattice
# ----------------------------------------------------------------------------

def cutoff_transform(psi, step, half_count, oversample=2):
    """Psi(eta) = (2 pi)^{-d} int psi(v) e^{-i eta v} dv on the lattice
    eta in step * Z^d with |eta_i| <= half_count steps (an FFT over the box
    of side 2 pi / step).  Returns (grid array, tail) where tail is the
    largest |Psi| on the outer shell."""
    step = np.atleast_1d(np.asarray(step, dtype=float))
    d = len(step)
    n = 2 * half_count * oversample
    box = 2 * np.pi / step
    axes = [(np.arange(n) - n // 2) * Lb / n for Lb in box]
    g = np.meshgrid(*axes, indexing="ij")
    vals = psi.of_vector(np.stack(g, axis=-1))
    c = np.fft.fftn(np.fft.ifftshift(vals), axes=tuple(range(d)))
    c = np.fft.fftshift(c) * np.prod(box / n) / (2 * np.pi) ** d
    mid = n // 2
    sl = tuple(slice(mid - half_count, mid + half_count + 1) for _ in range(d))
    Psi = c[sl].real
    shell = np.zeros(Psi.shape, dtype=bool)
    for ax in range(d):
        idx = [slice(None)] * d
        idx[ax] = [0, -1]
        shell[tuple(idx)] = True
    return Psi, float(np.max(np.abs(Psi[shell])))


# ----------------------------------------------------------------------------
# operators
# ----------------------------------------------------------------------------

class SpectralOperator:
    """Linear operator on GridField values.  Subclasses implement
    ``apply_at(values, points)``; points=None means the mesh nodes."""

    provenance = "operator"
    in_block = 1
    out_block = 1

    def __init__(self, mesh):
        self.mesh = mesh

    def apply_at(self, values, points=None):
        raise NotImplementedError

    def apply(self, f):
        vals = f.values if isinstance(f, GridField) else np.asarray(f)
        return self.apply_at(vals, None)

    def __call__(self, f):
        return GridField(self.mesh, self.apply(f))

    def __matmul__(self, other):
        return ComposedOperator(self, other)

    def compose(self, other):
        return ComposedOperator(self, other)

    @property
    def matrix(self):
        """Dense matrix on node values (scalar operators)."""
        n = self.mesh.size
        return self.apply(np.eye(n, dtype=complex))

    def adjoint_matrix(self):
        """Adjoint in the quadrature inner product: W^{-1} A^H W."""
        w = self.mesh.weights
        return (np.conj(self.matrix).T * w[None, :]) / w[:, None]


class ComposedOperator(SpectralOperator):
    provenance = "composed"

    def __init__(self, A, B):
        super().__init__(A.mesh)
        self.A, self.B = A, B

    def apply_at(self, values, points=None):
        return self.A.apply_at(self.B.apply_at(values, None), points)


def zeta_degree(a):
    """Total degree in zeta when the symbol is a polynomial in zeta with
    closed-form coefficients, else None."""
    if not isinstance(a, ExpressionSymbol):
        return None
    _, zs = variables(a.dim)
    deg = 0
    for e in a.matrix:
        e = sp.expand(e)
        if not e.is_polynomial(*zs):
            return None
        if e != 0:
            deg = max(deg, sp.Poly(e, *zs).total_degree())
    return deg


def _symbol_coefficients(a, points, degree, adjoint=False):
    """Coefficients a_beta(p) of a(p, zeta) = sum a_beta zeta^beta (frame
    components), shape {beta: (P, r, c)}."""
    M = a.manifold if a.manifold is not None else None
    d = a.dim
    T = taylor.space(d, degree)
    P0 = plain_point(M, M.chart_coords(points), np.zeros(points.shape[:-1] + (d,)))
    P = P0.lift(T)
    batch = points.shape[:-1]
    P = JetPoint(M, T, P.y, [T.variable(k) + np.zeros(batch) for k in range(d)], P.frame, P._chart)
    J = a.eval_jet(P)
    return {m: J.coefficient(m) for m in T.monomials}


def _rho_inverse_jet(M, u):
    """1 / rho(exp_x(u), x) as a jet in the normal coordinates u."""
    sp_ = u[0].space
    if M.flat:
        return sp_.constant(np.ones(u[0].batch))
    R = M.radius
    s = sum(c * c for c in u) * (1.0 / R ** 2)
    acc = sp_.constant(np.zeros(u[0].batch))
    for n in range(sp_.order // 2 + 1, -1, -1):
        acc = acc * s + (-1) ** n / math.factorial(2 * n + 1)
    return acc.reciprocal()


def _lift_grids(psi, mesh, d, margin=80.0, pad=None):
    """v grid resolving the mesh band plus the width of the cut-off's
    transform, and a zero-padded dual zeta grid (period pad * box)."""
    r = psi.outer
    n = int(math.ceil(2 * r * (mesh.nyquist + margin) / math.pi))
    n += n % 2
    pad = pad or (8 if d == 1 else 2)
    v, w, h = cartesian_grid(r, n, d)
    step = 2 * np.pi / (pad * n * h)
    nz = pad * n
    ax = step * (np.arange(nz) - nz // 2)
    g = np.meshgrid(*([ax] * d), indexing="ij")
    z = np.stack([c.ravel() for c in g], axis=-1)
    return v, w, z, np.full(z.shape[0], step ** d)


def _lift_guard(n_targets, v, z, mesh):
    cost = n_targets * v.shape[0] * (z.shape[0] + mesh.n_modes)
    if cost > LIFT_BUDGET:
        raise ResolutionInsufficient(f"lift quadrature needs ~{cost:.1e} operations; use a coarser "
                                     "mesh, fewer target points or the differential/fourier route")


class QuantizedOperator(SpectralOperator):
    """Op_psi(a) on a mesh."""

    provenance = "quantized"

    def __init__(self, a, mesh, psi, method, degree=None, half_width=None):
        super().__init__(mesh)
        self.symbol = a
        self.psi = psi
        self.method = method
        self.degree = degree
        self.out_block, self.in_block = a.block_shape
        self.tail = 0.0
        if method == "fourier":
            self._prepare_fourier(half_width)

    # fourier route -----------------------------------------------------
    def _prepare_fourier(self, half_width):
        """The zeta-integral is a trapezoid sum on a sub-lattice of the mode
        lattice (refinement ``sub``); its aliasing error is the symbol's kernel
        at distance sub * period - outer radius, and the truncation is set by
        the decay of Psi beyond ``half_width``."""
        mesh = self.mesh
        if not isinstance(mesh, FourierMesh):
            raise ResolutionInsufficient("the fourier route needs a flat Fourier mesh")
        d = mesh.manifold.dim
        self.sub = 8 if d == 1 else 4
        self.half_width = half_width or (1024.0 if d == 1 else 200.0)
        self.step = mesh.lattice_step / self.sub
        self.half_count = int(math.ceil(self.half_width / self.step.min()))
        self.Psi, self.tail = cutoff_transform(self.psi, self.step, self.half_count)
        if self.tail > 1e-10 * abs(self.Psi.max()):
            raise ResolutionInsufficient(f"cut-off transform not resolved (tail {self.tail:.1e})")
        K = len(mesh._idx1) // 2
        self._grid_axis = 2 * (self.sub * K + self.half_count) + 1
        self._xfree = not self.symbol.depends_on_x
        if self._xfree:
            self._smoothed = self._smoothed_symbol(np.zeros((1, d)))[0]
        elif mesh.size * self._grid_axis ** d > 5e8:
            raise ResolutionInsufficient("x-dependent fourier route too costly on this mesh")

    def _smoothed_symbol(self, xs):
        """a~(x, k) = sum_eta a(x, k + eta) Psi(eta) step^d on the mode lattice,
        shape (P, modes, r, c)."""
        mesh = self.mesh
        d = mesh.manifold.dim
        K = len(mesh._idx1) // 2
        s, H = self.sub, self.half_count
        ax = [np.arange(-s * K - H, s * K + H + 1) * st for st in self.step]
        Z = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
        r, c = self.symbol.block_shape
        out = np.empty((xs.shape[0], (2 * K + 1) ** d, r, c), dtype=complex)
        # the convolution is sorted -K..K per axis; the mesh uses FFT order
        order = np.ravel_multi_index(tuple((mesh.mode_index + K).T), (2 * K + 1,) * d)
        kernel = self.Psi * float(np.prod(self.step))
        keep = (slice(None, None, s),) * d
        for i, x in enumerate(xs):
            A = self.symbol.evaluate(np.broadcast_to(x, Z.shape), Z, mesh.manifold)
            for a_ in range(r):
                for b_ in range(c):
                    # Psi is even, so the convolution equals the correlation
                    sm = fftconvolve(A[..., a_, b_], kernel, mode="valid")[keep]
                    out[i, :, a_, b_] = sm.reshape(-1)[order]
        return out

    def _fourier_apply(self, coefs, points):
        mesh = self.mesh
        if self._xfree:
            S = self._smoothed                                   # (modes, r, c)
            c = np.einsum("krc,kc...->kr...", S, coefs)
            if points is None:
                return mesh.synthesis(c)
            return mesh.synthesis(c, points)
        pts = mesh.chart if points is None else mesh.manifold.chart_coords(points)
        pts = pts.reshape(-1, mesh.manifold.dim)
        out = []
        for x in pts:
            S = self._smoothed_symbol(x[None])[0]
            E = np.exp(1j * mesh.frequencies @ x)
            out.append(np.einsum("k,krc,kc...->r...", E, S, coefs))
        return np.stack(out, axis=0)

    # differential route --------------------------------------------------
    def _differential_apply(self, coefs, points):
        mesh = self.mesh
        M = mesh.manifold
        pts = mesh.nodes if points is None else np.asarray(points, dtype=float)
        betas = taylor.multi_indices(M.dim, self.degree)
        D = mesh.derivative_synthesis(coefs, betas, points)
        A = _symbol_coefficients(self.symbol, pts.reshape(-1, M.ambient_dim), self.degree)
        out = 0.0
        for be in betas:
            ab = A[be]                                           # (P, r, c)
            if not np.any(ab):
                continue
            out = out + (-1j) ** sum(be) * np.einsum("prc,pc...->pr...", ab, D[be])
        if isinstance(out, float):
            out = np.zeros((pts.reshape(-1, M.ambient_dim).shape[0], self.out_block)
                           + coefs.shape[2:], dtype=complex)
        return out

    # lift route -----------------------------------------------------------
    def _lift_apply(self, coefs, points):
        mesh = self.mesh
        M = mesh.manifold
        d = M.dim
        pts = mesh.nodes if points is None else np.asarray(points, dtype=float)
        pts = pts.reshape(-1, M.ambient_dim)
        v, w, zgrid, zw = _lift_grids(self.psi, mesh, d)
        _lift_guard(pts.shape[0], v, zgrid, mesh)
        wpsi = self.psi.of_vector(v) * w
        out = []
        r, c = self.symbol.block_shape
        for p in pts:
            F = M.frame(p)
            q = M.exp(np.broadcast_to(p, (v.shape[0],) + p.shape), v @ F)
            fq = mesh.synthesis(coefs, q).reshape(v.shape[0], c, -1)          # (V, c, T)
            x = np.broadcast_to(M.chart_coords(p), zgrid.shape)
            A = self.symbol.evaluate(x, zgrid, M)                             # (Z, r, c)
            E = np.exp(-1j * zgrid @ v.T)                                     # (Z, V)
            ghat = np.einsum("zv,v,vct->zct", E, wpsi, fq)
            out.append(np.einsum("z,zrc,zct->rt", zw, A, ghat) / (2 * np.pi) ** d)
        return np.stack(out, axis=0).reshape((pts.shape[0], r) + coefs.shape[2:])

    def apply_at(self, values, points=None):
        vals = np.asarray(values)
        if self.in_block == 1 and self.out_block == 1:
            coefs = self.mesh.analysis(vals)[:, None]
        else:
            coefs = self.mesh.analysis(vals)
        if self.method == "differential":
            out = self._differential_apply(coefs, points)
        elif self.method == "fourier":
            out = self._fourier_apply(coefs, points)
        else:
            out = self._lift_apply(coefs, points)
        if self.in_block == 1 and self.out_block == 1:
            out = out[:, 0]
        return out


class AdjointOperator(SpectralOperator):
    """Op*(a): the displayed adjoint integral with tau^{-1}, the reflected
    cut-off and rho^{-1}."""

    provenance = "adjoint"

    def __init__(self, a, mesh, psi, method, degree=None, base=None):
        super().__init__(mesh)
        self.symbol = a
        self.psi = psi
        self.method = method
        self.degree = degree
        self.in_block, self.out_block = a.block_shape
        self._base = base

    def _differential_apply(self, coefs, points):
        mesh = self.mesh
        M = mesh.manifold
        d = M.dim
        p = mesh.nodes if points is None else np.asarray(points, dtype=float)
        p = p.reshape(-1, M.ambient_dim)
        deg = self.degree
        betas = taylor.multi_indices(d, deg)
        Dg = mesh.derivative_synthesis(coefs, betas, points)           # (P, r, T)
        # c(u, t) = a*(exp_p(u), D^{-T} t), jets over the (u, t) box
        box = taylor.box_space(d, deg, d, deg)
        P0 = plain_point(M, M.chart_coords(p), np.zeros(p.shape[:-1] + (d,)))
        Q = displace(P0, box, d, "normal")
        J = self.symbol.eval_jet(Q)
        J = taylor.Jet(J.space, np.conj(np.swapaxes(J.c, -2, -3)))        # (P, c, r, size)
        U = taylor.space(d, deg)
        uvars = [U.variable(k) + np.zeros(p.shape[0]) for k in range(d)]
        rinv = _rho_inverse_jet(M, uvars)
        out = 0.0
        for be in betas:
            # jet in u of the t^beta coefficient
            cols = [box.index[al + be] for al in U.monomials]
            cu = taylor.Jet(U, J.c[..., cols])
            if not np.any(cu.c):
                continue
            h = cu * _expand2(rinv)
            for ga in betas:
                if any(g > b for g, b in zip(ga, be)):
                    continue
                rest = tuple(b - g for g, b in zip(ga, be))
                binom = math.prod(math.comb(b, g) for g, b in zip(ga, be))
                hd = h.derivative(rest)                                     # (P, c, r)
                out = out + (-1j) ** sum(be) * binom * np.einsum("pcr,pr...->pc...", hd, Dg[ga])
        if isinstance(out, float):
            out = np.zeros((p.shape[0], self.out_block) + coefs.shape[2:], dtype=complex)
        return out

    def _lift_apply(self, coefs, points):
        mesh = self.mesh
        M = mesh.manifold
        d = M.dim
        pts = mesh.nodes if points is None else np.asarray(points, dtype=float)
        pts = pts.reshape(-1, M.ambient_dim)
        v, w, zgrid, zw = _lift_grids(self.psi, mesh, d)
        _lift_guard(pts.shape[0], v, zgrid, mesh)
        r, c = self.symbol.block_shape
        out = []
        for p in pts:
            F = M.frame(p)
            pb = np.broadcast_to(p, (v.shape[0],) + p.shape)
            V = v @ F
            q = M.exp(pb, V)
            gq = mesh.synthesis(coefs, q).reshape(v.shape[0], r, -1)          # (V, r, T)
            # reflected cut-off psi(exp_q^{-1} x) and rho^{-1}(q, x)
            back = M.log(q, pb)
            wt = self.psi(M.norm(q, back)) / M.rho(pb, q) * w
            # covector at q whose pull-back by T_v exp_x is zeta
            dE = M.dexp(pb, V)                                                # [V, j, a]
            dy = np.einsum("kj,vja->vka", F, dE)
            Fq = M.frame(q)
            Dm = M.inner(q[:, None, None, :], Fq[:, :, None, :], dy[:, None, :, :])
            Dinv_T = np.linalg.inv(np.swapaxes(Dm, -1, -2))                   # (V, j, k)
            eta = np.einsum("vjk,zk->zvj", Dinv_T, zgrid)
            xq = np.broadcast_to(M.chart_coords(q), eta.shape)
            A = self.symbol.evaluate(xq, eta, M)                              # (Z, V, r, c)
            Ah = np.conj(np.swapaxes(A, -1, -2))                              # (Z, V, c, r)
            E = np.exp(-1j * zgrid @ v.T)                                     # (Z, V)
            val = np.einsum("z,zv,v,zvcr,vrt->ct", zw, E, wt, Ah, gq) / (2 * np.pi) ** d
            out.append(val)
        return np.stack(out, axis=0).reshape((pts.shape[0], c) + coefs.shape[2:])

    def apply_at(self, values, points=None):
        vals = np.asarray(values)
        scalar = self.in_block == 1 and self.out_block == 1
        coefs = self.mesh.analysis(vals)
        if scalar:
            coefs = coefs[:, None]
        if self.method == "differential":
            out = self._differential_apply(coefs, points)
        elif self.method == "fourier":
            # x-independent flat symbols: conj of the smoothed symbol
            S = self._base._smoothed
            c = np.einsum("krc,kr...->kc...", np.conj(S), coefs)
            out = self.mesh.synthesis(c, points)
        else:
            out = self._lift_apply(coefs, points)
        return out[:, 0] if scalar else out


def _expand2(j):
    return j.expand(-1).expand(-1)


def _choose_method(a, mesh, method, degree):
    if method is not None:
        if method == "differential" and degree is None:
            degree = zeta_degree(a)
            if degree is None:
                raise ResolutionInsufficient("differential route needs a zeta-polynomial symbol "
                                             "(or an explicit degree)")
        return method, degree
    deg = zeta_degree(a) if degree is None else degree
    if deg is not None:
        if deg > 6:
            raise ResolutionInsufficient("polynomial degree above the available jet depth")
        return "differential", deg
    if isinstance(mesh, FourierMesh):
        return "fourier", None
    return "lift", None


def quantize(a, mesh=None, psi=None, method=None, degree=None, half_width=None):
    """Op_psi(a) as a SpectralOperator on ``mesh`` (default mesh of the
    symbol's manifold)."""
    M = a.manifold
    if mesh is None:
        mesh = default_mesh(M)
    if M is None:
        a.manifold = M = mesh.manifold
    psi = psi or mesh.manifold.default_cutoff()
    method, degree = _choose_method(a, mesh, method, degree)
    if a.order > 0 and method != "differential" and a.order > 4:
        raise ResolutionInsufficient("order too high for the integral routes at desk scale")
    return QuantizedOperator(a, mesh, psi, method, degree, half_width)


def adjoint_quantize(a, mesh=None, psi=None, method=None, degree=None):
    """Op*(a): the formal adjoint of quantize(a) assembled from its own
    integral formula (not by transposition)."""
    M = a.manifold
    if mesh is None:
        mesh = default_mesh(M)
    psi = psi or mesh.manifold.default_cutoff()
    method, degree = _choose_method(a, mesh, method, degree)
    base = None
    if method == "fourier":
        if a.depends_on_x:
            method = "lift"
        else:
            base = QuantizedOperator(a, mesh, psi, "fourier")
    return AdjointOperator(a, mesh, psi, method, degree, base)


def _plane_wave(mesh, p, zeta, psi):
    """psi(log_p y) e^{i <zeta, log_p y>} on the mesh nodes."""
    M = mesh.manifold
    nodes = mesh.nodes
    pb = np.broadcast_to(p, nodes.shape)
    if isinstance(M, Sphere2):
        cosang = np.clip(np.sum(nodes * pb, axis=-1) / M.radius ** 2, -1, 1)
        far = np.arccos(cosang) * M.radius >= psi.outer
        safe = np.where(far[:, None], pb, nodes)
        logv = M.log(pb, safe)
    else:
        logv = M.log(pb, nodes)
        far = np.zeros(nodes.shape[0], dtype=bool)
    z = M.components(pb, logv)
    wts = np.where(far, 0.0, psi(np.linalg.norm(z, axis=-1)))
    return wts * np.exp(1j * z @ zeta)


def extract_symbol(A, xi, psi=None):
    """sigma_psi(A)(xi) = [A(psi_x e^{i phi(., xi)})](x) for covectors xi
    (a symbols.Covector, batched).  Returns (..., r, c) for block operators
    and (...) for scalar ones."""
    mesh = A.mesh
    M = mesh.manifold
    psi = psi or M.default_cutoff()
    x = np.asarray(xi.x, dtype=float)
    zeta = np.asarray(xi.zeta, dtype=float)
    batch = x.shape[:-1]
    xf = x.reshape(-1, M.dim)
    zf = zeta.reshape(-1, M.dim)
    if np.any(np.linalg.norm(zf, axis=-1) > mesh.nyquist):
        raise NyquistExceeded(f"|xi| above the mesh Nyquist bound {mesh.nyquist:.3g}")
    cin = A.in_block
    out = []
    for xc, zc in zip(xf, zf):
        p = M.from_chart(xc)
        w = _plane_wave(mesh, p, zc, psi)
        if cin == 1 and A.out_block == 1:
            out.append(A.apply_at(w, p[None])[0])
        else:
            cols = []
            for c in range(cin):
                f = np.zeros((mesh.size, cin), dtype=complex)
                f[:, c] = w
                cols.append(A.apply_at(f, p[None])[0])
            out.append(np.stack(cols, axis=-1))
    out = np.array(out)
    return out.reshape(batch + out.shape[1:])


# ----------------------------------------------------------------------------
# exact composition of differential operators (oracle)
# ----------------------------------------------------------------------------

def exact_composition_symbol(a, b, xi):
    """Normal symbol of Op(a) Op(b) for symbols polynomial in zeta, computed
    exactly: both operators act as a(x, -i d_v) on functions pulled back by
    exp, so the symbol is a finite combination of Taylor coefficients of
    e^{i phi} along nested exponential maps.  Independent of the expansion
    machinery; scalar symbols only."""
    M = xi.manifold
    d = M.dim
    da, db = zeta_degree(a), zeta_degree(b)
    if da is None or db is None:
        raise ValueError("exact composition needs symbols polynomial in zeta")
    P = xi.point()
    batch = P.batch
    U, W = taylor.space(d, da), taylor.space(d, db)
    S = taylor.product(U, W)
    base = P.lift(S)
    fx = base.get_frame()
    u = [S.variable(k) for k in range(d)]
    w = [S.variable(d + k) for k in range(d)]
    y = M.exp_jet(base.y, fx, u)
    q = M.exp_jet(y, M.frame_jet(y), w)
    z = M.log_jet(base.y, fx, q)
    F = taylor.exp(sum(e * zk for e, zk in zip(base.eta, z)) * 1j)
    # Op(b) F at y(u): coefficients b_beta(y(u)), derivatives in w
    T = taylor.space(d, db)
    ST = taylor.product(U, T)
    zero = U.constant(np.zeros(batch))
    yu = [taylor.Jet(U, inner_coefficient(c, U, W, (0,) * d, False).c) for c in y]
    Pt = JetPoint(M, U, yu, [zero] * d).lift(ST)
    Pt = JetPoint(M, ST, Pt.y, [ST.variable(d + k) + np.zeros(batch) for k in range(d)])
    Jb = b.eval_jet(Pt)
    G = 0.0
    for be in W.monomials:
        cb = inner_coefficient(Jb, U, T, be, derivative=False)[..., 0, 0]
        G = G + cb * inner_coefficient(F, U, W, be) * ((-1j) ** sum(be))
    # Op(a) G at x: coefficients of a at x, derivatives in u
    Ta = taylor.space(d, max(da, db))
    Pa = JetPoint(M, Ta, [Ta.constant(c.value) for c in P.y],
                  [Ta.variable(k) + np.zeros(batch) for k in range(d)])
    Ja = a.eval_jet(Pa)
    out = 0.0
    for al in U.monomials:
        out = out + Ja.coefficient(al)[..., 0, 0] * G.derivative(al) * ((-1j) ** sum(al))
    return out


# ----------------------------------------------------------------------------
# export
# ----------------------------------------------------------------------------

_MAGIC = b"NSYMBIN1"


def export_binary(path, array):
    """Little-endian flat binary: 8-byte magic, uint64 rows, uint64 cols,
    16-byte dtype tag "complex128", then row-major complex128 data."""
    a = np.asarray(array, dtype=np.complex128)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeMismatch("export expects a vector or a matrix")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", a.shape[0], a.shape[1]))
        fh.write(b"complex128".ljust(16, b"\0"))
        fh.write(np.ascontiguousarray(a).astype("<c16").tobytes())


def import_binary(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a normalsym binary file")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        tag = fh.read(16).rstrip(b"\0")
        if tag != b"complex128":
            raise ValueError(f"unsupported dtype {tag!r}")
        data = np.frombuffer(fh.read(), dtype="<c16")
    return data.reshape(rows, cols).astype(np.complex128)


def export_csv(path, field_or_array, mesh=None):
    """CSV with chart coordinates and real/imaginary parts per node."""
    if isinstance(field_or_array, GridField):
        mesh = field_or_array.mesh
        vals = field_or_array.values
    else:
        vals = np.asarray(field_or_array)
    coords = mesh.chart
    vals = vals.reshape(vals.shape[0], -1)
    cols = [f"x{k + 1}" for k in range(coords.shape[1])]
    for j in range(vals.shape[1]):
        cols += [f"re{j}", f"im{j}"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for c, v in zip(coords, vals):
            row = [f"{t:.17g}" for t in c]
            for z in v:
                row += [f"{z.real:.17g}", f"{z.imag:.17g}"]
            fh.write(",".join(row) + "\n")
