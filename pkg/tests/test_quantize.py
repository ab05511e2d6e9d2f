import struct

import numpy as np
import pytest

from normalsym.calculus import apply_to_function_expansion, sharp_product
from normalsym.errors import NyquistExceeded
from normalsym.geometry import Cutoff
from normalsym.quantize import (FourierMesh, LiftSamples, adjoint_quantize, cartesian_grid,
                                default_mesh, dual_grid, exact_composition_symbol,
                                export_binary, extract_symbol, fiber_fourier, import_binary,
                                inverse_fiber_fourier, microlocal_lift, polar_grid, quantize)
from normalsym.symbols import Covector, closed_form, norm_squared


@pytest.fixture(scope="module")
def cmesh(circle):
    return default_mesh(circle)


def _circle_wave(mesh, k):
    return np.exp(1j * k * mesh.chart[:, 0])


def _band_limited(mesh, band, rng):
    th = mesh.chart
    out = np.zeros(mesh.size, dtype=complex)
    for k in range(-band, band + 1):
        c = (rng.normal() + 1j * rng.normal()) / (1 + abs(k)) ** 2
        out += c * np.exp(1j * k * th[:, 0]) * (np.exp(1j * rng.integers(-band, band + 1) * th[:, 1])
                                                if th.shape[1] == 2 else 1)
    return out


@pytest.mark.parametrize("expr,fn", [("zeta1", lambda k: k), ("zeta1^2", lambda k: k ** 2)])
def test_circle_eigenvalues(circle, cmesh, expr, fn):
    A = quantize(closed_form(expr, 1, len(expr) - 4 if "^" not in expr else 2, manifold=circle), cmesh)
    for k in range(-32, 33):
        e = _circle_wave(cmesh, k)
        got = A.apply(e)
        assert np.max(np.abs(got - fn(k) * e)) <= 1e-8 * max(1, abs(fn(k)))


def test_identity(circle, torus, cmesh, rng):
    for M, mesh in [(circle, cmesh), (torus, FourierMesh(torus, 24))]:
        one = closed_form("1", M.dim, 0, manifold=M)
        f = _band_limited(mesh, 6, rng)
        assert np.max(np.abs(quantize(one, mesh).apply(f) - f)) < 1e-8


def test_extract_identity_and_zeta(circle, cmesh):
    one = quantize(closed_form("1", 1, 0, manifold=circle), cmesh)
    rs = np.geomspace(2, cmesh.nyquist / 4, 7)
    xi = Covector(circle, np.full((7, 1), 0.7), rs[:, None])
    assert np.allclose(extract_symbol(one, xi), 1.0, atol=1e-8)
    Z = quantize(closed_form("zeta1", 1, 1, manifold=circle), cmesh)
    assert np.max(np.abs(extract_symbol(Z, xi) - rs)) < 1e-6
    with pytest.raises(NyquistExceeded):
        extract_symbol(Z, Covector(circle, np.array([[0.0]]), np.array([[cmesh.nyquist + 1]])))


def test_cutoff_independence(circle, cmesh):
    """Two cut-offs: extracted symbols differ by a rapidly decaying function.
    The decay steepens with |xi| (super-polynomial); the default mesh floor is ~1e-6."""
    a = closed_form("(1+zeta1^2)^(1/2)", 1, 1, manifold=circle)
    p1 = circle.default_cutoff()
    p2 = Cutoff(p1.radius, 0.25, 0.9)
    rs = np.arange(2.0, 43.0, 4.0)
    xi = Covector(circle, np.full((len(rs), 1), 0.7), rs[:, None])
    d = np.abs(extract_symbol(quantize(a, cmesh, psi=p1), xi, psi=p1)
               - extract_symbol(quantize(a, cmesh, psi=p2), xi, psi=p2))
    lo = np.polyfit(np.log(rs[:3]), np.log(d[:3]), 1)[0]
    hi = np.polyfit(np.log(rs[2:]), np.log(d[2:]), 1)[0]
    assert hi < lo and hi <= -4.0
    assert d[-1] < 1e-5
    # polynomial symbols quantize to differential operators; what remains is the
    # mesh resolution of the windowed plane waves
    l = closed_form("zeta1^2", 1, 2, manifold=circle)
    e1 = extract_symbol(quantize(l, cmesh, psi=p1), xi, psi=p1)
    e2 = extract_symbol(quantize(l, cmesh, psi=p2), xi, psi=p2)
    assert np.max(np.abs(e1 - e2) / rs ** 2) < 1e-5


def _bump(t, c, w):
    s = np.angle(np.exp(1j * (t - c))) / w
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    out[m] = np.exp(-1 / (1 - s[m] ** 2))
    return out


def test_pseudolocality(circle):
    """u, v bumps with disjoint supports: f -> v A(u f) for a smoothing-order symbol.
    Probed on resolved inputs u e^{ik.}: stable to 1e-8 under mesh refinement x2 and
    decaying in k."""
    a = closed_form("(1+zeta1^2)^(-1)", 1, -2, manifold=circle)
    ks = np.arange(0, 17, 4)
    res = []
    for n in (256, 512):
        mesh = FourierMesh(circle, n)
        th = mesh.chart[:, 0]
        u, v = _bump(th, 0.0, 1.2), _bump(th, np.pi, 1.2)
        A = quantize(a, mesh)
        vals = []
        for k in ks:
            q = v * A.apply(u * np.exp(1j * k * th))
            vals.append(np.sqrt(abs(mesh.inner(q, q))))
        res.append(np.array(vals))
    assert np.max(np.abs(res[0] - res[1])) < 1e-8
    assert res[1][-1] < 0.05 * res[1][0]
    assert np.all(np.diff(res[1]) < 0)


def test_adjoint_circle(circle, cmesh, rng):
    z = closed_form("zeta1", 1, 1, manifold=circle)
    A, As = quantize(z, cmesh), adjoint_quantize(z, cmesh)
    f = _band_limited(cmesh, 10, rng)
    assert np.max(np.abs(A.apply(f) - As.apply(f))) < 1e-8
    V = closed_form("cos(x1) + 2", 1, 0, manifold=circle)
    Vq = quantize(V, cmesh)
    assert np.max(np.abs(Vq.apply(f) - (np.cos(cmesh.chart[:, 0]) + 2) * f)) < 1e-8
    assert np.max(np.abs(adjoint_quantize(V, cmesh).apply(f) - Vq.apply(f))) < 1e-8


def test_adjoint_torus(torus, rng):
    """x1 is not periodic on the torus; sin(x1) zeta1 has adjoint sin(x1) zeta1 - i cos(x1)."""
    mesh = FourierMesh(torus, 16)
    a = closed_form("sin(x1)*zeta1", 2, 1, manifold=torus)
    A, As = quantize(a, mesh), adjoint_quantize(a, mesh)
    want = quantize(closed_form("sin(x1)*zeta1 - i*cos(x1)", 2, 1, manifold=torus), mesh)
    for _ in range(2):
        f, g = _band_limited(mesh, 4, rng), _band_limited(mesh, 4, rng)
        scale = np.sqrt(abs(mesh.inner(f, f) * mesh.inner(g, g)))
        assert abs(mesh.inner(A.apply(f), g) - mesh.inner(f, As.apply(g))) / scale < 1e-8
        assert np.max(np.abs(As.apply(g) - want.apply(g))) < 1e-8


def test_lift_examples(circle, sphere, cmesh):
    psi = circle.default_cutoff()
    one = cmesh.sample(lambda p: np.ones(p.shape[0]))
    g = microlocal_lift(one, np.array([0.0]), psi)
    assert np.allclose(g.values, psi.of_vector(g.v), atol=1e-12)
    for k in (1, 5):
        f = cmesh.field(_circle_wave(cmesh, k))
        g = microlocal_lift(f, np.array([0.0]), psi)
        assert np.allclose(g.values, psi.of_vector(g.v) * np.exp(1j * k * g.v[:, 0]), atol=1e-10)
    smesh = default_mesh(sphere)
    z = smesh.sample(lambda p: p[:, 2])
    spsi = sphere.default_cutoff()
    g = microlocal_lift(z, np.array([0.0, 0.0]), spsi, n=16)
    want = spsi.of_vector(g.v) * np.cos(np.linalg.norm(g.v, axis=-1))
    assert np.allclose(g.values, want, atol=1e-10)


def test_fiber_fourier():
    v, w = polar_grid(12.0, 64, 64)
    g = LiftSamples(v, w, np.exp(-np.sum(v ** 2, axis=-1) / 2))
    zeta = np.array([[0.0, 0.0], [1.0, 0.5], [2.0, -1.5]])
    assert np.allclose(fiber_fourier(g, zeta), np.exp(-np.sum(zeta ** 2, axis=-1) / 2),
                       atol=1e-10)
    zero = LiftSamples(v, w, np.zeros(v.shape[0]))
    assert np.all(fiber_fourier(zero, zeta) == 0)


def test_fiber_fourier_round_trip():
    v, w, h = cartesian_grid(3.0, 24, 2)
    vals = np.exp(1j * v @ np.array([1.0, 2.0]) * 2 * np.pi / 6.0) + np.cos(
        v[:, 0] * 2 * np.pi / 3.0)
    g = LiftSamples(v, w, vals, step=h)
    zeta, wz = dual_grid(g)
    ghat = LiftSamples(zeta, wz, fiber_fourier(g, zeta))
    assert np.max(np.abs(inverse_fiber_fourier(ghat, v) - vals)) < 1e-8


def test_export_binary_round_trip(tmp_path, rng):
    a = rng.normal(size=(3, 5)) + 1j * rng.normal(size=(3, 5))
    p = tmp_path / "m.bin"
    export_binary(p, a)
    raw = p.read_bytes()
    assert raw[:8] == b"NSYMBIN1"
    assert struct.unpack("<QQ", raw[8:24]) == (3, 5)
    assert raw[24:40].rstrip(b"\0") == b"complex128"
    assert len(raw) == 40 + 16 * 15
    assert np.array_equal(import_binary(p), a)
    export_binary(p, a[:, 0])
    assert import_binary(p).shape == (3, 1)


def test_sphere_operator_checks(sphere):
    """Op(|xi|^2) on the ell = 1 harmonic z, the function expansion at zeta = 0,
    and a loose composition check at moderate |xi| (the mesh resolves |xi| ~ 8)."""
    mesh = default_mesh(sphere)
    l = norm_squared(2, manifold=sphere)
    A = quantize(l, mesh)
    z = mesh.nodes[:, 2]
    assert np.max(np.abs(A.apply(z) - 2 * z)) < 1e-8
    X = np.array([[1.0, 0.5], [1.8, 2.0]])
    xi0 = Covector(sphere, X, np.zeros_like(X))
    exp = apply_to_function_expansion(l, lambda x: np.cos(x[..., 0]), xi0, 2)
    assert np.allclose(A.apply_at(z, sphere.from_chart(X)), exp, atol=1e-8)
    V = closed_form("cos(x1) + 2", 2, 0, manifold=sphere)
    C = A @ quantize(V, mesh)
    for r in (4.0, 8.0):
        xi = Covector(sphere, X, np.array([[0.6, 0.8], [-0.8, 0.6]]) * r)
        ref = exact_composition_symbol(l, V, xi)
        assert np.allclose(sharp_product(l, V).evaluate(X, xi.zeta)[..., 0, 0], ref, atol=1e-9)
        assert np.max(np.abs(extract_symbol(C, xi) - ref) / np.abs(ref)) < 1e-3
