import numpy as np
import pytest
import sympy as sp

from normalsym.calculus import (ExpansionConfig, LITERAL_R_COEFFICIENT, adjoint_symbol,
                                apply_to_function_expansion, classical_composition,
                                isotropic_composition, radial_profile, sharp_product,
                                term_ledger)
from normalsym.errors import ClassMismatch, DepthExceeded, ShapeMismatch
from normalsym.expression import variables
from normalsym.quantize import default_mesh, exact_composition_symbol, quantize
from normalsym.symbols import Covector, closed_form, constant_symbol, norm_squared


def _cov(M, x, z):
    return Covector(M, np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(z, float)))


def _shell(rng, n, d, lo=1.0, hi=50.0):
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    return u * np.geomspace(lo, hi, n)[:, None]


def test_flat_example(torus):
    # -d^2 composed with multiplication by x1: -x1 d^2 - 2 d, symbol x1 zeta^2 - 2 i zeta
    a = closed_form("zeta1^2", 2, 2, manifold=torus)
    b = closed_form("x1", 2, 0, manifold=torus)
    c = sharp_product(a, b)
    xs, zs = variables(2)
    want = xs[0] * zs[0] ** 2 - 2 * sp.I * zs[0]
    assert sp.simplify(c.expr - want) == 0


def test_unit(torus, sphere, rng):
    for M in (torus, sphere):
        b = closed_form("sin(x1)*zeta1^2 + zeta2", 2, 2, manifold=M)
        one = constant_symbol(1, 2, manifold=M)
        x = np.array([[1.0, 0.4], [2.0, 1.1]])
        z = np.array([[3.0, -1.0], [0.5, 7.0]])
        for s in (sharp_product(one, b), sharp_product(b, one)):
            assert np.allclose(s.evaluate(x, z), b.evaluate(x, z), atol=1e-10)


def test_resolvent_times_one_plus_laplacian(torus):
    a = closed_form("1/(1+zeta1^2+zeta2^2)", 2, -2, manifold=torus)
    b = closed_form("1+zeta1^2+zeta2^2", 2, 2, manifold=torus)
    for p in (sharp_product(a, b), sharp_product(b, a)):
        assert sp.simplify(p.expr - 1) == 0


def test_flat_reduction_matches_classical(torus, rng):
    a = closed_form("sin(x1)*zeta1^2 + cos(x2)*zeta2", 2, 2, manifold=torus)
    b = closed_form("cos(x1+x2)*zeta2^2 + zeta1", 2, 2, manifold=torus)
    sym = sharp_product(a, b)
    gen = sharp_product(a, b, ExpansionConfig(symbolic=False, mode="general"))
    classical = classical_composition(a.matrix, b.matrix, 2, 2)
    x = rng.uniform(0, 6, size=(12, 2))
    z = _shell(rng, 12, 2)
    from normalsym.symbols import ExpressionSymbol, SymbolClass
    ref = ExpressionSymbol(classical, 2, SymbolClass(4.0)).evaluate(x, z)
    scale = (1 + np.linalg.norm(z, axis=-1)) ** 4
    assert np.max(np.abs(sym.evaluate(x, z) - ref)[..., 0, 0] / scale) < 1e-10
    assert np.max(np.abs(gen.evaluate(x, z) - ref)[..., 0, 0] / scale) < 1e-10


def test_sphere_curvature_term_against_exact_composition(sphere, rng):
    """zeta1 # zeta2^2: the curvature summand is needed and its weight is -1/3."""
    a = closed_form("zeta1", 2, 1, manifold=sphere)
    b = closed_form("zeta2^2", 2, 2, manifold=sphere)
    x = np.array([[1.0, 0.3], [1.6, 2.0], [0.7, -1.0]])
    z = np.array([[3.0, 4.0], [-5.0, 2.0], [6.0, -8.0]])
    xi = _cov(sphere, x, z)
    exact = exact_composition_symbol(a, b, xi)
    ours = sharp_product(a, b).evaluate(x, z)[..., 0, 0]
    literal = sharp_product(a, b, ExpansionConfig(r_coefficient=LITERAL_R_COEFFICIENT))
    none = sharp_product(a, b, ExpansionConfig(r_coefficient=0.0))
    assert np.max(np.abs(ours - exact)) < 1e-10
    assert np.max(np.abs(none.evaluate(x, z)[..., 0, 0] - exact)) > 0.5
    assert np.max(np.abs(literal.evaluate(x, z)[..., 0, 0] - exact)) > 0.5


def test_sphere_general_mode_x_dependent(sphere):
    a = closed_form("cos(x1)*zeta1^2 + zeta2", 2, 2, manifold=sphere)
    b = closed_form("sin(x2)*zeta1*zeta2 + x1", 2, 2, manifold=sphere)
    x = np.array([[1.0, 0.3], [1.9, -0.7]])
    z = np.array([[0.8, -0.6], [1.2, 2.0]])
    exact = exact_composition_symbol(a, b, _cov(sphere, x, z))
    gen = sharp_product(a, b, ExpansionConfig(max_order_drop=4, mode="general"))
    assert np.max(np.abs(gen.evaluate(x, z)[..., 0, 0] - exact)) < 1e-9


def test_isotropic_profile(sphere):
    s = sp.Symbol("s", positive=True)
    h = radial_profile(closed_form("(1+zeta1^2+zeta2^2)^2", 2, 4, manifold=sphere))
    assert sp.simplify(h[0, 0] - (1 + s) ** 2) == 0
    assert radial_profile(closed_form("zeta1", 2, 1, manifold=sphere)) is None
    out = isotropic_composition(sp.Matrix([[1 / (1 + s)]]), sp.Matrix([[1 + s]]), 2, 2, 1)
    # kappa (d-1)(-2/3 + 4/3) s f' g' = (2/3) s * (-(1+s)^-2) * 1
    assert sp.simplify(out[0, 0] - (1 - sp.Rational(2, 3) * s / (1 + s) ** 2)) == 0


def test_isotropic_product_matches_jet_route(sphere):
    a = closed_form("1/(1+zeta1^2+zeta2^2)", 2, -2, manifold=sphere)
    b = closed_form("1+zeta1^2+zeta2^2", 2, 2, manifold=sphere)
    fast = sharp_product(a, b)
    slow = sharp_product(a, b, ExpansionConfig(symbolic=False))
    x = np.array([[1.0, 0.4], [2.2, 1.0]])
    z = np.array([[3.0, 1.0], [0.2, -0.5]])
    assert np.allclose(fast.evaluate(x, z), slow.evaluate(x, z), atol=1e-10)


def test_shape_and_class_errors(torus):
    from normalsym.symbols import ExpressionSymbol, SymbolClass
    xs, zs = variables(2)
    row = ExpressionSymbol(sp.Matrix([[zs[0], 1]]), 2, SymbolClass(1.0), manifold=torus)
    with pytest.raises(ShapeMismatch):
        sharp_product(row, row)
    other = ExpressionSymbol(sp.Matrix([[zs[0]]]), 2, SymbolClass(1.0, 0.75, 0.25), manifold=torus)
    plain = closed_form("zeta1", 2, 1, manifold=torus)
    with pytest.raises(ClassMismatch):
        sharp_product(plain, other)
    with pytest.raises(DepthExceeded):
        ExpansionConfig(max_order_drop=3)


def test_order_arithmetic(sphere):
    a = closed_form("zeta1 + x1*zeta2", 2, 1, manifold=sphere)
    b = closed_form("zeta2^2 + 1", 2, 2, manifold=sphere)
    assert sharp_product(a, b).order == 3


def test_associativity_up_to_order(sphere):
    a = closed_form("zeta1 + x1*zeta2", 2, 1, manifold=sphere)
    b = closed_form("zeta2^2 + sin(x1)*zeta1", 2, 2, manifold=sphere)
    c = closed_form("cos(x2)*zeta1", 2, 1, manifold=sphere)
    L = sharp_product(sharp_product(a, b), c)
    R = sharp_product(a, sharp_product(b, c))
    rs = np.geomspace(10, 1e3, 6)
    u = np.array([0.6, 0.8])
    x = np.array([1.1, 0.4])
    vals = [abs((L.evaluate(x, r * u) - R.evaluate(x, r * u))[0, 0]) for r in rs]
    slope = np.polyfit(np.log(rs), np.log(vals), 1)[0]
    assert slope <= 1 + 2 + 1 - 3 + 0.3


def test_adjoint_examples(torus):
    assert sp.simplify(adjoint_symbol(closed_form("zeta1", 2, 1, manifold=torus)).expr
                       - variables(2)[1][0]) == 0
    xs, zs = variables(2)
    st = adjoint_symbol(closed_form("x1*zeta1", 2, 1, manifold=torus))
    assert sp.simplify(st.expr - (xs[0] * zs[0] - sp.I)) == 0
    with pytest.raises(DepthExceeded):
        adjoint_symbol(closed_form("zeta1", 2, 1, manifold=torus), ExpansionConfig(3, "general"))


def test_adjoint_involution(sphere, rng):
    b = closed_form("zeta2^2 + sin(x1)*zeta1", 2, 2, manifold=sphere)
    st = adjoint_symbol(adjoint_symbol(b))
    x = np.tile([1.1, 0.4], (6, 1))
    z = _shell(rng, 6, 2, 10, 1e3)
    diff = np.abs(st.evaluate(x, z) - b.evaluate(x, z))[..., 0, 0]
    # order mu - 2 = 0: bounded, here round-off sized
    assert np.all(diff <= 1e-12 * (1 + np.linalg.norm(z, axis=-1)) ** 3)


def test_adjoint_sphere_laplacian_pairing(sphere):
    """For |xi|^2 the Ricci summand (-2/3) cancels against the fourth-derivative
    summand, so Op(|xi|^2) is formally self-adjoint; the quadrature pairing agrees
    and distinguishes a -2/3 shift."""
    l = norm_squared(2, manifold=sphere)
    star = adjoint_symbol(l)
    x = np.array([[1.0, 0.5], [2.0, -1.0]])
    z = np.array([[3.0, 1.0], [-0.5, 6.0]])
    assert np.allclose(star.evaluate(x, z), l.evaluate(x, z), atol=1e-9)
    mesh = default_mesh(sphere)
    A = quantize(l, mesh)
    rng = np.random.default_rng(3)
    X = mesh.nodes
    f = np.exp(X @ (rng.normal(size=3) * 0.5))
    g = np.exp(X @ (rng.normal(size=3) * 0.5))
    lhs = mesh.inner(A.apply(f), g)
    rhs = mesh.inner(f, A.apply(g))
    scale = np.sqrt(abs(mesh.inner(f, f) * mesh.inner(g, g)))
    assert abs(lhs - rhs) / scale < 1e-8
    shifted = (2 / 3) * mesh.inner(f, g) / scale
    assert abs(shifted) > 1e-2


def test_apply_to_function_examples(torus, rng):
    a = closed_form("sin(x1)*zeta1^2 + zeta2", 2, 2, manifold=torus)
    xi = _cov(torus, rng.uniform(0, 6, (4, 2)), rng.normal(size=(4, 2)) * 4)
    # f = 1
    got = apply_to_function_expansion(a, "1", xi, 3)
    assert np.allclose(got, a(xi.x, xi.zeta))
    # position-only symbol
    g = closed_form("cos(x2) + 2", 2, 0, manifold=torus)
    for N in range(4):
        got = apply_to_function_expansion(g, "exp(sin(x1))", xi, N)
        want = (np.cos(xi.x[:, 1]) + 2) * np.exp(np.sin(xi.x[:, 0]))
        assert np.allclose(got, want)
    # zeta1 on e^{i x1}: (zeta1 + 1) f
    z1 = closed_form("zeta1", 2, 1, manifold=torus)
    f = lambda x: np.exp(1j * x[..., 0])
    got = apply_to_function_expansion(z1, f, xi, 2)
    assert np.allclose(got, (xi.zeta[:, 0] + 1) * f(xi.x), atol=1e-8)


def test_apply_to_function_spectral(torus):
    """e^{-i phi} Op(a)(f e^{i phi}) at x, computed on the Fourier mesh."""
    a = closed_form("zeta1", 2, 1, manifold=torus)
    mesh = default_mesh(torus)
    A = quantize(a, mesh)
    k = np.array([3.0, -2.0])
    x = mesh.chart
    f = np.exp(1j * x[:, 0])
    got = A.apply(f * np.exp(1j * x @ k)) * np.exp(-1j * x @ k)
    xi = Covector(torus, x, np.broadcast_to(k, x.shape))
    want = apply_to_function_expansion(a, lambda y: np.exp(1j * y[..., 0]), xi, 2)
    assert np.max(np.abs(got - want)) < 1e-8


def test_ledger_flat_and_base_term(torus, sphere):
    a = closed_form("sin(x1)*zeta1^2 + zeta2", 2, 2, manifold=torus)
    b = closed_form("cos(x2)*zeta2^2 + x1", 2, 2, manifold=torus)
    xi = _cov(torus, [[1.0, 2.0]], [[3.0, -4.0]])
    led = term_ledger(a, b, xi)
    for t in led.terms:
        if t.summand.k >= 1:
            assert np.all(t.value == 0)
    base = [t for t in led.terms if t.drop == 0 and t.summand.k == 0]
    assert len(base) == 1
    assert np.allclose(base[0].value, a.evaluate(xi.x, xi.zeta) * b.evaluate(xi.x, xi.zeta))
    # sphere: drop-1 k=1 summands with |beta|=2 are phi_{0 beta} = 0
    a2 = closed_form("zeta1^2 + x2*zeta2", 2, 2, manifold=sphere)
    b2 = closed_form("zeta2^2 + sin(x1)", 2, 2, manifold=sphere)
    xs = _cov(sphere, [[1.0, 0.4]], [[2.0, 1.0]])
    led2 = term_ledger(a2, b2, xs)
    hits = [t for t in led2.terms if t.drop == 1 and t.summand.k == 1 and sum(t.summand.beta) == 2]
    assert hits and all(np.abs(t.value).max() < 1e-12 for t in hits)
    # total reproduces the general-mode product
    gen = sharp_product(a2, b2, ExpansionConfig(mode="general"))
    assert np.allclose(led2.total(), gen.evaluate(xs.x, xs.zeta), atol=1e-10)


def test_ledger_summand_orders(sphere):
    a = closed_form("zeta1^2 + x2*zeta2", 2, 2, manifold=sphere)
    b = closed_form("zeta2^2 + sin(x1)", 2, 2, manifold=sphere)
    rs = np.geomspace(10, 1e3, 5)
    u = np.array([0.6, 0.8])
    xi = Covector(sphere, np.tile([1.0, 0.4], (5, 1)), rs[:, None] * u)
    led = term_ledger(a, b, xi)
    for t in led.terms:
        v = np.abs(t.value[..., 0, 0])
        assert np.all(v <= 10 * (1 + rs) ** t.predicted_order + 1e-9), t.summand
