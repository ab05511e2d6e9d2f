import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from normalsym import taylor


def test_docstring_example():
    S = taylor.space(2, 3)
    x, y = S.variables([0.5, 2.0])
    f = taylor.exp(x) * y ** 2
    assert float(f.derivative((1, 2))) == pytest.approx(2 * math.exp(0.5), rel=1e-14)


def test_multi_indices_graded():
    m = taylor.multi_indices(2, 2)
    assert m[0] == (0, 0)
    assert [sum(k) for k in m] == sorted(sum(k) for k in m)
    assert len(m) == 6
    assert taylor.multi_indices(3, 2, 2) == [(2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0),
                                             (0, 1, 1), (0, 0, 2)]


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_elementary_functions_against_closed_derivatives(a, b):
    S = taylor.space(2, 4)
    x, y = S.variables([a, b])
    f = taylor.sin(x) * taylor.cos(y)
    # d^3/dx^2 dy of sin x cos y = sin x sin y
    assert float(f.derivative((2, 1))) == pytest.approx(math.sin(a) * math.sin(b), abs=1e-12)
    g = taylor.exp(x + 2 * y)
    assert float(g.derivative((1, 3))) == pytest.approx(8 * math.exp(a + 2 * b), rel=1e-12)


def test_reciprocal_sqrt_power_log():
    S = taylor.space(1, 5)
    (x,) = S.variables([0.7])
    r = x.reciprocal()
    for k in range(6):
        assert float(r.derivative((k,))) == pytest.approx((-1) ** k * math.factorial(k) / 0.7 ** (k + 1))
    s = taylor.sqrt(x)
    assert float(s.derivative((2,))) == pytest.approx(-0.25 * 0.7 ** -1.5)
    p = taylor.power(x, 2.5)
    assert float(p.derivative((3,))) == pytest.approx(2.5 * 1.5 * 0.5 * 0.7 ** -0.5)
    lg = taylor.log(x)
    assert float(lg.derivative((4,))) == pytest.approx(-6 / 0.7 ** 4)


def test_batched_jets_and_atan():
    S = taylor.space(1, 3)
    vals = np.array([0.1, 0.5, 2.0])
    (x,) = S.variables([vals])
    t = taylor.atan(x)
    np.testing.assert_allclose(t.value, np.arctan(vals))
    np.testing.assert_allclose(t.derivative((1,)), 1 / (1 + vals ** 2))


def test_product_and_box_spaces():
    A = taylor.space(1, 2)
    B = taylor.space(1, 1)
    P = taylor.product(A, B)
    assert (2, 1) in P.index and (0, 0) in P.index
    box = taylor.box_space(2, 1, 2, 1)
    assert (1, 0, 1, 0) in box.index and (2, 0, 0, 0) not in box.index
    sp_ = taylor.split_space(2, 2, 2, 1)
    assert (1, 0, 1, 0) not in sp_.index


def test_embed_and_restrict_roundtrip():
    S = taylor.space(2, 3)
    x, y = S.variables([0.3, -0.2])
    f = taylor.exp(x) * (1 + y)
    T = taylor.space(3, 3)
    g = taylor.embed(f, T, [0, 2])
    back = taylor.restrict(g, S, [0, 2])
    np.testing.assert_allclose(back.c, f.c)
