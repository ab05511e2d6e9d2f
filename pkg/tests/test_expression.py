import pytest
import sympy as sp

from normalsym.errors import ParseError
from normalsym.expression import parse, variables


def test_variables_and_constants():
    xs, zs = variables(2)
    assert [str(s) for s in xs + zs] == ["x1", "x2", "zeta1", "zeta2"]
    e = parse("x1*zeta1 - i", 2)
    assert sp.simplify(e - (xs[0] * zs[0] - sp.I)) == 0
    assert parse("2*pi", 1) == 2 * sp.pi
    assert parse("e", 1) == sp.E


def test_grammar_operators_and_functions():
    xs, zs = variables(2)
    e = parse("(1+zeta1^2+zeta2^2)^(-1) + sqrt(x1)*exp(-x2) - sin(x1)/cos(x2)", 2)
    want = (1 + zs[0] ** 2 + zs[1] ** 2) ** -1 + sp.sqrt(xs[0]) * sp.exp(-xs[1]) \
        - sp.sin(xs[0]) / sp.cos(xs[1])
    assert sp.simplify(e - want) == 0
    assert float(parse("2.5e-1*x1", 1) / variables(1)[0][0]) == 0.25
    assert parse("-x1^2", 1) == -variables(1)[0][0] ** 2


@pytest.mark.parametrize("bad", ["x1 +", "foo(x1)", "zeta3", "(x1", "x1 ** 2 )", "3 $ 4"])
def test_parse_errors(bad):
    with pytest.raises(ParseError):
        parse(bad, 2)
