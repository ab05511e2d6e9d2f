"""Closed-form expression grammar for symbols and metrics.

The grammar (EBNF)::

    expr    = term , { ("+" | "-") , term } ;
    term    = unary , { ("*" | "/") , unary } ;
    unary   = ("-" | "+") , unary | power ;
    power   = atom , [ ("^" | "**") , unary ] ;        (* right associative *)
    atom    = number | name | func , "(" , expr , ")" | "(" , expr , ")" ;
    func    = "exp" | "sin" | "cos" | "sqrt" ;
    name    = "x" , digit , {digit} | "zeta" , digit , {digit}
            | "pi" | "e" | "i" ;
    number  = digit , {digit} , [ "." , {digit} ] , [ ("e" | "E") , ["+" | "-"] , digit , {digit} ] ;

``x1..xd`` are chart coordinates, ``zeta1..zetad`` covector components in
the orthonormal frame, ``i`` is the imaginary unit.  Decimal literals are
read as exact rationals so that symbolic cancellations stay exact.
"""
from __future__ import annotations

import re

import sympy as sp

from .errors import ParseError

__all__ = ["parse", "variables", "FUNCTIONS"]

FUNCTIONS = {"exp": sp.exp, "sin": sp.sin, "cos": sp.cos, "sqrt": sp.sqrt}
CONSTANTS = {"pi": sp.pi, "e": sp.E, "i": sp.I}

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^()])
""", re.VERBOSE)


def variables(dim):
    """The sympy symbols (x1..xd, zeta1..zetad) used by the parser."""
    xs = sp.symbols(" ".join(f"x{k}" for k in range(1, dim + 1)), real=True, seq=True)
    zs = sp.symbols(" ".join(f"zeta{k}" for k in range(1, dim + 1)), real=True, seq=True)
    return tuple(xs), tuple(zs)


def _tokenize(text):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", column=pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(kind), pos + 1))
        pos = m.end()
    out.append(("end", "", pos + 1))
    return out


class _Parser:
    def __init__(self, text, dim):
        self.tokens = _tokenize(text)
        self.i = 0
        self.dim = dim
        xs, zs = variables(dim) if dim else ((), ())
        self.names = {str(s): s for s in xs + zs}

    def peek(self):
        return self.tokens[self.i]

    def take(self, value=None):
        tok = self.tokens[self.i]
        if value is not None and tok[1] != value:
            raise ParseError(f"expected {value!r} but found {tok[1] or 'end of input'!r}",
                             column=tok[2])
        self.i += 1
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected token {tok[1]!r}", column=tok[2])
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            node = node + rhs if op == "+" else node - rhs
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            node = node * rhs if op == "*" else node / rhs
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return -self.unary()
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            return base ** self.unary()
        return base

    def atom(self):
        kind, value, col = self.take()
        if kind == "num":
            return sp.Rational(value) if any(c in value for c in ".eE") else sp.Integer(value)
        if kind == "name":
            if value in FUNCTIONS:
                self.take("(")
                arg = self.expr()
                self.take(")")
                return FUNCTIONS[value](arg)
            if value in CONSTANTS:
                return CONSTANTS[value]
            if value in self.names:
                return self.names[value]
            m = re.fullmatch(r"(x|zeta)(\d+)", value)
            if m:
                raise ParseError(f"variable {value!r} out of range for dimension {self.dim}",
                                 column=col)
            raise ParseError(f"unknown name {value!r}", column=col)
        if value == "(":
            node = self.expr()
            self.take(")")
            return node
        raise ParseError(f"unexpected token {value or 'end of input'!r}", column=col)


def parse(text, dim):
    """Parse ``text`` into a sympy expression over x1..xd, zeta1..zetad."""
    if not isinstance(text, str):
        raise ParseError("expression must be a string")
    return _Parser(text, dim).parse()
