"""Scalar formulas over one variable: parsing, evaluation, exact derivatives.

The grammar covers real constants, the variable ``x``, the operators
``+ - * / ^``, and the functions ``exp, log, sqrt, abs, min, max``
(plus ``sign``, which the differentiator emits for ``abs``/``min``/``max``
and the parser therefore also accepts).  Every expression can be
differentiated symbolically; the class of representable functions is
closed under differentiation.

``PiecewiseFunction`` glues expressions over adjacent intervals and gives
one-sided values and derivatives at the interior breakpoints.
"""

from __future__ import annotations

import re

import numpy as np


class FormulaError(ValueError):
    """Malformed or unparseable formula text."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class DomainError(ValueError):
    """Evaluation point outside the declared domain."""


# ---------------------------------------------------------------------------
# AST nodes

class Expression:
    """Base node. Immutable; evaluation accepts floats or numpy arrays."""

    prec = 9

    def ev(self, x):
        raise NotImplementedError

    def d(self) -> "Expression":
        raise NotImplementedError

    def __str__(self):
        raise NotImplementedError

    def __repr__(self):
        return f"parse({str(self)!r})"

    def _wrap(self, child, tight=False):
        if child.prec < self.prec or (tight and child.prec == self.prec):
            return f"({child})"
        return str(child)


class Num(Expression):
    prec = 9

    def __init__(self, v):
        self.v = float(v)
        if self.v < 0:
            self.prec = 2  # needs parens inside products/powers

    def ev(self, x):
        return self.v

    def d(self):
        return Num(0.0)

    def __str__(self):
        return repr(self.v)


class Var(Expression):
    prec = 9

    def ev(self, x):
        return x

    def d(self):
        return Num(1.0)

    def __str__(self):
        return "x"


class Neg(Expression):
    prec = 2

    def __init__(self, a):
        self.a = a

    def ev(self, x):
        return -self.a.ev(x)

    def d(self):
        return neg(self.a.d())

    def __str__(self):
        return "-" + self._wrap(self.a, tight=True)


class Add(Expression):
    prec = 1

    def __init__(self, a, b):
        self.a, self.b = a, b

    def ev(self, x):
        return self.a.ev(x) + self.b.ev(x)

    def d(self):
        return add(self.a.d(), self.b.d())

    def __str__(self):
        return f"{self._wrap(self.a)} + {self._wrap(self.b)}"


class Sub(Expression):
    prec = 1

    def __init__(self, a, b):
        self.a, self.b = a, b

    def ev(self, x):
        return self.a.ev(x) - self.b.ev(x)

    def d(self):
        return sub(self.a.d(), self.b.d())

    def __str__(self):
        return f"{self._wrap(self.a)} - {self._wrap(self.b, tight=True)}"


class Mul(Expression):
    prec = 2

    def __init__(self, a, b):
        self.a, self.b = a, b

    def ev(self, x):
        return self.a.ev(x) * self.b.ev(x)

    def d(self):
        return add(mul(self.a.d(), self.b), mul(self.a, self.b.d()))

    def __str__(self):
        return f"{self._wrap(self.a)}*{self._wrap(self.b)}"


class Div(Expression):
    prec = 2

    def __init__(self, a, b):
        self.a, self.b = a, b

    def ev(self, x):
        return self.a.ev(x) / self.b.ev(x)

    def d(self):
        num = sub(mul(self.a.d(), self.b), mul(self.a, self.b.d()))
        return div(num, pow_(self.b, Num(2.0)))

    def __str__(self):
        return f"{self._wrap(self.a)}/{self._wrap(self.b, tight=True)}"


class Pow(Expression):
    prec = 3

    def __init__(self, a, b):
        self.a, self.b = a, b

    def ev(self, x):
        return np.power(self.a.ev(x), self.b.ev(x))

    def d(self):
        if isinstance(self.b, Num):
            n = self.b.v
            return mul(mul(Num(n), pow_(self.a, Num(n - 1.0))), self.a.d())
        # a^b = exp(b log a)
        inner = add(mul(self.b.d(), Fun1("log", self.a)),
                    div(mul(self.b, self.a.d()), self.a))
        return mul(self, inner)

    def __str__(self):
        return f"{self._wrap(self.a, tight=True)}^{self._wrap(self.b)}"


_UNARY = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": lambda v: np.where(np.asarray(v) >= 0, 1.0, -1.0),
}

_BINARY = {"min": np.minimum, "max": np.maximum}


class Fun1(Expression):
    prec = 9

    def __init__(self, name, a):
        self.name, self.a = name, a

    def ev(self, x):
        return _UNARY[self.name](self.a.ev(x))

    def d(self):
        u, du = self.a, self.a.d()
        if self.name == "exp":
            return mul(self, du)
        if self.name == "log":
            return div(du, u)
        if self.name == "sqrt":
            return div(du, mul(Num(2.0), self))
        if self.name == "abs":
            return mul(Fun1("sign", u), du)
        if self.name == "sign":
            return Num(0.0)  # zero a.e.; the step at 0 has no classical derivative
        raise FormulaError(f"cannot differentiate {self.name}")

    def __str__(self):
        return f"{self.name}({self.a})"


class Fun2(Expression):
    prec = 9

    def __init__(self, name, a, b):
        self.name, self.a, self.b = name, a, b

    def ev(self, x):
        return _BINARY[self.name](self.a.ev(x), self.b.ev(x))

    def d(self):
        # 0.5(a'+b') -/+ 0.5 sign(a-b)(a'-b') selects the active branch;
        # at ties sign(0)=+1 picks a right-continuous representative.
        da, db = self.a.d(), self.b.d()
        mean = mul(Num(0.5), add(da, db))
        swing = mul(mul(Num(0.5), Fun1("sign", sub(self.a, self.b))), sub(da, db))
        return sub(mean, swing) if self.name == "min" else add(mean, swing)

    def __str__(self):
        return f"{self.name}({self.a}, {self.b})"


# ---------------------------------------------------------------------------
# Folding constructors (constant folding only, no deeper rewriting)

def _is(e, v):
    return isinstance(e, Num) and e.v == v


def add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.v + b.v)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Add(a, b)


def sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.v - b.v)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.v * b.v)
    if _is(a, 0.0) or _is(b, 0.0):
        return Num(0.0)
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    return Mul(a, b)


def div(a, b):
    if isinstance(a, Num) and isinstance(b, Num) and b.v != 0.0:
        return Num(a.v / b.v)
    if _is(a, 0.0):
        return Num(0.0)
    if _is(b, 1.0):
        return a
    return Div(a, b)


def neg(a):
    if isinstance(a, Num):
        return Num(-a.v)
    if isinstance(a, Neg):
        return a.a
    return Neg(a)


def pow_(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(np.power(a.v, b.v))
    if _is(b, 1.0):
        return a
    if _is(b, 0.0):
        return Num(1.0)
    return Pow(a, b)


# ---------------------------------------------------------------------------
# Public operations

def evaluate(e: Expression, x):
    """Evaluate at a float or an ndarray of floats."""
    xa = np.asarray(x, dtype=float)
    r = e.ev(xa)
    if xa.ndim == 0:
        return float(r)
    r = np.asarray(r, dtype=float)
    if r.shape != xa.shape:
        r = np.broadcast_to(r, xa.shape).copy()
    return r


def differentiate(e: Expression) -> Expression:
    """Exact symbolic derivative with respect to x."""
    return e.d()


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            # skip trailing whitespace gracefully
            if text[pos:].strip() == "":
                break
            raise FormulaError(f"unexpected character {text[pos]!r}", pos)
        if m.group("num") is not None:
            out.append(("num", float(m.group("num")), m.start("num")))
        elif m.group("name") is not None:
            out.append(("name", m.group("name"), m.start("name")))
        else:
            out.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    out.append(("end", None, len(text)))
    return out


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect_op(self, op):
        kind, val, pos = self.take()
        if kind != "op" or val != op:
            raise FormulaError(f"expected {op!r}", pos)

    def expr(self):
        e = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                rhs = self.term()
                e = Add(e, rhs) if val == "+" else Sub(e, rhs)
            else:
                return e

    def term(self):
        e = self.factor()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.take()
                rhs = self.factor()
                e = Mul(e, rhs) if val == "*" else Div(e, rhs)
            else:
                return e

    def factor(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.factor())
        base = self.base()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            return Pow(base, self.factor())
        return base

    def base(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Num(val)
        if kind == "name":
            if val == "x":
                return Var()
            if val in _UNARY:
                self.expect_op("(")
                a = self.expr()
                self.expect_op(")")
                return Fun1(val, a)
            if val in _BINARY:
                self.expect_op("(")
                a = self.expr()
                self.expect_op(",")
                b = self.expr()
                self.expect_op(")")
                return Fun2(val, a, b)
            raise FormulaError(f"unknown identifier {val!r}", pos)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        raise FormulaError("expected a number, 'x', a function, or '('", pos)


def parse(text: str) -> Expression:
    """Parse formula text into an expression tree.

    Raises FormulaError with the offending position on malformed input or
    unknown identifiers.
    """
    p = _Parser(text)
    e = p.expr()
    kind, _, pos = p.peek()
    if kind != "end":
        raise FormulaError("unexpected trailing input", pos)
    return e


# ---------------------------------------------------------------------------
# Piecewise functions

class PiecewiseFunction:
    """A scalar function assembled from expressions over adjacent intervals.

    Pieces are given as (lo, hi, expression) with lo < hi, sorted, and
    contiguous: each piece's upper endpoint is the next piece's lower
    endpoint, so the pieces partition the overall interval.  Evaluation is
    right-continuous at the interior knots (the knot belongs to the piece
    on its right); one-sided values and derivatives at knots come from
    ``one_sided``.
    """

    def __init__(self, pieces):
        pieces = [(float(lo), float(hi), e) for lo, hi, e in pieces]
        if not pieces:
            raise ValueError("at least one piece required")
        for lo, hi, _ in pieces:
            if not lo < hi:
                raise ValueError(f"empty piece interval [{lo}, {hi}]")
        for (_, hi, _), (lo2, _, _) in zip(pieces, pieces[1:]):
            if hi != lo2:
                raise ValueError(
                    f"pieces must be contiguous: gap or overlap at {hi} vs {lo2}")
        self.pieces = [(lo, hi, e, e.d(), e.d().d()) for lo, hi, e in pieces]
        self.lower = pieces[0][0]
        self.upper = pieces[-1][1]
        self.breakpoints = [hi for _, hi, _ in pieces[:-1]]

    @classmethod
    def from_expression(cls, e, lower, upper):
        return cls([(lower, upper, e)])

    @classmethod
    def from_formula(cls, text, lower, upper):
        return cls([(lower, upper, parse(text))])

    @property
    def n_pieces(self):
        return len(self.pieces)

    def _node(self, i, order):
        return self.pieces[i][2 + order]

    def _piece_index(self, x):
        for i, (lo, hi, *_rest) in enumerate(self.pieces):
            if lo <= x < hi or (i == len(self.pieces) - 1 and x <= hi):
                return i
        raise DomainError(f"{x} outside domain [{self.lower}, {self.upper}]")

    def _eval_order(self, x, order):
        xa = np.asarray(x, dtype=float)
        scalar = xa.ndim == 0
        xa = np.atleast_1d(xa)
        out = np.full(xa.shape, np.nan)
        seen = np.zeros(xa.shape, dtype=bool)
        for i, (lo, hi, *_rest) in enumerate(self.pieces):
            if i == len(self.pieces) - 1:
                m = (xa >= lo) & (xa <= hi) & ~seen
            else:
                m = (xa >= lo) & (xa < hi) & ~seen
            if m.any():
                out[m] = evaluate(self._node(i, order), xa[m])
                seen |= m
        if not seen.all():
            bad = xa[~seen][0]
            raise DomainError(f"{bad} outside domain [{self.lower}, {self.upper}]")
        return float(out[0]) if scalar else out

    def value(self, x):
        return self._eval_order(x, 0)

    def deriv1(self, x):
        return self._eval_order(x, 1)

    def deriv2(self, x):
        return self._eval_order(x, 2)

    def piece_eval(self, i, x, order=0):
        """Evaluate piece i's expression (or derivative) anywhere; used for
        one-sided limits and for root finding within a smooth piece."""
        return evaluate(self._node(i, order), x)

    def one_sided(self, x0, side, order=0):
        """Limit of the value (order 0) or derivative (order 1, 2) at x0
        taken from the given side ('left' or 'right')."""
        x0 = float(x0)
        if not (self.lower <= x0 <= self.upper):
            raise DomainError(f"{x0} outside domain [{self.lower}, {self.upper}]")
        if side not in ("left", "right"):
            raise ValueError("side must be 'left' or 'right'")
        if side == "left":
            if x0 == self.lower:
                raise DomainError("no left limit at the lower endpoint")
            for i, (lo, hi, *_rest) in enumerate(self.pieces):
                if lo < x0 <= hi:
                    return self.piece_eval(i, x0, order)
        else:
            if x0 == self.upper:
                raise DomainError("no right limit at the upper endpoint")
            for i, (lo, hi, *_rest) in enumerate(self.pieces):
                if lo <= x0 < hi:
                    return self.piece_eval(i, x0, order)
        raise DomainError(f"{x0} outside domain")  # pragma: no cover

    def is_smooth_at(self, x0, tol=1e-12):
        """True when x0 is not a knot, or the knot's one-sided first
        derivatives agree within tol (relative)."""
        if not any(abs(x0 - q) <= tol * (1.0 + abs(q)) for q in self.breakpoints):
            return True
        gl = self.one_sided(x0, "left", 1)
        gr = self.one_sided(x0, "right", 1)
        return abs(gl - gr) <= tol * (1.0 + max(abs(gl), abs(gr)))

    def has_knot_at(self, x0, tol=1e-9):
        return any(abs(x0 - q) <= tol * (1.0 + abs(q)) for q in self.breakpoints)

    def __str__(self):
        parts = [f"[{lo}, {hi}]: {e}" for lo, hi, e, _d1, _d2 in self.pieces]
        return "; ".join(parts)
