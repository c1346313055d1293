"""Scalar expression trees in one variable ``x``.

A deliberately small language: numbers, ``x``, named parameters, the four
arithmetic operators, integer powers and ``exp``, ``cos``, ``sin``, ``tanh``.
Integer-only exponents keep the tree closed under differentiation.

>>> e = parse_expression("x^2 + 2*exp(-x^2) + a*cos(10*x)", {"a": 0.25})
>>> float(e(0.0))
2.25
>>> float(e.derivative(2)(0.0))
-27.0
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "ExpressionError",
    "ExpressionSyntaxError",
    "UnknownIdentifierError",
    "UnboundParameterError",
    "EvaluationError",
    "ScalarExpr",
    "parse_expression",
    "differentiate",
]

FUNCTIONS = ("exp", "cos", "sin", "tanh")


class ExpressionError(ValueError):
    """Base class for expression errors."""


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, message: str, position: int, source: str = ""):
        self.position = position
        self.source = source
        pointer = ""
        if source:
            pointer = f"\n  {source}\n  {' ' * position}^"
        super().__init__(f"{message} at position {position}{pointer}")


class UnknownIdentifierError(ExpressionError):
    def __init__(self, name: str, position: int):
        self.name = name
        self.position = position
        super().__init__(f"unknown identifier {name!r} at position {position}")


class UnboundParameterError(ExpressionError):
    def __init__(self, name: str, position: int):
        self.name = name
        self.position = position
        super().__init__(f"parameter {name!r} at position {position} has no bound value")


class EvaluationError(ArithmeticError):
    """Raised when an expression cannot be evaluated (division by zero)."""


# ---------------------------------------------------------------------------
# Nodes


class Node:
    __slots__ = ()

    def eval(self, x):
        raise NotImplementedError

    def diff(self) -> "Node":
        raise NotImplementedError

    def text(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True, slots=True)
class Const(Node):
    value: float

    def eval(self, x):
        return self.value

    def diff(self):
        return ZERO

    def text(self):
        return repr(float(self.value)) if self.value >= 0 else f"(-{-float(self.value)!r})"


@dataclass(frozen=True, slots=True)
class Var(Node):
    def eval(self, x):
        return x

    def diff(self):
        return ONE

    def text(self):
        return "x"


@dataclass(frozen=True, slots=True)
class Param(Node):
    name: str
    value: float

    def eval(self, x):
        return self.value

    def diff(self):
        return ZERO

    def text(self):
        return self.name


@dataclass(frozen=True, slots=True)
class Neg(Node):
    arg: Node

    def eval(self, x):
        return -self.arg.eval(x)

    def diff(self):
        return neg(self.arg.diff())

    def text(self):
        return f"(-{self.arg.text()})"


@dataclass(frozen=True, slots=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    def eval(self, x):
        a = self.left.eval(x)
        b = self.right.eval(x)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if np.any(np.asarray(b) == 0):
            raise EvaluationError(f"division by zero in {self.text()}")
        return a / b

    def diff(self):
        a, b = self.left, self.right
        da, db = a.diff(), b.diff()
        if self.op == "+":
            return add(da, db)
        if self.op == "-":
            return sub(da, db)
        if self.op == "*":
            return add(mul(da, b), mul(a, db))
        # (a/b)' = a'/b - a b' / b^2
        return sub(div(da, b), div(mul(a, db), power(b, 2)))

    def text(self):
        return f"({self.left.text()} {self.op} {self.right.text()})"


@dataclass(frozen=True, slots=True)
class Pow(Node):
    base: Node
    exponent: int

    def eval(self, x):
        b = self.base.eval(x)
        if self.exponent < 0:
            if np.any(np.asarray(b) == 0):
                raise EvaluationError(f"division by zero in {self.text()}")
            return 1.0 / b ** (-self.exponent)
        return b**self.exponent

    def diff(self):
        n = self.exponent
        return mul(mul(Const(float(n)), power(self.base, n - 1)), self.base.diff())

    def text(self):
        n = self.exponent
        return f"({self.base.text()}^{n})" if n >= 0 else f"({self.base.text()}^(-{-n}))"


_NP_FUNCS = {"exp": np.exp, "cos": np.cos, "sin": np.sin, "tanh": np.tanh}


@dataclass(frozen=True, slots=True)
class Call(Node):
    func: str
    arg: Node

    def eval(self, x):
        return _NP_FUNCS[self.func](self.arg.eval(x))

    def diff(self):
        u, du = self.arg, self.arg.diff()
        if self.func == "exp":
            outer = self
        elif self.func == "sin":
            outer = Call("cos", u)
        elif self.func == "cos":
            outer = neg(Call("sin", u))
        else:  # tanh' = 1 - tanh^2
            outer = sub(ONE, power(self, 2))
        return mul(outer, du)

    def text(self):
        return f"{self.func}({self.arg.text()})"


ZERO = Const(0.0)
ONE = Const(1.0)


# Constructors with light simplification; keeps derivative trees readable.


def _is_const(n: Node, value: float | None = None) -> bool:
    return isinstance(n, Const) and (value is None or n.value == value)


def neg(a: Node) -> Node:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    return BinOp("+", a, b)


def sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    return BinOp("-", a, b)


def mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(b):
        a, b = b, a
    return BinOp("*", a, b)


def div(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    return BinOp("/", a, b)


def power(a: Node, n: int) -> Node:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if _is_const(a) and n > 0:
        return Const(a.value**n)
    return Pow(a, n)


# ---------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            raise ExpressionSyntaxError(f"unexpected character {source[pos]!r}", pos, source)
        kind = m.lastgroup
        start = m.start(kind)
        text = m.group(kind)
        if kind == "op" and text == "**":
            text = "^"
        tokens.append((kind, text, start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str, params: Mapping[str, float]):
        self.source = source
        self.params = params
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, t, pos = self.take()
        if t != text:
            found = "end of input" if kind == "end" else repr(t)
            raise ExpressionSyntaxError(f"expected {text!r}, found {found}", pos, self.source)

    def parse(self) -> Node:
        node = self.expr()
        kind, t, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected token {t!r}", pos, self.source)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, t, _ = self.peek()
        if kind == "op" and t == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and t == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            base = Pow(base, self.integer())
        return base

    def integer(self) -> int:
        kind, t, pos = self.take()
        if kind == "op" and t == "(":
            n = self.integer()
            self.expect(")")
            return n
        sign = 1
        if kind == "op" and t in ("-", "+"):
            sign = -1 if t == "-" else 1
            kind, t, pos = self.take()
        if kind != "num" or not t.isdigit():
            raise ExpressionSyntaxError("exponent must be an integer literal", pos, self.source)
        return sign * int(t)

    def atom(self) -> Node:
        kind, t, pos = self.take()
        if kind == "num":
            return Const(float(t))
        if kind == "name":
            if t == "x":
                return Var()
            if t in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(t, arg)
            if self.peek()[1] == "(":
                raise UnknownIdentifierError(t, pos)
            if t not in self.params:
                raise UnboundParameterError(t, pos)
            return Param(t, float(self.params[t]))
        if kind == "op" and t == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(t)
        raise ExpressionSyntaxError(f"unexpected {found}", pos, self.source)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarExpr:
    """An evaluable, differentiable expression in ``x``.

    Calling the object evaluates it elementwise on scalars or numpy arrays.
    Division by zero raises :class:`EvaluationError`.
    """

    root: Node
    params: Mapping[str, float] = field(default_factory=dict)
    source: str | None = None

    def __call__(self, x):
        xa = np.asarray(x, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            out = self.root.eval(xa)
        return np.broadcast_to(np.asarray(out, dtype=float), xa.shape).copy() if np.ndim(out) < xa.ndim else np.asarray(out, dtype=float)

    def derivative(self, order: int = 1) -> "ScalarExpr":
        e = self
        for _ in range(order):
            e = differentiate(e)
        return e

    def to_text(self) -> str:
        """Fully parenthesized text that parses back to an equivalent tree."""
        return self.root.text()

    def __str__(self) -> str:
        return self.source if self.source is not None else self.to_text()


def parse_expression(source: str, params: Mapping[str, float] | None = None) -> ScalarExpr:
    """Parse ``source`` into a :class:`ScalarExpr`, binding named parameters."""
    params = dict(params or {})
    for name, value in params.items():
        if name == "x" or name in FUNCTIONS:
            raise ExpressionError(f"reserved name {name!r} cannot be a parameter")
        if not math.isfinite(float(value)):
            raise ExpressionError(f"parameter {name!r} must be finite")
    root = _Parser(source, params).parse()
    return ScalarExpr(root, params, source)


def differentiate(e: ScalarExpr) -> ScalarExpr:
    """Symbolic derivative with respect to ``x``."""
    return ScalarExpr(e.root.diff(), e.params)
