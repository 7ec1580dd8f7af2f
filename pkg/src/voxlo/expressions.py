"""Tiny arithmetic expression language for pipeline parameters.

Grammar: numeric literals, variable names, ``+ - * /``, unary minus,
parentheses, and the functions ``min``, ``max``, ``abs``, ``clamp(x, lo, hi)``,
``floor``, ``ceil``.  Expressions are parsed once and re-evaluated against a
variable environment every time they are used, which is what makes pipeline
parameters dynamic.
"""

from __future__ import annotations

import math
import re
from typing import Mapping, Union


class ExpressionError(ValueError):
    """Parse or evaluation failure of a parameter expression."""


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/(),]))"
)

_FUNCTIONS = {
    "min": (2, None),
    "max": (2, None),
    "abs": (1, 1),
    "clamp": (3, 3),
    "floor": (1, 1),
    "ceil": (1, 1),
}


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            rest = text[pos:].strip()
            if not rest:
                break
            raise ExpressionError(f"unexpected character {rest[0]!r} in {text!r}")
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num"))))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name")))
        else:
            tokens.append(("op", m.group("op")))
        pos = m.end()
    tokens.append(("end", None))
    return tokens


class _Parser:
    """Recursive descent over:  expr := term (('+'|'-') term)*
    term := factor (('*'|'/') factor)* ; factor := '-' factor | atom."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, value = self.next()
        if kind != "op" or value != op:
            raise ExpressionError(f"expected {op!r} in {self.text!r}")

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise ExpressionError(f"trailing input in {self.text!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            op = self.next()[1]
            node = (op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            op = self.next()[1]
            node = (op, node, self.factor())
        return node

    def factor(self):
        if self.peek() == ("op", "-"):
            self.next()
            return ("neg", self.factor())
        return self.atom()

    def atom(self):
        kind, value = self.next()
        if kind == "num":
            return ("num", value)
        if kind == "name":
            if self.peek() == ("op", "("):
                return self.call(value)
            return ("var", value)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExpressionError(f"unexpected token in {self.text!r}")

    def call(self, name: str):
        if name not in _FUNCTIONS:
            raise ExpressionError(f"unknown function {name!r} in {self.text!r}")
        self.expect_op("(")
        args = [self.expr()]
        while self.peek() == ("op", ","):
            self.next()
            args.append(self.expr())
        self.expect_op(")")
        lo, hi = _FUNCTIONS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise ExpressionError(f"{name} takes {lo}{'' if hi == lo else '+'} arguments")
        return ("call", name, args)


def _eval(node, env: Mapping[str, float]) -> float:
    op = node[0]
    if op == "num":
        return node[1]
    if op == "var":
        name = node[1]
        try:
            return float(env[name])
        except KeyError:
            raise ExpressionError(f"unbound variable {name}") from None
    if op == "neg":
        return -_eval(node[1], env)
    if op in "+-*/":
        a = _eval(node[1], env)
        b = _eval(node[2], env)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if b == 0.0:
            raise ExpressionError(f"division by zero evaluating {op!r}")
        return a / b
    if op == "call":
        name, args = node[1], [_eval(a, env) for a in node[2]]
        if name == "min":
            return min(args)
        if name == "max":
            return max(args)
        if name == "abs":
            return abs(args[0])
        if name == "clamp":
            x, lo, hi = args
            return min(max(x, lo), hi)
        if name == "floor":
            return float(math.floor(args[0]))
        if name == "ceil":
            return float(math.ceil(args[0]))
    raise ExpressionError(f"invalid AST node {node!r}")


def _free_variables(node, out):
    op = node[0]
    if op == "var":
        out.add(node[1])
    elif op == "neg":
        _free_variables(node[1], out)
    elif op in "+-*/":
        _free_variables(node[1], out)
        _free_variables(node[2], out)
    elif op == "call":
        for a in node[2]:
            _free_variables(a, out)


class Expression:
    """A parsed expression; evaluation is deterministic given an environment."""

    __slots__ = ("source", "_ast")

    def __init__(self, source: Union[str, int, float]):
        if isinstance(source, (int, float)):
            self.source = repr(float(source))
            self._ast = ("num", float(source))
        else:
            self.source = source
            self._ast = _Parser(source).parse()

    def evaluate(self, env: Mapping[str, float] | None = None) -> float:
        return _eval(self._ast, env or {})

    __call__ = evaluate

    @property
    def free_variables(self) -> frozenset:
        out: set = set()
        _free_variables(self._ast, out)
        return frozenset(out)

    def __repr__(self):
        return f"Expression({self.source!r})"


def as_expression(value) -> Expression:
    """Coerce a config value (number or expression string) to an Expression."""
    if isinstance(value, Expression):
        return value
    return Expression(value)


def eval_expression(e: Union[Expression, str, float], env: Mapping[str, float] | None = None) -> float:
    return as_expression(e).evaluate(env)
