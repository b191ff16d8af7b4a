"""Scalar expression language for potentials, metric entries and initial data.

Grammar (conventional precedence, ``^`` right-associative, no implicit
multiplication)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs")
CONSTANTS = {"pi": math.pi}
BINARY_OPS = ("+", "-", "*", "/", "^")


class ExpressionError(ValueError):
    """Base class for parse and evaluation failures."""


class ExprSyntaxError(ExpressionError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownIdentifierError(ExpressionError):
    def __init__(self, name: str, position: int):
        super().__init__(f"unknown identifier {name!r} at position {position}")
        self.name = name
        self.position = position


class ArityError(ExpressionError):
    def __init__(self, name: str, got: int, position: int):
        super().__init__(f"{name} takes exactly 1 argument, got {got} at position {position}")
        self.position = position


class DomainError(ExpressionError):
    def __init__(self, message: str, index: tuple[int, ...] | None):
        where = "" if index is None else f" at grid index {index}"
        super().__init__(message + where)
        self.index = index


@dataclass(frozen=True)
class Const:
    value: float  # always finite and >= 0; negation is a Unary node


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or one of FUNCTIONS
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


Node = Union[Const, Var, Unary, Binary]


@dataclass(frozen=True)
class Expression:
    ast: Node
    coords: tuple[str, ...]
    text: str = ""

    def variables(self) -> set[str]:
        return _variables(self.ast)

    def __str__(self) -> str:
        return to_text(self.ast)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            # report the offending character, not the whitespace before it
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, names: set[str]):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.names = names

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, value: str):
        kind, val, pos = self.tok
        if val != value:
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", pos)
        self.advance()

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.tok
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {val!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok[1] in ("+", "-") and self.tok[0] == "op":
            op = self.advance()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok[1] in ("*", "/") and self.tok[0] == "op":
            op = self.advance()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok[0] == "op" and self.tok[1] == "-":
            self.advance()
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.tok[0] == "op" and self.tok[1] == "^":
            self.advance()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, val, pos = self.tok
        if kind == "num":
            self.advance()
            return Const(float(val))
        if kind == "name":
            self.advance()
            if val in FUNCTIONS:
                if self.tok[1] != "(":
                    raise ArityError(val, 0, pos)
                self.advance()
                if self.tok[1] == ")":
                    raise ArityError(val, 0, pos)
                arg = self.expr()
                if self.tok[1] == ",":
                    nargs = 1
                    while self.tok[1] == ",":
                        self.advance()
                        self.expr()
                        nargs += 1
                    raise ArityError(val, nargs, pos)
                self.expect(")")
                return Unary(val, arg)
            if val in CONSTANTS:
                return Const(CONSTANTS[val])
            if val not in self.names:
                raise UnknownIdentifierError(val, pos)
            return Var(val)
        if kind == "op" and val == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {found}", pos)


def parse_expression(text: str, coords: list[str] | tuple[str, ...]) -> Expression:
    """Parse ``text`` into an :class:`Expression` over ``coords`` and ``t``.

    Raises :class:`ExprSyntaxError`, :class:`UnknownIdentifierError` or
    :class:`ArityError`; positions are 0-based character offsets.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    names = set(coords) | {"t"}
    ast = _Parser(text, names).parse()
    return Expression(ast, tuple(coords), text)


def to_text(node: Node) -> str:
    """Fully parenthesised text form; ``parse(to_text(n))`` rebuilds ``n``."""
    if isinstance(node, Const):
        if node.value == math.pi:
            return "pi"
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{to_text(node.arg)})"
        return f"{node.op}({to_text(node.arg)})"
    return f"({to_text(node.left)} {node.op} {to_text(node.right)})"


def _variables(node: Node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Unary):
        return _variables(node.arg)
    if isinstance(node, Binary):
        return _variables(node.left) | _variables(node.right)
    return set()


def _first_bad(mask: np.ndarray) -> tuple[int, ...] | None:
    if np.ndim(mask) == 0:
        return None
    idx = np.argwhere(mask)
    return tuple(int(i) for i in idx[0])


def _eval(node: Node, env: Mapping[str, np.ndarray]):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Unary):
        x = _eval(node.arg, env)
        if node.op == "neg":
            return -x
        if node.op == "log":
            bad = np.asarray(x) <= 0
            if np.any(bad):
                raise DomainError("log of non-positive value", _first_bad(bad))
            return np.log(x)
        if node.op == "sqrt":
            bad = np.asarray(x) < 0
            if np.any(bad):
                raise DomainError("sqrt of negative value", _first_bad(bad))
            return np.sqrt(x)
        return getattr(np, node.op)(x)
    a = _eval(node.left, env)
    b = _eval(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        bad = np.asarray(b) == 0
        if np.any(bad):
            raise DomainError("division by zero", _first_bad(bad))
        return a / b
    return np.power(a, b)


def evaluate(expr: Expression, env: Mapping[str, np.ndarray | float]) -> np.ndarray:
    """Evaluate ``expr`` with variables bound from ``env`` (arrays broadcast)."""
    missing = expr.variables() - set(env)
    if missing:
        raise UnknownIdentifierError(sorted(missing)[0], 0)
    shape = np.broadcast_shapes(*(np.shape(v) for v in env.values())) if env else ()
    with np.errstate(all="ignore"):
        out = np.broadcast_to(np.asarray(_eval(expr.ast, env), dtype=float), shape)
    bad = ~np.isfinite(out)
    if np.any(bad):
        raise DomainError("non-finite value", _first_bad(bad))
    return np.array(out, dtype=float)


def evaluate_on_grid(expr: Expression, grid, time: float = 0.0) -> np.ndarray:
    """Evaluate ``expr`` at every node of ``grid``; returns an array of ``grid.shape``."""
    if len(expr.coords) != grid.ndim:
        raise ExpressionError(
            f"expression declares {len(expr.coords)} coordinates, grid has {grid.ndim} axes"
        )
    mesh = grid.mesh()
    env: dict[str, np.ndarray | float] = dict(zip(expr.coords, mesh))
    env["t"] = float(time)
    out = evaluate(expr, env)
    return np.broadcast_to(out, grid.shape).copy()
