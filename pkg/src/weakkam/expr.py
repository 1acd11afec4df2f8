"""
Tiny arithmetic expression language for periodic potentials.

Grammar (``^`` is right associative and binds tighter than unary minus)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('+' | '-') unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | 'pi' | 'x' | 'y' | FUNC '(' expr ')' | '(' expr ')'
    FUNC    := 'sin' | 'cos' | 'exp' | 'abs'

Compiled trees are nested tuples so they hash and compare by value.
Evaluation is vectorised over numpy arrays and always happens on the
fractional parts of the coordinates.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs, "log": np.log}
USER_FUNCTIONS = ("sin", "cos", "exp", "abs")  # log only appears in derivatives of a^b
VARIABLES = ("x", "y")

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))"
)


class ExpressionError(ValueError):
    """Raised for malformed expressions; ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise ExpressionError(f"unexpected character {source[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, variables: tuple[str, ...]):
        self.tokens = _tokenize(source)
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text):
        kind, value, pos = self.take()
        if value != text:
            found = "end of input" if kind == "end" else repr(value)
            raise ExpressionError(f"expected {text!r}, found {found}", pos)

    def parse(self):
        tree = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected token {value!r}", pos)
        return tree

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = (op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = (op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            operand = self.unary()
            return operand if op == "+" else ("neg", operand)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return ("^", base, self.unary())
        return base

    def atom(self):
        kind, value, pos = self.take()
        if kind == "num":
            return ("const", float(value))
        if kind == "name":
            if value == "pi":
                return ("const", float(np.pi))
            if value in self.variables:
                return ("var", value)
            if value in USER_FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return ("call", value, arg)
            raise ExpressionError(f"unknown identifier {value!r}", pos)
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(value)
        raise ExpressionError(f"unexpected {found}", pos)


def _evaluate(node, env):
    tag = node[0]
    if tag == "const":
        return node[1]
    if tag == "var":
        return env[node[1]]
    if tag == "neg":
        return -_evaluate(node[1], env)
    if tag == "call":
        return FUNCTIONS[node[1]](_evaluate(node[2], env))
    a = _evaluate(node[1], env)
    b = _evaluate(node[2], env)
    if tag == "+":
        return a + b
    if tag == "-":
        return a - b
    if tag == "*":
        return a * b
    if tag == "/":
        return a / b
    return np.power(a, b)


def _const(value):
    return ("const", float(value))


def _is_const(node, value=None):
    return node[0] == "const" and (value is None or node[1] == value)


def _add(a, b):
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return ("+", a, b)


def _mul(a, b):
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return ("*", a, b)


def _differentiate(node, var):
    tag = node[0]
    if tag == "const":
        return _const(0.0)
    if tag == "var":
        return _const(1.0 if node[1] == var else 0.0)
    if tag == "neg":
        d = _differentiate(node[1], var)
        return d if _is_const(d, 0.0) else ("neg", d)
    if tag == "call":
        name, arg = node[1], node[2]
        darg = _differentiate(arg, var)
        if _is_const(darg, 0.0):
            return _const(0.0)
        outer = {
            "sin": ("call", "cos", arg),
            "cos": ("neg", ("call", "sin", arg)),
            "exp": node,
            # sign(a) written as a/|a|; the kink itself is measure zero
            "abs": ("/", arg, ("call", "abs", arg)),
        }[name]
        return _mul(outer, darg)
    a, b = node[1], node[2]
    da, db = _differentiate(a, var), _differentiate(b, var)
    if tag == "+":
        return _add(da, db)
    if tag == "-":
        if _is_const(db, 0.0):
            return da
        return ("-", da, db)
    if tag == "*":
        return _add(_mul(da, b), _mul(a, db))
    if tag == "/":
        num = ("-", _mul(da, b), _mul(a, db))
        return ("/", num, ("^", b, _const(2.0)))
    # power
    if _is_const(db, 0.0):
        if not _is_const(b):
            return _mul(_mul(b, ("^", a, ("-", b, _const(1.0)))), da)
        return _mul(_mul(b, ("^", a, _const(b[1] - 1.0))), da)
    log_a = ("call", "log", a)
    return _mul(node, _add(_mul(db, log_a), ("/", _mul(b, da), a)))


@dataclass(frozen=True)
class PotentialExpr:
    """A compiled periodic potential ``V(x)`` or ``V(x, y)``."""

    source: str
    dim: int
    tree: tuple = field(repr=False, compare=False)

    def __call__(self, x) -> np.ndarray:
        """Evaluate at points ``x`` of shape ``(..., dim)`` (or scalars when dim == 1)."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        frac = np.mod(x, 1.0)
        env = {name: frac[..., k] for k, name in enumerate(VARIABLES[: self.dim])}
        out = _evaluate(self.tree, env)
        return np.broadcast_to(np.asarray(out, dtype=float), frac.shape[:-1]).copy()

    def gradient(self, x) -> np.ndarray:
        """Gradient with shape ``(..., dim)`` from the symbolic derivative."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        frac = np.mod(x, 1.0)
        env = {name: frac[..., k] for k, name in enumerate(VARIABLES[: self.dim])}
        parts = []
        for name in VARIABLES[: self.dim]:
            d = _evaluate(_differentiate(self.tree, name), env)
            parts.append(np.broadcast_to(np.asarray(d, dtype=float), frac.shape[:-1]))
        return np.stack(parts, axis=-1)


def parse_potential(source: str, dim: int = 1, probe: int = 64) -> PotentialExpr:
    """Parse ``source`` and check it is finite on a ``probe``-point grid per axis."""
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if not isinstance(source, str) or not source.strip():
        raise ExpressionError("empty expression", 0)
    tree = _Parser(source, VARIABLES[:dim]).parse()
    expr = PotentialExpr(source, dim, tree)
    axes = [np.arange(probe) / probe] * dim
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    with np.errstate(all="ignore"):
        values = expr(pts)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise ExpressionError(f"non-finite value at probe point {tuple(pts[tuple(bad)])}")
    return expr
