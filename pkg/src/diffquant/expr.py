"""A small arithmetic expression language for model coefficients.

Expressions are parsed once into an immutable tree and evaluated many times
on numpy arrays, so a single evaluation covers a whole grid or a whole batch
of simulated paths.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

so ``-x^2`` is ``-(x^2)`` and ``2^3^2`` is ``2^(3^2)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ExprSyntaxError, UnknownVariable

__all__ = [
    "Expr", "Num", "Var", "Unary", "Binary", "Call",
    "parse_expr", "as_expr", "FUNCTIONS",
]


def _checked_log(a):
    if np.any(np.asarray(a) <= 0):
        raise DomainError("log of a nonpositive value")
    return np.log(a)


def _checked_sqrt(a):
    if np.any(np.asarray(a) < 0):
        raise DomainError("sqrt of a negative value")
    return np.sqrt(a)


# name -> (arity, implementation)
FUNCTIONS = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "exp": (1, np.exp),
    "log": (1, _checked_log),
    "sqrt": (1, _checked_sqrt),
    "abs": (1, np.abs),
    "tanh": (1, np.tanh),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}


class Expr:
    """Base class of expression tree nodes.

    Nodes are immutable and hashable; evaluation is pure.
    """

    __slots__ = ()

    def evaluate(self, env: Mapping[str, object]):
        """Evaluate with variables bound in ``env`` (scalars or arrays).

        Arrays broadcast under numpy rules.  Raises :class:`DomainError` for
        log/sqrt outside their domain, division by zero, or an undefined power.
        """
        with np.errstate(all="ignore"):
            return self._eval(env)

    def _eval(self, env):
        raise NotImplementedError

    @property
    def variables(self) -> frozenset:
        raise NotImplementedError

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def __str__(self) -> str:
        return self.to_source()

    def to_source(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def _eval(self, env):
        return self.value

    @property
    def variables(self):
        return frozenset()

    def to_source(self):
        text = repr(float(self.value))
        return f"({text})" if self.value < 0 else text


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def _eval(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise UnknownVariable(self.name, tuple(env)) from None

    @property
    def variables(self):
        return frozenset((self.name,))

    def to_source(self):
        return self.name


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    operand: Expr

    def _eval(self, env):
        v = self.operand._eval(env)
        return -v if self.op == "-" else v

    @property
    def variables(self):
        return self.operand.variables

    def to_source(self):
        return f"({self.op}{self.operand.to_source()})"


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def _eval(self, env):
        a = self.left._eval(env)
        b = self.right._eval(env)
        op = self.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            if np.any(np.asarray(b) == 0):
                raise DomainError("division by zero")
            return np.true_divide(a, b)
        # '^'
        out = np.power(np.asarray(a, dtype=float), b)
        bad = ~np.isfinite(out) & np.isfinite(a) & np.isfinite(b)
        if np.any(bad):
            raise DomainError("power undefined (negative base with fractional "
                              "exponent, or zero to a negative power)")
        return out if np.ndim(out) else float(out)

    @property
    def variables(self):
        return self.left.variables | self.right.variables

    def to_source(self):
        return f"({self.left.to_source()} {self.op} {self.right.to_source()})"


@dataclass(frozen=True)
class Call(Expr):
    name: str
    args: tuple

    def _eval(self, env):
        _, fn = FUNCTIONS[self.name]
        return fn(*(a._eval(env) for a in self.args))

    @property
    def variables(self):
        out = frozenset()
        for a in self.args:
            out |= a.variables
        return out

    def to_source(self):
        inner = ", ".join(a.to_source() for a in self.args)
        return f"{self.name}({inner})"


_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(src: str):
    pos = 0
    tokens = []
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(src, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {src[bad]!r}", bad, src)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str, allowed: frozenset):
        self.src = src
        self.allowed = allowed
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", pos, self.src)

    def parse(self) -> Expr:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", pos, self.src)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text in ("-", "+"):
            self.take()
            return Unary(text, self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.take()
            return Binary("^", base, self.unary())
        return base

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {text!r}", pos, self.src)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[text][0]
                if len(args) != arity:
                    raise ExprSyntaxError(
                        f"{text} takes {arity} argument(s), got {len(args)}", pos, self.src)
                return Call(text, tuple(args))
            if text in FUNCTIONS:
                raise ExprSyntaxError(f"function {text!r} needs arguments", pos, self.src)
            if text not in self.allowed:
                raise UnknownVariable(text, sorted(self.allowed))
            return Var(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {found}", pos, self.src)


def parse_expr(src: str, allowed_vars: Iterable[str]) -> Expr:
    """Parse ``src`` into an expression tree over ``allowed_vars``.

    Raises:
        ExprSyntaxError: malformed input (carries the character position).
        UnknownVariable: an identifier outside ``allowed_vars``.
    """
    if not isinstance(src, str) or not src.strip():
        raise ExprSyntaxError("empty expression", 0, src or "")
    return _Parser(src, frozenset(allowed_vars)).parse()


def as_expr(value, allowed_vars: Sequence[str]) -> Expr:
    """Coerce a string, number, or existing :class:`Expr` to an expression."""
    if isinstance(value, Expr):
        extra = value.variables - set(allowed_vars)
        if extra:
            raise UnknownVariable(sorted(extra)[0], allowed_vars)
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return Num(float(value))
    return parse_expr(value, allowed_vars)
