"""Small arithmetic expression language for user-supplied fields.

Grammar (whitespace is insignificant)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

``^`` binds tighter than unary minus and associates to the right, so
``-x^2`` is ``-(x^2)`` and ``2^3^2`` is ``2^(3^2)``.  The only built-in
constant is ``pi``.  Evaluation is vectorized: bindings may be numpy arrays.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

MAX_DEPTH = 64

FUNCTIONS = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}
CONSTANTS = {"pi": math.pi}


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UndeclaredVariable(ExprError):
    pass


class ArityError(ExprError):
    pass


class DomainFault(ExprError):
    def __init__(self, message: str, location: str):
        super().__init__(f"{message} in {location}")
        self.location = location


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Expr = Union[Num, Var, Neg, BinOp, Call]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str):
    pos, out = 0, []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            # point at the offending character, not leading whitespace
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        out.append((kind, m.group(kind), start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str, declared: frozenset):
        self.tokens = _tokenize(text)
        self.i = 0
        self.declared = declared

    @property
    def tok(self):
        return self.tokens[self.i]

    def take(self, value=None):
        kind, val, off = self.tok
        if value is not None and val != value:
            raise ExprSyntaxError(f"expected {value!r}, found {val or 'end of input'!r}", off)
        self.i += 1
        return kind, val, off

    def parse(self) -> Expr:
        e = self.expr(0)
        kind, val, off = self.tok
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {val!r}", off)
        return e

    def _guard(self, depth):
        if depth > MAX_DEPTH:
            raise ExprSyntaxError("expression nested too deeply", self.tok[2])

    def expr(self, depth):
        self._guard(depth)
        e = self.term(depth + 1)
        while self.tok[1] in ("+", "-") and self.tok[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.term(depth + 1))
        return e

    def term(self, depth):
        self._guard(depth)
        e = self.unary(depth + 1)
        while self.tok[1] in ("*", "/") and self.tok[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.unary(depth + 1))
        return e

    def unary(self, depth):
        self._guard(depth)
        if self.tok == ("op", "-", self.tok[2]):
            self.take()
            return Neg(self.unary(depth + 1))
        return self.power(depth + 1)

    def power(self, depth):
        self._guard(depth)
        base = self.atom(depth + 1)
        if self.tok[0] == "op" and self.tok[1] == "^":
            self.take()
            return BinOp("^", base, self.unary(depth + 1))
        return base

    def atom(self, depth):
        self._guard(depth)
        kind, val, off = self.tok
        if kind == "num":
            self.take()
            return Num(float(val))
        if kind == "name":
            self.take()
            if self.tok[1] == "(" and self.tok[0] == "op":
                if val not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {val!r}", off)
                self.take("(")
                args = [self.expr(depth + 1)]
                while self.tok[1] == ",":
                    self.take()
                    args.append(self.expr(depth + 1))
                self.take(")")
                arity = FUNCTIONS[val][0]
                if len(args) != arity:
                    raise ArityError(f"{val} takes {arity} argument(s), got {len(args)}")
                return Call(val, tuple(args))
            if val in CONSTANTS:
                return Var(val)
            if val not in self.declared:
                raise UndeclaredVariable(f"undeclared variable {val!r} at offset {off}")
            return Var(val)
        if kind == "op" and val == "(":
            self.take()
            e = self.expr(depth + 1)
            self.take(")")
            return e
        raise ExprSyntaxError(f"unexpected {val or 'end of input'!r}", off)


def parse(text: str, declared_vars: Iterable[str] = ()) -> Expr:
    """Parse ``text`` into an AST, checking variables against ``declared_vars``."""
    return _Parser(text, frozenset(declared_vars)).parse()


def to_string(e: Expr) -> str:
    """Canonical, fully parenthesized form; parsing it yields the same AST."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_string(e.arg)})"
    if isinstance(e, BinOp):
        return f"({to_string(e.left)} {e.op} {to_string(e.right)})"
    return f"{e.name}({', '.join(to_string(a) for a in e.args)})"


def free_variables(e: Expr) -> set:
    if isinstance(e, Var):
        return set() if e.name in CONSTANTS else {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, Neg):
        return free_variables(e.arg)
    if isinstance(e, BinOp):
        return free_variables(e.left) | free_variables(e.right)
    return set().union(*(free_variables(a) for a in e.args))


def _fault(cond, message, e):
    if np.any(cond):
        raise DomainFault(message, to_string(e))


def evaluate(e: Expr, bindings: Mapping[str, object]):
    """Evaluate with IEEE doubles; domain faults raise instead of giving NaN."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        if e.name in CONSTANTS:
            return CONSTANTS[e.name]
        try:
            return bindings[e.name]
        except KeyError:
            raise UndeclaredVariable(f"no binding for {e.name!r}") from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, bindings)
    if isinstance(e, BinOp):
        a = np.asarray(evaluate(e.left, bindings), dtype=float)
        b = np.asarray(evaluate(e.right, bindings), dtype=float)
        if e.op == "+":
            r = a + b
        elif e.op == "-":
            r = a - b
        elif e.op == "*":
            r = a * b
        elif e.op == "/":
            _fault(b == 0, "division by zero", e)
            r = a / b
        else:
            _fault((a == 0) & (b < 0), "zero raised to a negative power", e)
            _fault((a < 0) & (b != np.round(b)), "negative base with fractional exponent", e)
            with np.errstate(over="ignore"):
                r = np.power(a, b)
        return r if r.ndim else float(r)
    args = [np.asarray(evaluate(a, bindings), dtype=float) for a in e.args]
    if e.name == "log":
        _fault(args[0] <= 0, "log of a nonpositive number", e)
    elif e.name == "sqrt":
        _fault(args[0] < 0, "sqrt of a negative number", e)
    r = FUNCTIONS[e.name][1](*args)
    return r if np.ndim(r) else float(r)


eval_expr = evaluate


def grad(e: Expr, variables: Sequence[str], bindings: Mapping[str, float], h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with step h * max(1, |value|)."""
    out = np.zeros(len(variables))
    for i, name in enumerate(variables):
        v = float(bindings[name])
        step = h * max(1.0, abs(v))
        hi = dict(bindings)
        lo = dict(bindings)
        hi[name] = v + step
        lo[name] = v - step
        out[i] = (float(evaluate(e, hi)) - float(evaluate(e, lo))) / (2 * step)
    return out


class Compiled:
    """An expression bound to an ordered list of array columns."""

    def __init__(self, text: str, declared: Iterable[str], aliases: Mapping[str, str] = None):
        self.text = text
        self.aliases = dict(aliases or {})
        self.expr = parse(text, set(declared) | set(self.aliases))

    def __call__(self, columns: Mapping[str, np.ndarray]):
        b = dict(columns)
        for alias, target in self.aliases.items():
            if target in b:
                b[alias] = b[target]
        return evaluate(self.expr, b)

    def __repr__(self):
        return f"Compiled({self.text!r})"
