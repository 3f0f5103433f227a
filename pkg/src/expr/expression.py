#!/usr/bin/env python3
"""
Expression language for problem definitions.

Arithmetic over the variables of a Lagrangian, kernel or constraint with
exp, ln, sqrt, sin, cos and gammafn. Expressions parse to an immutable AST
that can be printed back, evaluated, differentiated symbolically and compiled
into numpy-vectorized closures.
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from core.errors import (DifferentiationError, EvaluationError, ParseError, PoleError,
                         UnboundVariableError)
from core.special_functions import gamma

logger = logging.getLogger(__name__)

CONSTANTS = {"pi": math.pi, "e": math.e}
BASE_VARIABLES = frozenset({"t", "x", "d", "xtau", "s", "alpha"})
INDEXED_VARIABLES = frozenset({f"{p}{i}" for p in ("x", "d") for i in range(1, 10)})
VARIABLES = BASE_VARIABLES | INDEXED_VARIABLES
FUNCTIONS = ("exp", "ln", "sqrt", "sin", "cos", "gammafn")
BINARY_OPS = ("+", "-", "*", "/", "^")

# Printing precedence
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}
_ATOM = 5


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, Unary, Binary]


# ---------------------------------------------------------------------------
# Tokenizer and parser

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+|\n)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(source: str) -> List[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1, source)
        kind = m.lastgroup
        if kind == "ws":
            if m.group() == "\n":
                line += 1
                line_start = m.end()
        else:
            tokens.append(_Token(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(_Token("end", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, source: str, variables: FrozenSet[str]):
        self.source = source
        self.variables = variables
        self.tokens = _tokenize(source)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message: str, tok: Optional[_Token] = None) -> ParseError:
        tok = tok or self.peek()
        return ParseError(message, tok.line, tok.column, self.source)

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.text != text or tok.kind == "end":
            found = "end of input" if tok.kind == "end" else repr(tok.text)
            raise self.error(f"expected {text!r}, found {found}")
        return self.advance()

    def parse(self) -> Expr:
        if self.peek().kind == "end":
            raise self.error("empty expression")
        node = self.expr()
        if self.peek().kind != "end":
            raise self.error(f"unexpected {self.peek().text!r}")
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek().text in ("+", "-") and self.peek().kind == "op":
            op = self.advance().text
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek().text in ("*", "/") and self.peek().kind == "op":
            op = self.advance().text
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek().kind == "op" and self.peek().text == "-":
            self.advance()
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.advance()
            # right-associative, binds tighter than unary minus on its left
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "ident":
            self.advance()
            name = tok.text
            if name in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Unary(name, arg)
            if self.peek().text == "(" and self.peek().kind == "op":
                raise self.error(f"unknown function {name!r}", tok)
            if name in CONSTANTS:
                return Var(name)
            if name not in self.variables:
                raise self.error(f"unknown identifier {name!r}", tok)
            return Var(name)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        raise self.error(f"unexpected {found}")


def parse(source: str, variables: Optional[Iterable[str]] = None) -> Expr:
    """
    Parse an expression.

    Args:
        source: Expression text
        variables: Allowed variable names (defaults to every known slot)

    Returns:
        Expr: The AST

    Raises:
        ParseError: syntax error or unknown identifier, with line and column
    """
    if source is None or not str(source).strip():
        raise ParseError("empty expression", 1, 1, source)
    allowed = VARIABLES if variables is None else frozenset(variables)
    return _Parser(str(source), allowed).parse()


# ---------------------------------------------------------------------------
# Printing

def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return _PREC["neg"]
    if isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _PREC["neg"]
    return _ATOM


def _wrap(e: Expr, needs: bool) -> str:
    text = to_source(e)
    return f"({text})" if needs else text


def to_source(e: Expr) -> str:
    """Print an AST with the fewest parentheses that parse back to the same tree."""
    if isinstance(e, Const):
        if e.value < 0 or math.copysign(1.0, e.value) < 0:
            return f"-{_format_number(-e.value)}"
        return _format_number(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return "-" + _wrap(e.arg, _prec(e.arg) < _PREC["neg"])
        return f"{e.op}({to_source(e.arg)})"
    prec = _PREC[e.op]
    if e.op == "^":
        left = _wrap(e.left, _prec(e.left) <= prec)
        right = _wrap(e.right, _prec(e.right) < _PREC["neg"])
        return f"{left}^{right}"
    left = _wrap(e.left, _prec(e.left) < prec)
    right = _wrap(e.right, _prec(e.right) <= prec)
    return f"{left} {e.op} {right}"


def free_variables(e: Expr) -> FrozenSet[str]:
    if isinstance(e, Var):
        return frozenset() if e.name in CONSTANTS else frozenset({e.name})
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Unary):
        return free_variables(e.arg)
    return free_variables(e.left) | free_variables(e.right)


# ---------------------------------------------------------------------------
# Evaluation

def _power(base: float, exponent: float) -> float:
    if base < 0.0 and not float(exponent).is_integer():
        raise EvaluationError(f"non-integer power of a negative base ({base:g}^{exponent:g})")
    if base == 0.0 and exponent < 0.0:
        raise EvaluationError("zero raised to a negative power")
    return math.pow(base, exponent)


def _apply(op: str, v: float) -> float:
    if op == "neg":
        return -v
    if op == "exp":
        return math.exp(v)
    if op == "ln":
        if v <= 0.0:
            raise EvaluationError(f"ln of non-positive value {v:g}")
        return math.log(v)
    if op == "sqrt":
        if v < 0.0:
            raise EvaluationError(f"sqrt of negative value {v:g}")
        return math.sqrt(v)
    if op == "sin":
        return math.sin(v)
    if op == "cos":
        return math.cos(v)
    if op == "gammafn":
        try:
            return gamma(v)
        except PoleError as e:
            raise EvaluationError(str(e)) from e
    raise EvaluationError(f"unknown function {op!r}")


def _combine(op: str, a: float, b: float) -> float:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0.0:
            raise EvaluationError("division by zero")
        return a / b
    return _power(a, b)


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """
    Evaluate in double precision.

    Raises:
        UnboundVariableError: a free variable missing from env
        EvaluationError: a function applied outside its domain, or overflow
    """
    try:
        return _evaluate(e, env)
    except OverflowError as exc:
        raise EvaluationError(f"overflow evaluating {to_source(e)}") from exc


def _evaluate(e: Expr, env: Mapping[str, float]) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        if e.name in env:
            return float(env[e.name])
        if e.name in CONSTANTS:
            return CONSTANTS[e.name]
        raise UnboundVariableError(f"variable {e.name!r} has no value")
    if isinstance(e, Unary):
        return _apply(e.op, _evaluate(e.arg, env))
    return _combine(e.op, _evaluate(e.left, env), _evaluate(e.right, env))


# ---------------------------------------------------------------------------
# Simplifying constructors

def _is_const(e: Expr, value: Optional[float] = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def _fold(op: str, *args: Const) -> Optional[Const]:
    try:
        if len(args) == 1:
            v = _apply(op, args[0].value)
        else:
            v = _combine(op, args[0].value, args[1].value)
    except (EvaluationError, OverflowError, ValueError):
        return None
    return Const(v) if math.isfinite(v) else None


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Binary("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Binary("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Binary("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        folded = _fold("/", a, b)
        if folded is not None:
            return folded
    if _is_const(a, 0.0):
        return Const(0.0)
    if _is_const(b, 1.0):
        return a
    return Binary("/", a, b)


def power(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return Const(1.0)
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        folded = _fold("^", a, b)
        if folded is not None:
            return folded
    return Binary("^", a, b)


def call(op: str, a: Expr) -> Expr:
    if _is_const(a):
        folded = _fold(op, a)
        if folded is not None:
            return folded
    return Unary(op, a)


# ---------------------------------------------------------------------------
# Differentiation

def differentiate(e: Expr, wrt: str) -> Expr:
    """
    Symbolic partial derivative with constant folding.

    Raises:
        DifferentiationError: gammafn of an argument depending on wrt, or an
            unknown variable name
    """
    if wrt not in VARIABLES:
        raise DifferentiationError(f"cannot differentiate with respect to {wrt!r}")
    return _diff(e, wrt)


def _depends(e: Expr, wrt: str) -> bool:
    return wrt in free_variables(e)


def _diff(e: Expr, wrt: str) -> Expr:
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0) if e.name == wrt else Const(0.0)
    if isinstance(e, Unary):
        u = e.arg
        du = _diff(u, wrt)
        if e.op == "neg":
            return neg(du)
        if _is_const(du, 0.0):
            if e.op == "gammafn" and _depends(u, wrt):
                raise DifferentiationError("gammafn of a variable argument is not differentiable here")
            return Const(0.0)
        if e.op == "exp":
            return mul(call("exp", u), du)
        if e.op == "ln":
            return div(du, u)
        if e.op == "sqrt":
            return div(du, mul(Const(2.0), call("sqrt", u)))
        if e.op == "sin":
            return mul(call("cos", u), du)
        if e.op == "cos":
            return neg(mul(call("sin", u), du))
        raise DifferentiationError(f"{e.op} of an argument depending on {wrt} is not differentiable")
    u, v = e.left, e.right
    du, dv = _diff(u, wrt), _diff(v, wrt)
    if e.op == "+":
        return add(du, dv)
    if e.op == "-":
        return sub(du, dv)
    if e.op == "*":
        return add(mul(du, v), mul(u, dv))
    if e.op == "/":
        return div(sub(mul(du, v), mul(u, dv)), power(v, Const(2.0)))
    # e.op == "^"
    if not _depends(v, wrt):
        return mul(mul(v, power(u, sub(v, Const(1.0)))), du)
    if not _depends(u, wrt):
        return mul(mul(e, call("ln", u)), dv)
    return mul(e, add(mul(dv, call("ln", u)), div(mul(v, du), u)))


def substitute(e: Expr, bindings: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions."""
    if isinstance(e, Var):
        return bindings.get(e.name, e)
    if isinstance(e, Const):
        return e
    if isinstance(e, Unary):
        return Unary(e.op, substitute(e.arg, bindings))
    return Binary(e.op, substitute(e.left, bindings), substitute(e.right, bindings))


# ---------------------------------------------------------------------------
# Compilation

_gamma_vec = np.vectorize(lambda v: gamma(v) if not (v <= 0 and float(v).is_integer()) else np.nan,
                          otypes=[float])

_UFUNCS: Dict[str, Callable] = {
    "neg": np.negative,
    "exp": np.exp,
    "ln": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "gammafn": _gamma_vec,
}

_BINARY_UFUNCS: Dict[str, Callable] = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
    "^": np.power,
}


def compile_expr(e: Expr, args: Sequence[str],
                 constants: Optional[Mapping[str, float]] = None) -> Callable[..., np.ndarray]:
    """
    Turn an AST into a closure over positional numpy arguments.

    Values outside a function's domain become NaN rather than raising.

    Raises:
        UnboundVariableError: a free variable neither in args nor in constants
    """
    bound = dict(constants or {})
    positions = {name: i for i, name in enumerate(args)}
    missing = free_variables(e) - set(positions) - set(bound)
    if missing:
        raise UnboundVariableError(f"unbound variables: {', '.join(sorted(missing))}")

    def build(node: Expr) -> Callable:
        if isinstance(node, Const):
            value = node.value
            return lambda vals: value
        if isinstance(node, Var):
            if node.name in positions:
                idx = positions[node.name]
                return lambda vals: vals[idx]
            value = float(bound.get(node.name, CONSTANTS.get(node.name, math.nan)))
            return lambda vals: value
        if isinstance(node, Unary):
            fn, inner = _UFUNCS[node.op], build(node.arg)
            return lambda vals: fn(inner(vals))
        fn, left, right = _BINARY_UFUNCS[node.op], build(node.left), build(node.right)
        return lambda vals: fn(left(vals), right(vals))

    body = build(e)

    def compiled(*values):
        if len(values) != len(args):
            raise TypeError(f"expected {len(args)} arguments ({', '.join(args)}), got {len(values)}")
        arrays = [np.asarray(v, dtype=float) for v in values]
        with np.errstate(all="ignore"):
            out = body(arrays)
        shape = np.broadcast(*arrays).shape if arrays else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy() if shape else float(out)

    compiled.source = to_source(e)
    return compiled
