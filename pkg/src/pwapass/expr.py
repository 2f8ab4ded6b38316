"""Scalar expression parsing, evaluation and symbolic differentiation.

Expressions describe the components of the maps ``f`` and ``h`` (and scalar
signals such as a disturbance in the step index ``k``).  The grammar is small
on purpose::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := base ('^' integer)?
    base   := number | name | func '(' expr ')' | '(' expr ')' | '-' base

with ``func`` one of sin, cos, tan, exp, log, sqrt.  Names are ``x1``, ``x2``,
... by default, ``pi`` is a constant, and callers may allow extra names.
Unary minus binds tighter than ``^``, so ``-x1^2`` means ``(-x1)^2``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expression", "Const", "Var", "Neg", "BinOp", "Pow", "Call",
    "ExpressionError", "ParseError", "EvaluationError",
    "parse", "pretty", "evaluate", "evaluate_env", "differentiate", "fold",
    "variables", "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt")


class ExpressionError(ValueError):
    """Base class for expression problems."""


class ParseError(ExpressionError):
    """Syntax error, unknown function or unknown variable.

    ``offset`` is the 0-based character offset into the source text.
    """

    def __init__(self, message: str, offset: int, source: str = ""):
        self.offset = offset
        self.source = source
        super().__init__(f"{message} at offset {offset}")


class EvaluationError(ExpressionError):
    """Domain error during evaluation, naming the offending subexpression."""

    def __init__(self, message: str, subexpression: "Expression"):
        self.subexpression = subexpression
        super().__init__(f"{message} in '{pretty(subexpression)}'")


# ---------------------------------------------------------------- AST nodes


class Expression:
    """Base class of the immutable expression tree."""

    __slots__ = ()

    def __str__(self) -> str:
        return pretty(self)


@dataclass(frozen=True)
class Const(Expression):
    value: float


@dataclass(frozen=True)
class Var(Expression):
    name: str


@dataclass(frozen=True)
class Neg(Expression):
    arg: Expression


@dataclass(frozen=True)
class BinOp(Expression):
    op: str  # one of + - * /
    left: Expression
    right: Expression


@dataclass(frozen=True)
class Pow(Expression):
    base: Expression
    exponent: int


@dataclass(frozen=True)
class Call(Expression):
    func: str
    arg: Expression


# ------------------------------------------------------------------ lexer

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()])"
    r")"
)
_XVAR_RE = re.compile(r"x([1-9]\d*)\Z")


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            # skip whitespace to report the offending character
            while pos < len(source) and source[pos].isspace():
                pos += 1
            raise ParseError(f"unexpected character {source[pos]!r}", pos, source)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, allowed: set[str] | None, n: int | None):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0
        self.allowed = allowed
        self.n = n

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        raise ParseError(message, tok[2], self.source)

    def expect(self, value):
        tok = self.peek()
        if tok[0] != "op" or tok[1] != value:
            found = "end of input" if tok[0] == "end" else repr(tok[1])
            self.error(f"expected {value!r}, found {found}")
        return self.take()

    def parse(self) -> Expression:
        node = self.expr()
        if self.peek()[0] != "end":
            self.error(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self):
        node = self.base()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            sign = 1
            if self.peek()[0] == "op" and self.peek()[1] in "+-":
                sign = -1 if self.take()[1] == "-" else 1
            tok = self.peek()
            if tok[0] != "num" or not tok[1].isdigit():
                self.error("exponent must be an integer constant")
            self.take()
            node = Pow(node, sign * int(tok[1]))
        return node

    def base(self):
        tok = self.peek()
        kind, text, offset = tok
        if kind == "num":
            self.take()
            return Const(float(text))
        if kind == "op" and text == "-":
            self.take()
            nxt = self.peek()
            if nxt[0] == "num":
                self.take()
                return Const(-float(nxt[1]))
            return Neg(self.base())
        if kind == "op" and text == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            self.take()
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if text not in FUNCTIONS:
                    raise ParseError(f"unknown function {text!r}", offset, self.source)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            if text == "pi":
                return Const(math.pi)
            if not self._variable_ok(text):
                raise ParseError(f"unknown variable {text!r}", offset, self.source)
            return Var(text)
        if kind == "end":
            self.error("unexpected end of input")
        self.error(f"unexpected token {text!r}")

    def _variable_ok(self, name: str) -> bool:
        if self.allowed is not None and name in self.allowed:
            return True
        m = _XVAR_RE.match(name)
        if m is None:
            return False
        return self.n is None or int(m.group(1)) <= self.n


def parse(source: str, n: int | None = None, extra: Iterable[str] = ()) -> Expression:
    """Parse ``source`` into an expression tree.

    ``n`` limits state variables to ``x1..xn``; ``extra`` lists additional
    admissible variable names (for example ``"k"``).
    """
    if not isinstance(source, str):
        raise TypeError("expression source must be a string")
    return _Parser(source, set(extra), n).parse()


# ---------------------------------------------------------- pretty printer

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v)) if v != 0 or math.copysign(1, v) > 0 else "0"
    return repr(float(v))


def _is_base(e: Expression) -> bool:
    # things that print without needing parentheses as a factor base
    return isinstance(e, (Var, Call)) or (isinstance(e, Const) and e.value >= 0)


def pretty(e: Expression) -> str:
    """Render ``e`` so that ``parse(pretty(e)) == e``."""
    if isinstance(e, Const):
        return _fmt_const(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({pretty(e.arg)})"
    if isinstance(e, Neg):
        return "-" + _neg_operand(e.arg)
    if isinstance(e, Pow):
        b = e.base
        if _is_base(b) or (isinstance(b, Const)) or isinstance(b, Neg):
            bs = pretty(b)
        else:
            bs = f"({pretty(b)})"
        return f"{bs}^{e.exponent}"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        ls = pretty(e.left)
        if isinstance(e.left, BinOp) and _PREC[e.left.op] < p:
            ls = f"({ls})"
        rs = pretty(e.right)
        if isinstance(e.right, BinOp) and _PREC[e.right.op] <= p:
            rs = f"({rs})"
        sep = f" {e.op} " if p == 1 else e.op
        return ls + sep + rs
    raise TypeError(f"not an expression: {e!r}")


def _neg_operand(a: Expression) -> str:
    if isinstance(a, Const) and a.value >= 0:
        return f"({pretty(a)})"  # keeps Neg(Const) distinct from a literal
    if isinstance(a, (BinOp, Pow)):
        return f"({pretty(a)})"
    return pretty(a)


# -------------------------------------------------------------- evaluation


def variables(e: Expression) -> set[str]:
    """Names of all variables referenced by ``e``."""
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Const):
        return set()
    if isinstance(e, (Neg, Call)):
        return variables(e.arg)
    if isinstance(e, Pow):
        return variables(e.base)
    return variables(e.left) | variables(e.right)


def _check(value, node):
    if not np.all(np.isfinite(value)):
        raise EvaluationError("non-finite result", node)
    return value


def _eval(e: Expression, env: Mapping[str, np.ndarray]):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise EvaluationError(f"variable {e.name} not supplied", e) from None
    if isinstance(e, Neg):
        return -_eval(e.arg, env)
    if isinstance(e, BinOp):
        a = _eval(e.left, env)
        b = _eval(e.right, env)
        if e.op == "+":
            return _check(a + b, e)
        if e.op == "-":
            return _check(a - b, e)
        if e.op == "*":
            return _check(a * b, e)
        if np.any(np.asarray(b) == 0):
            raise EvaluationError("division by zero", e)
        return _check(a / b, e)
    if isinstance(e, Pow):
        b = _eval(e.base, env)
        if e.exponent < 0 and np.any(np.asarray(b) == 0):
            raise EvaluationError("zero raised to a negative power", e)
        return _check(np.power(np.asarray(b, dtype=float), float(e.exponent)), e)
    if isinstance(e, Call):
        a = np.asarray(_eval(e.arg, env), dtype=float)
        if e.func == "log" and np.any(a <= 0):
            raise EvaluationError("log of non-positive value", e)
        if e.func == "sqrt" and np.any(a < 0):
            raise EvaluationError("sqrt of negative value", e)
        return _check(getattr(np, e.func)(a), e)
    raise TypeError(f"not an expression: {e!r}")


def evaluate_env(e: Expression, env: Mapping[str, object]):
    """Evaluate with an explicit name -> value (scalar or array) mapping."""
    env = {k: np.asarray(v, dtype=float) for k, v in env.items()}
    with np.errstate(all="ignore"):
        out = _eval(e, env)
    shapes = [v.shape for v in env.values()]
    shape = np.broadcast_shapes(*shapes) if shapes else ()
    out = np.broadcast_to(np.asarray(out, dtype=float), shape)
    return float(out) if out.ndim == 0 else out.copy()


def evaluate(e: Expression, x: Sequence[float] | np.ndarray, **extra):
    """Evaluate at a state ``x``.

    ``x`` may be a single point of shape ``(n,)`` or a batch ``(N, n)``; the
    result is a float or an array of shape ``(N,)``.
    """
    x = np.asarray(x, dtype=float)
    env = {f"x{i + 1}": x[..., i] for i in range(x.shape[-1])}
    env.update(extra)
    return evaluate_env(e, env)


# ---------------------------------------------------------- differentiation

_ZERO = Const(0.0)
_ONE = Const(1.0)


def differentiate(e: Expression, var: int | str) -> Expression:
    """Symbolic partial derivative (unsimplified; see :func:`fold`).

    ``var`` is a 1-based state index (``1`` means ``x1``) or a variable name.
    """
    name = f"x{var}" if isinstance(var, (int, np.integer)) else var
    return _diff(e, name)


def _diff(e: Expression, v: str) -> Expression:
    if isinstance(e, Const):
        return _ZERO
    if isinstance(e, Var):
        return _ONE if e.name == v else _ZERO
    if isinstance(e, Neg):
        return Neg(_diff(e.arg, v))
    if isinstance(e, BinOp):
        a, b = e.left, e.right
        da, db = _diff(a, v), _diff(b, v)
        if e.op in "+-":
            return BinOp(e.op, da, db)
        if e.op == "*":
            return BinOp("+", BinOp("*", da, b), BinOp("*", a, db))
        num = BinOp("-", BinOp("*", da, b), BinOp("*", a, db))
        return BinOp("/", num, Pow(b, 2))
    if isinstance(e, Pow):
        k = e.exponent
        outer = BinOp("*", Const(float(k)), Pow(e.base, k - 1))
        return BinOp("*", outer, _diff(e.base, v))
    if isinstance(e, Call):
        u = e.arg
        du = _diff(u, v)
        if e.func == "sin":
            return BinOp("*", Call("cos", u), du)
        if e.func == "cos":
            return BinOp("*", Neg(Call("sin", u)), du)
        if e.func == "tan":
            return BinOp("/", du, Pow(Call("cos", u), 2))
        if e.func == "exp":
            return BinOp("*", Call("exp", u), du)
        if e.func == "log":
            return BinOp("/", du, u)
        if e.func == "sqrt":
            return BinOp("/", du, BinOp("*", Const(2.0), Call("sqrt", u)))
    raise TypeError(f"not an expression: {e!r}")


def _const_value(e: Expression) -> float | None:
    return e.value if isinstance(e, Const) else None


def fold(e: Expression) -> Expression:
    """Constant folding and the identities 0*x=0, 1*x=x, x+0=x, x^1=x, x^0=1."""
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Neg):
        a = fold(e.arg)
        if isinstance(a, Const):
            return Const(-a.value)
        if isinstance(a, Neg):
            return a.arg
        return Neg(a)
    if isinstance(e, Call):
        a = fold(e.arg)
        if isinstance(a, Const):
            try:
                return Const(float(evaluate_env(Call(e.func, a), {})))
            except EvaluationError:
                pass
        return Call(e.func, a)
    if isinstance(e, Pow):
        b = fold(e.base)
        if e.exponent == 0:
            return _ONE
        if e.exponent == 1:
            return b
        if isinstance(b, Const) and not (b.value == 0 and e.exponent < 0):
            return Const(float(b.value ** e.exponent))
        return Pow(b, e.exponent)
    a, b = fold(e.left), fold(e.right)
    ca, cb = _const_value(a), _const_value(b)
    op = e.op
    if ca is not None and cb is not None and not (op == "/" and cb == 0):
        value = {"+": ca + cb, "-": ca - cb, "*": ca * cb}[op] if op != "/" else ca / cb
        if math.isfinite(value):
            return Const(float(value))
    if op == "+":
        if ca == 0:
            return b
        if cb == 0:
            return a
    elif op == "-":
        if cb == 0:
            return a
        if ca == 0:
            return fold(Neg(b))
    elif op == "*":
        if ca == 0 or cb == 0:
            return _ZERO
        if ca == 1:
            return b
        if cb == 1:
            return a
    elif op == "/":
        if cb == 1:
            return a
        if ca == 0 and cb != 0:
            return _ZERO
    return BinOp(op, a, b)
