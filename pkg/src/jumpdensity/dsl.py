"""Expression language for vector-field coordinates.

Expressions are scalar functions of the state ``x1..xe``, the jump mark
``y1..yn`` and the time ``t``.  They are parsed once into an immutable AST
and then evaluated on floats or on numpy arrays (broadcasting over leading
axes), differentiated exactly with dual numbers, or differentiated
symbolically so that nested Lie brackets stay exact.

Grammar (highest precedence first)::

    primary := number | name | name '(' expr ')' | '(' expr ')'
    power   := primary ['^' unary]          # right-associative
    unary   := '-' unary | power
    term    := unary (('*' | '/') unary)*
    expr    := term (('+' | '-') term)*

``abs`` has derivative 0 at 0 by convention.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log", "tanh", "abs", "sqrt")


class DSLError(ValueError):
    """Base class for expression errors."""


class ParseError(DSLError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class DomainError(DSLError, ArithmeticError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (expression offset {offset})")
        self.offset = offset


# -- AST ---------------------------------------------------------------------
# ``pos`` is the byte offset of the node in the source text; it is excluded
# from equality and hashing so structurally equal trees compare equal.


@dataclass(frozen=True)
class Const:
    value: float
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Var:
    kind: str  # 'x', 'y' or 't'
    index: int  # 1-based; 0 for t
    pos: int = field(default=-1, compare=False, repr=False)

    @property
    def name(self) -> str:
        return "t" if self.kind == "t" else f"{self.kind}{self.index}"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"
    pos: int = field(default=-1, compare=False, repr=False)


Expr = Union[Const, Var, Neg, BinOp, Call]

ZERO = Const(0.0)
ONE = Const(1.0)


# -- parsing -----------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


class _Parser:
    def __init__(self, text: str, e: int, n: int):
        self.text = text
        self.e = e
        self.n = n
        self.tokens: list[tuple[str, str, int]] = []
        i = 0
        while i < len(text):
            if text[i:].strip() == "":
                break
            m = _TOKEN.match(text, i)
            if m is None or m.end() == i:
                j = i
                while j < len(text) and text[j].isspace():
                    j += 1
                raise ParseError(f"unexpected character {text[j]!r}", self._byte(j))
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), self._byte(start)))
            i = m.end()
        self.end = self._byte(len(text))
        self.k = 0

    def _byte(self, i: int) -> int:
        return len(self.text[:i].encode("utf-8"))

    def peek(self):
        if self.k < len(self.tokens):
            return self.tokens[self.k]
        return ("eof", "", self.end)

    def take(self):
        tok = self.peek()
        self.k += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.peek()
        if text != value or kind != "op":
            what = "end of input" if kind == "eof" else repr(text)
            raise ParseError(f"expected {value!r}, found {what}", pos)
        self.k += 1

    def parse(self) -> Expr:
        if not self.tokens:
            raise ParseError("empty expression", 0)
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected token {text!r}", pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.term(), pos)
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.unary(), pos)
        return node

    def unary(self) -> Expr:
        kind, text, pos = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(self.unary(), pos)
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        kind, text, pos = self.peek()
        if kind == "op" and text == "^":
            self.take()
            return BinOp("^", base, self.unary(), pos)
        return base

    def primary(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            return Const(float(text), pos)
        if kind == "name":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg, pos)
            return self.variable(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "eof" else repr(text)
        raise ParseError(f"unexpected {what}", pos)

    def variable(self, name: str, pos: int) -> Var:
        if name == "t":
            return Var("t", 0, pos)
        m = re.fullmatch(r"([xy])([1-9]\d*)", name)
        if m is None:
            raise ParseError(f"unknown identifier {name!r}", pos)
        kind, index = m.group(1), int(m.group(2))
        limit = self.e if kind == "x" else self.n
        if index > limit:
            raise ParseError(
                f"variable {name} out of range ({kind}1..{kind}{limit} declared)", pos
            )
        return Var(kind, index, pos)


def parse_expr(text: str, e: int, n: int = 0) -> Expr:
    """Parse ``text`` into an AST over ``x1..xe``, ``y1..yn`` and ``t``."""
    if not text or not text.strip():
        raise ParseError("empty expression", 0)
    return _Parser(text, e, n).parse()


# -- printing ----------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def to_text(expr: Expr) -> str:
    """Render an expression so that ``parse_expr(to_text(e))`` evaluates like ``e``."""
    if isinstance(expr, Const):
        if expr.value < 0 or math.copysign(1.0, expr.value) < 0:
            return f"(-{_fmt(-expr.value)})"
        return _fmt(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{_wrap(expr.operand, 3)})"
    if isinstance(expr, Call):
        return f"{expr.func}({to_text(expr.arg)})"
    p = _PREC[expr.op]
    if expr.op == "^":
        return f"{_wrap(expr.left, 5)}^{_wrap(expr.right, 4)}"
    right_prec = p + 1  # left-associative ops need parens on equal-precedence right operands
    return f"{_wrap(expr.left, p)} {expr.op} {_wrap(expr.right, right_prec)}"


def _fmt(v: float) -> str:
    if math.isinf(v) or math.isnan(v):
        raise DSLError(f"cannot print non-finite constant {v}")
    s = repr(float(v))
    return s


def _wrap(expr: Expr, min_prec: int) -> str:
    s = to_text(expr)
    if isinstance(expr, BinOp) and _PREC[expr.op] < min_prec:
        return f"({s})"
    return s


# -- variables ---------------------------------------------------------------


def variables(expr: Expr) -> set[Var]:
    out: set[Var] = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add(Var(node.kind, node.index))
        elif isinstance(node, Neg):
            stack.append(node.operand)
        elif isinstance(node, BinOp):
            stack.extend((node.left, node.right))
        elif isinstance(node, Call):
            stack.append(node.arg)
    return out


def max_index(expr: Expr, kind: str) -> int:
    return max((v.index for v in variables(expr) if v.kind == kind), default=0)


# -- real evaluation ---------------------------------------------------------


def _lookup(node: Var, x, y, t):
    if node.kind == "t":
        return t
    src = x if node.kind == "x" else y
    if src is None:
        raise DSLError(f"no value supplied for {node.name}")
    src = np.asarray(src, dtype=float)
    if src.shape[-1] < node.index:
        raise DSLError(f"{node.name} out of range for supplied vector of length {src.shape[-1]}")
    return src[..., node.index - 1]


def eval_expr(expr: Expr, x, y=None, t=0.0):
    """Evaluate ``expr`` with state ``x`` (last axis = coordinates).

    Leading axes of ``x``, ``y`` and ``t`` broadcast against each other.
    Raises :class:`DomainError` naming the offending node's offset.
    """
    return _ev(expr, x, y, t)


def _ev(node, x, y, t):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return _lookup(node, x, y, t)
    if isinstance(node, Neg):
        return -_ev(node.operand, x, y, t)
    if isinstance(node, Call):
        a = _ev(node.arg, x, y, t)
        f = node.func
        if f == "log":
            if np.any(np.asarray(a) <= 0):
                raise DomainError("log of non-positive value", node.pos)
            return np.log(a)
        if f == "sqrt":
            if np.any(np.asarray(a) < 0):
                raise DomainError("sqrt of negative value", node.pos)
            return np.sqrt(a)
        if f == "exp":
            with np.errstate(over="raise"):
                try:
                    return np.exp(a)
                except FloatingPointError:
                    raise DomainError("exp overflow", node.pos) from None
        return _REAL_FUNCS[f](a)
    a = _ev(node.left, x, y, t)
    b = _ev(node.right, x, y, t)
    op = node.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if np.any(np.asarray(b) == 0):
            raise DomainError("division by zero", node.pos)
        return a / b
    return _power(a, b, node.pos)


def _power(a, b, pos):
    aa = np.asarray(a, dtype=float)
    bb = np.asarray(b, dtype=float)
    if isinstance(node_b := b, float) and float(node_b).is_integer() and abs(node_b) <= 64:
        k = int(node_b)
        if k < 0 and np.any(aa == 0):
            raise DomainError("zero raised to a negative power", pos)
        return np.power(aa, k) if aa.ndim else float(aa) ** k
    integral = np.equal(np.mod(bb, 1.0), 0.0)
    if np.any((aa < 0) & ~integral):
        raise DomainError("negative base with non-integer exponent", pos)
    if np.any((aa == 0) & (bb < 0)):
        raise DomainError("zero raised to a negative power", pos)
    out = np.power(aa, bb)
    return out if out.ndim else float(out)


_REAL_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "abs": np.abs,
}


# -- dual numbers ------------------------------------------------------------


class Dual:
    """Value/derivative pair; ``value`` and ``deriv`` may be numpy arrays."""

    __slots__ = ("value", "deriv")

    def __init__(self, value, deriv=0.0):
        self.value = value
        self.deriv = deriv

    def __repr__(self):
        return f"Dual({self.value!r}, {self.deriv!r})"

    def __add__(self, other):
        o = _lift(other)
        return Dual(self.value + o.value, self.deriv + o.deriv)

    __radd__ = __add__

    def __sub__(self, other):
        o = _lift(other)
        return Dual(self.value - o.value, self.deriv - o.deriv)

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        return Dual(-self.value, -self.deriv)

    def __mul__(self, other):
        o = _lift(other)
        return Dual(self.value * o.value, self.value * o.deriv + self.deriv * o.value)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _lift(other)
        q = self.value / o.value
        return Dual(q, (self.deriv - q * o.deriv) / o.value)

    def __rtruediv__(self, other):
        return _lift(other) / self


def _lift(v) -> Dual:
    return v if isinstance(v, Dual) else Dual(v, 0.0)


def eval_directional(expr: Expr, x, y=None, t=0.0, direction=None):
    """Return ``(value, derivative of expr in x along direction)``."""
    x = np.asarray(x, dtype=float)
    d = np.zeros_like(x) if direction is None else np.broadcast_to(np.asarray(direction, dtype=float), x.shape)
    r = _evd(expr, x, d, y, t)
    return r.value, r.deriv


def _evd(node, x, d, y, t) -> Dual:
    if isinstance(node, Const):
        return Dual(node.value, 0.0)
    if isinstance(node, Var):
        if node.kind == "x":
            return Dual(_lookup(node, x, y, t), d[..., node.index - 1])
        return Dual(_lookup(node, x, y, t), 0.0)
    if isinstance(node, Neg):
        return -_evd(node.operand, x, d, y, t)
    if isinstance(node, Call):
        a = _evd(node.arg, x, d, y, t)
        f = node.func
        if f == "sin":
            return Dual(np.sin(a.value), np.cos(a.value) * a.deriv)
        if f == "cos":
            return Dual(np.cos(a.value), -np.sin(a.value) * a.deriv)
        if f == "exp":
            with np.errstate(over="raise"):
                try:
                    e = np.exp(a.value)
                except FloatingPointError:
                    raise DomainError("exp overflow", node.pos) from None
            return Dual(e, e * a.deriv)
        if f == "log":
            if np.any(np.asarray(a.value) <= 0):
                raise DomainError("log of non-positive value", node.pos)
            return Dual(np.log(a.value), a.deriv / a.value)
        if f == "tanh":
            th = np.tanh(a.value)
            return Dual(th, (1.0 - th * th) * a.deriv)
        if f == "abs":
            return Dual(np.abs(a.value), np.sign(a.value) * a.deriv)
        if f == "sign":
            return Dual(np.sign(a.value), 0.0 * a.deriv)
        # sqrt
        if np.any(np.asarray(a.value) < 0):
            raise DomainError("sqrt of negative value", node.pos)
        s = np.sqrt(a.value)
        if np.any((np.asarray(s) == 0) & (np.asarray(a.deriv) != 0)):
            raise DomainError("sqrt is not differentiable at 0", node.pos)
        with np.errstate(divide="ignore", invalid="ignore"):
            ds = np.where(np.asarray(a.deriv) == 0, 0.0, a.deriv / (2.0 * np.where(s == 0, 1.0, s)))
        return Dual(s, ds if np.ndim(ds) else float(ds))
    a = _evd(node.left, x, d, y, t)
    b = _evd(node.right, x, d, y, t)
    op = node.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if np.any(np.asarray(b.value) == 0):
            raise DomainError("division by zero", node.pos)
        return a / b
    # power
    val = _power(a.value, b.value, node.pos)
    if np.all(np.asarray(b.deriv) == 0):
        av, bv, ad = np.asarray(a.value), np.asarray(b.value), np.asarray(a.deriv)
        singular = (av == 0) & (bv < 1)
        if np.any(singular & (ad != 0)):
            raise DomainError("power is not differentiable at 0", node.pos)
        with np.errstate(divide="ignore", invalid="ignore"):
            dv = np.where(ad == 0, 0.0, bv * np.power(np.where(singular, 1.0, av), bv - 1.0) * ad)
        return Dual(val, dv if dv.ndim else float(dv))
    if np.any(np.asarray(a.value) <= 0):
        raise DomainError("variable exponent needs a positive base", node.pos)
    return Dual(val, val * (b.deriv * np.log(a.value) + b.value * a.deriv / a.value))


def jacobian(field_exprs, x, y=None, t=0.0) -> np.ndarray:
    """Jacobian ``d field_i / d x_j`` via one dual evaluation per basis vector.

    ``x`` may carry leading batch axes; the result has shape ``(..., e, e)``.
    """
    x = np.asarray(x, dtype=float)
    e = x.shape[-1]
    if len(field_exprs) != e:
        raise DSLError(f"field has {len(field_exprs)} components, state has {e}")
    lead = np.broadcast_shapes(x.shape[:-1], np.shape(y)[:-1] if y is not None else (), np.shape(t))
    out = np.zeros(lead + (e, e))
    for j in range(e):
        d = np.zeros(e)
        d[j] = 1.0
        for i, comp in enumerate(field_exprs):
            out[..., i, j] = _evd(comp, x, np.broadcast_to(d, x.shape), y, t).deriv
    return out


# -- symbolic construction ---------------------------------------------------
# Smart constructors fold constants and drop neutral elements; they are not a
# simplifier, only enough to keep derivative trees from growing needlessly.


def const(v: float) -> Const:
    return Const(float(v))


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value + b.value)
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    if isinstance(b, Neg):
        return sub(a, b.operand)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value - b.value)
    if b == ZERO:
        return a
    if a == ZERO:
        return neg(b)
    if a == b:
        return ZERO
    if isinstance(b, Neg):
        return add(a, b.operand)
    return BinOp("-", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return const(-a.value)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value * b.value)
    if a == ZERO or b == ZERO:
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if a == Const(-1.0):
        return neg(b)
    if b == Const(-1.0):
        return neg(a)
    if isinstance(a, Neg):
        return neg(mul(a.operand, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.operand))
    if isinstance(b, Const) and not isinstance(a, Const):
        a, b = b, a
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if b == ONE:
        return a
    if a == ZERO:
        return ZERO
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0:
        return const(a.value / b.value)
    return BinOp("/", a, b)


def power(a: Expr, b: Expr) -> Expr:
    if b == ZERO:
        return ONE
    if b == ONE:
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            return const(a.value ** b.value)
        except (OverflowError, ZeroDivisionError):
            pass
    return BinOp("^", a, b)


def call(f: str, a: Expr) -> Expr:
    if isinstance(a, Const):
        try:
            v = eval_expr(Call(f, a), np.zeros(1))
            return const(float(v))
        except DSLError:
            pass
    return Call(f, a)


def diff(expr: Expr, var: Var) -> Expr:
    """Symbolic partial derivative with respect to ``var``."""
    key = (var.kind, var.index)
    return _diff(expr, key)


def _diff(node: Expr, key) -> Expr:
    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Var):
        return ONE if (node.kind, node.index) == key else ZERO
    if isinstance(node, Neg):
        return neg(_diff(node.operand, key))
    if isinstance(node, Call):
        a = node.arg
        da = _diff(a, key)
        if da == ZERO:
            return ZERO
        f = node.func
        if f == "sin":
            outer = call("cos", a)
        elif f == "cos":
            outer = neg(call("sin", a))
        elif f == "exp":
            outer = call("exp", a)
        elif f == "log":
            return div(da, a)
        elif f == "tanh":
            th = call("tanh", a)
            outer = sub(ONE, mul(th, th))
        elif f == "abs":
            outer = Call("sign", a)
        elif f == "sign":
            return ZERO
        else:  # sqrt
            return div(da, mul(const(2.0), call("sqrt", a)))
        return mul(outer, da)
    a, b = node.left, node.right
    da, db = _diff(a, key), _diff(b, key)
    op = node.op
    if op == "+":
        return add(da, db)
    if op == "-":
        return sub(da, db)
    if op == "*":
        return add(mul(da, b), mul(a, db))
    if op == "/":
        return div(sub(mul(da, b), mul(a, db)), mul(b, b))
    # power
    if db == ZERO:
        if da == ZERO:
            return ZERO
        return mul(mul(b, power(a, sub(b, ONE))), da)
    return mul(power(a, b), add(mul(db, call("log", a)), div(mul(b, da), a)))


# ``sign`` is internal: produced only by symbolic differentiation of ``abs``.
_REAL_FUNCS["sign"] = np.sign


def substitute(expr: Expr, mapping: dict) -> Expr:
    """Replace variables; ``mapping`` maps ``(kind, index)`` to an Expr."""
    if isinstance(expr, Var):
        return mapping.get((expr.kind, expr.index), expr)
    if isinstance(expr, Const):
        return expr
    if isinstance(expr, Neg):
        return neg(substitute(expr.operand, mapping))
    if isinstance(expr, Call):
        return call(expr.func, substitute(expr.arg, mapping))
    return _BUILD[expr.op](substitute(expr.left, mapping), substitute(expr.right, mapping))


_BUILD = {"+": add, "-": sub, "*": mul, "/": div, "^": power}


def canonical(expr: Expr) -> Expr:
    """Rebuild through the smart constructors (positions dropped)."""
    return substitute(expr, {})


def is_zero(expr: Expr) -> bool:
    return canonical(expr) == ZERO
