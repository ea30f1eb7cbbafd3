"""Scalar-field expressions with second-order forward-mode derivatives.

Expressions are written over variables ``v1 .. vN`` (optionally also under
user-declared names) and parsed into an immutable tree.  Evaluation pushes
a 2-jet (value, gradient, Hessian) through the tree, so every derivative the
rest of the package needs comes out exact up to rounding.

Grammar (whitespace-insensitive)::

    expr   := term   (('+' | '-') term)*
    term   := unary  (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?            right associative
    atom   := number | 'pi' | 'e' | var
            | func '(' expr ')' | '(' expr ')'
    var    := 'v' digits | declared name
    func   := 'sin' | 'cos' | 'sqrt' | 'exp' | 'log'

The exponent of ``^`` must be a constant expression; it is folded at parse
time.  Integer exponents work for any base, other exponents need a positive
base.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Add", "Call", "Const", "Div", "DomainError", "ExprTree", "Jet2", "Mul",
    "Neg", "ParseError", "Pow", "Sub", "Var", "eval_jet2", "evaluate",
    "parse_expr", "substitute", "to_source",
]

FUNCTIONS = ("sin", "cos", "sqrt", "exp", "log")
CONSTANTS = {"pi": math.pi, "e": math.e}


class ParseError(ValueError):
    """Syntax error; ``offset`` is the UTF-8 byte offset into the source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class DomainError(ArithmeticError):
    """Raised when an evaluation leaves the domain of a subexpression."""

    def __init__(self, message: str, subexpr: "Node"):
        super().__init__(f"{message}: {to_source(subexpr)}")
        self.subexpr = subexpr


# ---------------------------------------------------------------------------
# tree
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ()


@dataclass(frozen=True)
class Const(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    index: int  # zero-based


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class Add(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Sub(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Mul(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Div(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: float


@dataclass(frozen=True)
class Call(Node):
    name: str
    arg: Node


@dataclass(frozen=True)
class ExprTree:
    """A parsed expression together with its declared arity."""

    root: Node
    arity: int

    def __call__(self, x) -> float:
        return eval_jet2(self, x, order=0).value

    def jet(self, x) -> "Jet2":
        return eval_jet2(self, x)

    def to_source(self, names: Sequence[str] | None = None) -> str:
        return to_source(self.root, names)

    def variables(self) -> set[int]:
        out: set[int] = set()
        _collect_vars(self.root, out)
        return out


def _collect_vars(node: Node, out: set[int]) -> None:
    if isinstance(node, Var):
        out.add(node.index)
    elif isinstance(node, (Neg, Call)):
        _collect_vars(node.arg, out)
    elif isinstance(node, Pow):
        _collect_vars(node.base, out)
    elif isinstance(node, (Add, Sub, Mul, Div)):
        _collect_vars(node.left, out)
        _collect_vars(node.right, out)


def to_source(node: Node, names: Sequence[str] | None = None) -> str:
    """Serialize fully parenthesized; re-parsing gives an identical tree.

    Variables print as ``v1, v2, ...`` unless ``names`` is given.
    """
    if isinstance(node, ExprTree):
        node = node.root

    def rec(n):
        if isinstance(n, Const):
            return repr(float(n.value))
        if isinstance(n, Var):
            return names[n.index] if names is not None else f"v{n.index + 1}"
        if isinstance(n, Neg):
            return f"(-{rec(n.arg)})"
        if isinstance(n, Pow):
            return f"({rec(n.base)}^({float(n.exponent)!r}))"
        if isinstance(n, Call):
            return f"{n.name}({rec(n.arg)})"
        op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(n)]
        return f"({rec(n.left)} {op} {rec(n.right)})"

    return rec(node)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


class _Parser:
    def __init__(self, src: str, arity: int, names: dict[str, int]):
        self.src = src
        self.arity = arity
        self.names = names
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(src):
            if src[pos:].strip() == "":
                break
            m = _TOKEN.match(src, pos)
            if m is None or m.end() == pos:
                start = pos + len(src[pos:]) - len(src[pos:].lstrip())
                raise ParseError(f"unexpected character {src[start]!r}", self._bytes(start))
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.tokens.append(("end", "", len(src)))
        self.i = 0

    def _bytes(self, char_pos: int) -> int:
        return len(self.src[:char_pos].encode("utf-8"))

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, val, pos = self.take()
        if val != text or kind == "end":
            what = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {text!r}, found {what}", self._bytes(pos))

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", self._bytes(pos))
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def unary(self) -> Node:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            _, _, pos = self.take()
            exponent = self.unary()
            value = _fold_constant(exponent)
            if value is None:
                raise ParseError("exponent must be a constant expression", self._bytes(pos))
            return Pow(base, value)
        return base

    def atom(self) -> Node:
        kind, val, pos = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            if val in self.names:
                return Var(self.names[val])
            m = re.fullmatch(r"v(\d+)", val)
            if m:
                k = int(m.group(1))
                if not 1 <= k <= self.arity:
                    raise ParseError(
                        f"variable {val} out of range for arity {self.arity}", self._bytes(pos)
                    )
                return Var(k - 1)
            if val in CONSTANTS:
                return Const(CONSTANTS[val])
            raise ParseError(f"unknown identifier {val!r}", self._bytes(pos))
        if kind == "end":
            raise ParseError("unexpected end of input", self._bytes(pos))
        raise ParseError(f"unexpected token {val!r}", self._bytes(pos))


def _fold_constant(node: Node) -> float | None:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return None
    if isinstance(node, Neg):
        a = _fold_constant(node.arg)
        return None if a is None else -a
    if isinstance(node, Pow):
        a = _fold_constant(node.base)
        return None if a is None else a ** node.exponent
    if isinstance(node, Call):
        a = _fold_constant(node.arg)
        return None if a is None else getattr(math, node.name)(a)
    a, b = _fold_constant(node.left), _fold_constant(node.right)
    if a is None or b is None:
        return None
    if isinstance(node, Add):
        return a + b
    if isinstance(node, Sub):
        return a - b
    if isinstance(node, Mul):
        return a * b
    return a / b


def parse_expr(src: str, arity: int, names: Sequence[str] | None = None) -> ExprTree:
    """Parse ``src`` into an :class:`ExprTree` over ``arity`` variables.

    ``names`` optionally gives identifiers for the variables in order; the
    positional ``vK`` spelling is always accepted as well.
    """
    if isinstance(src, bytes):
        src = src.decode("utf-8")
    if arity < 1:
        raise ValueError("arity must be >= 1")
    table: dict[str, int] = {}
    if names is not None:
        if len(names) != arity:
            raise ValueError("names must have one entry per variable")
        for i, nm in enumerate(names):
            if nm in FUNCTIONS or nm in CONSTANTS:
                raise ValueError(f"variable name {nm!r} is reserved")
            table[nm] = i
    return ExprTree(_Parser(src, arity, table).parse(), arity)


def substitute(tree: ExprTree, args: Sequence[ExprTree]) -> ExprTree:
    """Compose: replace variable ``k`` of ``tree`` by ``args[k]``."""
    if len(args) != tree.arity:
        raise ValueError("need one replacement per variable")
    arity = {a.arity for a in args}
    if len(arity) != 1:
        raise ValueError("replacements must share one arity")

    def go(node: Node) -> Node:
        if isinstance(node, Var):
            return args[node.index].root
        if isinstance(node, Const):
            return node
        if isinstance(node, Neg):
            return Neg(go(node.arg))
        if isinstance(node, Call):
            return Call(node.name, go(node.arg))
        if isinstance(node, Pow):
            return Pow(go(node.base), node.exponent)
        return type(node)(go(node.left), go(node.right))

    return ExprTree(go(tree.root), arity.pop())


# ---------------------------------------------------------------------------
# 2-jets
# ---------------------------------------------------------------------------

@dataclass
class Jet2:
    """Value, gradient and (exactly symmetric) Hessian at one or many points.

    For a single point ``value`` is a float, ``grad`` has shape (N,) and
    ``hess`` (N, N); batched evaluation adds a leading axis everywhere.
    """

    value: float | np.ndarray
    grad: np.ndarray | None
    hess: np.ndarray | None


class _Ctx:
    def __init__(self, x: np.ndarray, order: int, errors: str):
        self.x = x
        self.order = order
        self.errors = errors
        self.batch, self.n = x.shape

    def violation(self, bad: np.ndarray, what: str, node: Node) -> np.ndarray | None:
        """Returns a NaN mask (or raises) for points outside the domain."""
        if not np.any(bad):
            return None
        if self.errors == "raise":
            raise DomainError(what, node)
        return bad


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[:, :, None] * b[:, None, :]


def _sym_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a_i b_j + b_i a_j is bitwise symmetric since * and + commute in IEEE
    return _outer(a, b) + _outer(b, a)


def _add(x, y):
    if x is None:
        return y
    if y is None:
        return x
    return x + y


def _scale(c: np.ndarray, x, extra: int):
    if x is None:
        return None
    return c.reshape(c.shape + (1,) * extra) * x


def _ipow(x: np.ndarray, k: int) -> np.ndarray:
    """x**k for integer k by repeated squaring."""
    if k < 0:
        return 1.0 / _ipow(x, -k)
    result = np.ones_like(x)
    base = x
    while k:
        if k & 1:
            result = result * base
        k >>= 1
        if k:
            base = base * base
    return result


def _chain(ctx: _Ctx, u, d0, d1, d2):
    v, g, h = u
    gout = _scale(d1, g, 1) if ctx.order >= 1 else None
    hout = None
    if ctx.order >= 2 and g is not None:
        hout = _add(_scale(d1, h, 2), _scale(d2, _outer(g, g), 2))
    return d0, gout, hout


def _eval(node: Node, ctx: _Ctx):
    if isinstance(node, Const):
        return np.full(ctx.batch, node.value), None, None
    if isinstance(node, Var):
        v = ctx.x[:, node.index].copy()
        g = None
        if ctx.order >= 1:
            g = np.zeros((ctx.batch, ctx.n))
            g[:, node.index] = 1.0
        return v, g, None
    if isinstance(node, Neg):
        v, g, h = _eval(node.arg, ctx)
        return -v, None if g is None else -g, None if h is None else -h
    if isinstance(node, (Add, Sub)):
        va, ga, ha = _eval(node.left, ctx)
        vb, gb, hb = _eval(node.right, ctx)
        if isinstance(node, Sub):
            vb = -vb
            gb = None if gb is None else -gb
            hb = None if hb is None else -hb
        return va + vb, _add(ga, gb), _add(ha, hb)
    if isinstance(node, Mul):
        return _mul(_eval(node.left, ctx), _eval(node.right, ctx), ctx)
    if isinstance(node, Div):
        a = _eval(node.left, ctx)
        b = _eval(node.right, ctx)
        vb = b[0]
        bad = ctx.violation(vb == 0.0, "division by zero", node.right)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / vb
            recip = _chain(ctx, b, inv, -inv * inv, 2.0 * inv * inv * inv)
        out = _mul(a, recip, ctx)
        return _mask(out, bad)
    if isinstance(node, Pow):
        return _pow(node, _eval(node.base, ctx), ctx)
    if isinstance(node, Call):
        u = _eval(node.arg, ctx)
        return _call(node, u, ctx)
    raise TypeError(f"not an expression node: {node!r}")


def _mask(jet, bad):
    if bad is None:
        return jet
    v, g, h = jet
    v = np.where(bad, np.nan, v)
    if g is not None:
        g = np.where(bad[:, None], np.nan, g)
    if h is not None:
        h = np.where(bad[:, None, None], np.nan, h)
    return v, g, h


def _mul(a, b, ctx: _Ctx):
    va, ga, ha = a
    vb, gb, hb = b
    v = va * vb
    g = _add(_scale(va, gb, 1), _scale(vb, ga, 1)) if ctx.order >= 1 else None
    h = None
    if ctx.order >= 2:
        h = _add(_scale(va, hb, 2), _scale(vb, ha, 2))
        if ga is not None and gb is not None:
            h = _add(h, _sym_outer(ga, gb))
    return v, g, h


def _pow(node: Pow, u, ctx: _Ctx):
    p = node.exponent
    x = u[0]
    if float(p).is_integer():
        k = int(p)
        if k == 0:
            return np.ones(ctx.batch), None, None
        if k == 1:
            return u
        bad = ctx.violation((x == 0.0) & (k < 0), "negative power of zero", node.base)
        with np.errstate(divide="ignore", invalid="ignore"):
            d0 = _ipow(x, k)
            d1 = k * _ipow(x, k - 1)
            d2 = k * (k - 1) * _ipow(x, k - 2) if k != 2 else np.full_like(x, 2.0)
        return _mask(_chain(ctx, u, d0, d1, d2), bad)
    bad = ctx.violation(~(x > 0.0), "non-integer power of non-positive base", node.base)
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = np.power(x, p)
        d1 = p * np.power(x, p - 1.0)
        d2 = p * (p - 1.0) * np.power(x, p - 2.0)
    return _mask(_chain(ctx, u, d0, d1, d2), bad)


def _call(node: Call, u, ctx: _Ctx):
    x = u[0]
    name = node.name
    bad = None
    with np.errstate(divide="ignore", invalid="ignore"):
        if name == "sin":
            s, c = np.sin(x), np.cos(x)
            out = _chain(ctx, u, s, c, -s)
        elif name == "cos":
            s, c = np.sin(x), np.cos(x)
            out = _chain(ctx, u, c, -s, -c)
        elif name == "exp":
            e = np.exp(x)
            out = _chain(ctx, u, e, e, e)
        elif name == "log":
            bad = ctx.violation(~(x > 0.0), "log of non-positive value", node.arg)
            out = _chain(ctx, u, np.log(x), 1.0 / x, -1.0 / (x * x))
        elif name == "sqrt":
            # derivatives blow up at 0, so 0 is only allowed for plain values
            cond = ~(x >= 0.0) if ctx.order == 0 or u[1] is None else ~(x > 0.0)
            bad = ctx.violation(cond, "sqrt outside its domain", node.arg)
            r = np.sqrt(x)
            out = _chain(ctx, u, r, 0.5 / r, -0.25 / (r * x))
        else:  # pragma: no cover - parser rejects unknown names
            raise ValueError(name)
    return _mask(out, bad)


def evaluate(tree: ExprTree, points, order: int = 2, errors: str = "raise") -> Jet2:
    """Batched evaluation at ``points`` of shape (B, N).

    ``errors='nan'`` marks out-of-domain rows with NaN instead of raising.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[1] != tree.arity:
        raise ValueError(f"expected points of shape (B, {tree.arity}), got {x.shape}")
    if errors not in ("raise", "nan"):
        raise ValueError("errors must be 'raise' or 'nan'")
    ctx = _Ctx(x, order, errors)
    v, g, h = _eval(tree.root, ctx)
    b, n = x.shape
    if order >= 1 and g is None:
        g = np.zeros((b, n))
    if order >= 2 and h is None:
        h = np.zeros((b, n, n))
    return Jet2(np.asarray(v, dtype=float), g if order >= 1 else None, h if order >= 2 else None)


def eval_jet2(tree: ExprTree, x, order: int = 2) -> Jet2:
    """Value, gradient and Hessian of ``tree`` at the single point ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (tree.arity,):
        raise ValueError(f"point must have length {tree.arity}")
    jet = evaluate(tree, x[None, :], order=order)
    return Jet2(
        float(jet.value[0]),
        None if jet.grad is None else jet.grad[0],
        None if jet.hess is None else jet.hess[0],
    )
