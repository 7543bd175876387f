"""Immutable expression trees with exact symbolic differentiation.

Nodes are frozen dataclasses so structurally identical trees compare equal
and hash alike. Variables are addressed by ``(block, index)`` with a
0-based index; the text format uses 1-based indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

BUILTINS = ("sin", "cos", "exp", "log", "sqrt")
BINARY_OPS = ("+", "-", "*", "/", "^")


class DomainError(ArithmeticError):
    """Raised when evaluation leaves the domain of an operation."""

    def __init__(self, message: str, node: "Expr | None" = None):
        super().__init__(message)
        self.node = node


class Expr:
    """Base class of all expression nodes."""

    __slots__ = ()

    # operator sugar, used heavily when assembling derived rows
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __str__(self):
        return to_text(self)


@dataclass(frozen=True, eq=True, slots=True)
class Const(Expr):
    value: float

    @property
    def kind(self):
        return "constant"


@dataclass(frozen=True, eq=True, slots=True)
class Var(Expr):
    block: str
    index: int

    @property
    def kind(self):
        return "variable"


@dataclass(frozen=True, eq=True, slots=True)
class Neg(Expr):
    arg: Expr

    @property
    def kind(self):
        return "unary"


@dataclass(frozen=True, eq=True, slots=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    @property
    def kind(self):
        return "binary"


@dataclass(frozen=True, eq=True, slots=True)
class Call(Expr):
    func: str
    arg: Expr

    @property
    def kind(self):
        return "builtin"


ZERO = Const(0.0)
ONE = Const(1.0)


def _wrap(value) -> Expr:
    if isinstance(value, Expr):
        return value
    return Const(float(value))


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, Neg | Call):
        return (e.arg,)
    if isinstance(e, Binary):
        return (e.left, e.right)
    return ()


def is_const(e: Expr, value: float | None = None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


# ---------------------------------------------------------------------------
# scalar kernels shared by folding and evaluation


def _apply_binary(op: str, a: float, b: float) -> float:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0.0:
            raise DomainError("division by zero")
        return a / b
    if op == "^":
        if a == 0.0 and b < 0:
            raise DomainError("zero raised to a negative power")
        try:
            return float(a ** int(b)) if float(b).is_integer() else math.pow(a, b)
        except (OverflowError, ValueError) as exc:
            raise DomainError(f"power: {exc}") from None
    raise ValueError(f"unknown operator {op!r}")


def _apply_call(func: str, a: float) -> float:
    if func == "log":
        if a <= 0.0:
            raise DomainError(f"log of nonpositive value {a!r}")
        return math.log(a)
    if func == "sqrt":
        if a < 0.0:
            raise DomainError(f"sqrt of negative value {a!r}")
        return math.sqrt(a)
    try:
        return getattr(math, func)(a)
    except OverflowError:
        raise DomainError(f"{func} overflow at {a!r}") from None


# ---------------------------------------------------------------------------
# constructors. The "fold" family only folds all-constant subtrees, which is
# bit-exact; the simplifying family also drops additive zeros and unit
# factors and is used when building derivatives.


def fold_neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    return Neg(a)


def fold_binary(op: str, a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(_apply_binary(op, a.value, b.value))
    return Binary(op, a, b)


def fold_call(func: str, a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(_apply_call(func, a.value))
    return Call(func, a)


def fold(e: Expr) -> Expr:
    """Fold every all-constant subtree of ``e``."""
    if isinstance(e, Neg):
        return fold_neg(fold(e.arg))
    if isinstance(e, Binary):
        return fold_binary(e.op, fold(e.left), fold(e.right))
    if isinstance(e, Call):
        return fold_call(e.func, fold(e.arg))
    return e


def neg(a: Expr) -> Expr:
    if isinstance(a, Neg):
        return a.arg
    if is_const(a, 0.0):
        return ZERO
    return fold_neg(a)


def add(a: Expr, b: Expr) -> Expr:
    if is_const(a, 0.0):
        return b
    if is_const(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return fold_binary("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if is_const(b, 0.0):
        return a
    if is_const(a, 0.0):
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.arg)
    return fold_binary("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if is_const(a, 0.0) or is_const(b, 0.0):
        return ZERO
    if is_const(a, 1.0):
        return b
    if is_const(b, 1.0):
        return a
    if is_const(a, -1.0):
        return neg(b)
    if is_const(b, -1.0):
        return neg(a)
    if isinstance(a, Neg) and isinstance(b, Neg):
        return mul(a.arg, b.arg)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    if isinstance(b, Const) and not isinstance(a, Const):
        a, b = b, a
    return fold_binary("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if is_const(a, 0.0):
        return ZERO
    if is_const(b, 1.0):
        return a
    return fold_binary("/", a, b)


def power(a: Expr, n: float) -> Expr:
    if n == 0:
        return ONE
    if n == 1:
        return a
    return fold_binary("^", a, Const(float(n)))


def call(func: str, a: Expr) -> Expr:
    return fold_call(func, a)


# ---------------------------------------------------------------------------
# structural queries


def variables(e: Expr) -> set[tuple[str, int]]:
    out: set[tuple[str, int]] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add((node.block, node.index))
        stack.extend(children(node))
    return out


def blocks(e: Expr) -> set[str]:
    return {b for b, _ in variables(e)}


def depends_on(e: Expr, block: str) -> bool:
    return block in blocks(e)


def substitute(e: Expr, mapping: Mapping[str, str]) -> Expr:
    """Rename variable blocks, e.g. ``{"y": "u"}``."""
    if isinstance(e, Var):
        return Var(mapping.get(e.block, e.block), e.index)
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, mapping))
    if isinstance(e, Binary):
        return Binary(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, mapping))
    return e


def size(e: Expr) -> int:
    return 1 + sum(size(c) for c in children(e))


# ---------------------------------------------------------------------------
# differentiation


def diff(e: Expr, block: str, index: int) -> Expr:
    """Partial derivative of ``e`` with respect to variable ``(block, index)``."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if (e.block == block and e.index == index) else ZERO
    if isinstance(e, Neg):
        return neg(diff(e.arg, block, index))
    if isinstance(e, Binary):
        a, b = e.left, e.right
        da = diff(a, block, index)
        if e.op == "^":
            if not isinstance(b, Const):
                raise ValueError("only constant exponents are supported")
            n = b.value
            return mul(mul(Const(n), power(a, n - 1)), da)
        db = diff(b, block, index)
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, b), mul(a, db))
        if e.op == "/":
            if is_const(db, 0.0):
                return div(da, b)
            return sub(div(da, b), div(mul(a, db), power(b, 2)))
        raise ValueError(f"unknown operator {e.op!r}")
    if isinstance(e, Call):
        a = e.arg
        da = diff(a, block, index)
        if is_const(da, 0.0):
            return ZERO
        if e.func == "sin":
            return mul(call("cos", a), da)
        if e.func == "cos":
            return neg(mul(call("sin", a), da))
        if e.func == "exp":
            return mul(e, da)
        if e.func == "log":
            return div(da, a)
        if e.func == "sqrt":
            return div(da, mul(Const(2.0), e))
        raise ValueError(f"unknown builtin {e.func!r}")
    raise TypeError(f"not an expression: {e!r}")


def gradient(e: Expr, block: str, dim: int) -> list[Expr]:
    return [diff(e, block, i) for i in range(dim)]


def hessian(e: Expr, row_block: str, row_dim: int, col_block: str, col_dim: int) -> list[list[Expr]]:
    """Second-derivative block ``d^2 e / d row d col``."""
    grad = gradient(e, row_block, row_dim)
    return [[diff(g, col_block, j) for j in range(col_dim)] for g in grad]


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expr, point: Mapping[str, Sequence[float]]) -> float:
    """Tree-walking evaluation in 64-bit floats.

    Domain errors carry the offending node.
    """
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return float(point[e.block][e.index])
    if isinstance(e, Neg):
        return -evaluate(e.arg, point)
    if isinstance(e, Binary):
        a = evaluate(e.left, point)
        b = evaluate(e.right, point)
        try:
            return _apply_binary(e.op, a, b)
        except DomainError as exc:
            raise DomainError(f"{exc} in {to_text(e)}", e) from None
    if isinstance(e, Call):
        a = evaluate(e.arg, point)
        try:
            return _apply_call(e.func, a)
        except DomainError as exc:
            raise DomainError(f"{exc} in {to_text(e)}", e) from None
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# code generation. Compiled functions read a flat vector through a layout
# mapping (block, index) -> position.


def _codegen(e: Expr, names: Mapping[tuple[str, int], str], ns: str, memo: dict, lines: list) -> str:
    key = e
    if key in memo:
        return memo[key]
    if isinstance(e, Const):
        out = repr(e.value)
        if e.value < 0 or not math.isfinite(e.value):
            out = f"({out})" if math.isfinite(e.value) else f"float({str(e.value)!r})"
        memo[key] = out
        return out
    if isinstance(e, Var):
        out = names[(e.block, e.index)]
        memo[key] = out
        return out
    if isinstance(e, Neg):
        inner = f"(-{_codegen(e.arg, names, ns, memo, lines)})"
    elif isinstance(e, Binary):
        a = _codegen(e.left, names, ns, memo, lines)
        b = _codegen(e.right, names, ns, memo, lines)
        if e.op == "^":
            n = e.right.value  # type: ignore[union-attr]
            b = repr(int(n)) if float(n).is_integer() else repr(n)
            if ns == "np":
                inner = f"np.power({a}, {b})"
            elif float(n).is_integer():
                inner = f"({a} ** {b})"
            else:
                inner = f"math.pow({a}, {b})"
        else:
            inner = f"({a} {e.op} {b})"
    elif isinstance(e, Call):
        a = _codegen(e.arg, names, ns, memo, lines)
        inner = f"{ns}.{e.func}({a})"
    else:
        raise TypeError(f"not an expression: {e!r}")
    tmp = f"t{len(memo)}"
    lines.append(f"    {tmp} = {inner}")
    memo[key] = tmp
    return tmp


def compile_many(
    exprs: Sequence[Expr],
    layout: Mapping[tuple[str, int], int],
    vectorized: bool = False,
) -> Callable:
    """Compile ``exprs`` into one function of a flat vector.

    The scalar variant takes a 1-D sequence and returns a float ndarray of
    ``len(exprs)``; math errors surface as :class:`DomainError`. The
    vectorized variant takes an array whose *first* axis runs over the
    layout and returns an array of shape ``(len(exprs),) + rest``; domain
    violations become ``nan`` or ``inf`` there.
    """
    ns = "np" if vectorized else "math"
    names = {key: f"v{pos}" for key, pos in layout.items()}
    used = set()
    for e in exprs:
        used |= variables(e)
    missing = used - set(names)
    if missing:
        raise KeyError(f"variables outside layout: {sorted(missing)}")
    memo: dict = {}
    lines: list[str] = []
    outs = [_codegen(e, names, ns, memo, lines) for e in exprs]
    head = [f"    v{layout[k]} = w[{layout[k]}]" for k in sorted(used, key=lambda k: layout[k])]
    src = ["def _f(w):"]
    if not vectorized:
        src.append("    w = list(w)" if head else "    pass")
    src += head + lines
    if vectorized:
        src.append("    _shape = np.shape(w)[1:]")
        src.append(f"    return np.stack([np.broadcast_to(np.asarray(o, dtype=float), _shape) for o in [{', '.join(outs)}]]) if {len(outs)} else np.zeros((0,) + _shape)")
    else:
        src.append(f"    return [{', '.join(outs)}]")
    env = {"math": math, "np": np}
    exec(compile("\n".join(src), "<svfbilevel-expr>", "exec"), env)
    raw = env["_f"]
    if vectorized:
        return raw

    def scalar_fn(w):
        try:
            return np.asarray(raw(w), dtype=float)
        except ZeroDivisionError:
            raise DomainError("division by zero") from None
        except (ValueError, OverflowError) as exc:
            raise DomainError(str(exc)) from None

    return scalar_fn


def compile_expr(e: Expr, layout: Mapping[tuple[str, int], int]) -> Callable[[Sequence[float]], float]:
    fn = compile_many([e], layout)
    return lambda w: float(fn(w)[0])


def make_layout(dims: Iterable[tuple[str, int]]) -> dict[tuple[str, int], int]:
    """Consecutive layout for ``[(block, dim), ...]``."""
    layout = {}
    pos = 0
    for block, dim in dims:
        for i in range(dim):
            layout[(block, i)] = pos
            pos += 1
    return layout


# ---------------------------------------------------------------------------
# text rendering that re-parses to the identical tree

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return _PREC["neg"]
    if isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _PREC["neg"]
    return 10


def _num(v: float) -> str:
    if v == 0.0 and math.copysign(1.0, v) > 0:
        return "0"
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v)) if v != 0.0 else "-0.0"
    return repr(v)


def to_text(e: Expr) -> str:
    if isinstance(e, Const):
        return _num(e.value)
    if isinstance(e, Var):
        return f"{e.block}[{e.index + 1}]"
    if isinstance(e, Neg):
        inner = to_text(e.arg)
        if _prec(e.arg) < _PREC["neg"] or isinstance(e.arg, Neg) or (isinstance(e.arg, Const) and _prec(e.arg) == _PREC["neg"]):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Binary):
        p = _PREC[e.op]
        left, right = to_text(e.left), to_text(e.right)
        if e.op == "^":
            if _prec(e.left) <= p:
                left = f"({left})"
            if _prec(e.right) < p:
                right = f"({right})"
            return f"{left}^{right}"
        if _prec(e.left) < p:
            left = f"({left})"
        if _prec(e.right) <= p:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    if isinstance(e, Call):
        return f"{e.func}({to_text(e.arg)})"
    raise TypeError(f"not an expression: {e!r}")
