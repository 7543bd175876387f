"""Text format for bilevel problems (``.blp``) and the parsed problem type.

A model declares the two variable blocks, an upper and a lower section and
an optional metadata block::

    var x[1];
    var y[2];
    upper { minimize x[1]^2 - 2*x[1] + 3*y[1] + y[2]; x[1] - 1 <= 0; }
    lower { minimize 0.5*((y[1] - x[1] + 5/8)^2 + (y[2] - 27/8)^2);
            -y[1]^2 + y[2]^2 + 4 <= 0; }
    meta { name = Example; xref = [0]; yref = [-2, 0]; lower_convex = false; }

Constraints may be written ``a <= b`` or ``a >= b``; both are normalized to
``expr <= 0``. ``#`` starts a comment that runs to the end of the line.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import expr as ex
from .expr import BUILTINS, Expr


class ModelError(ValueError):
    """Base class for problems found while reading a model."""


class ParseError(ModelError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


class UndeclaredVariableError(ModelError):
    pass


class DimensionError(ModelError):
    pass


@dataclass(frozen=True)
class BilevelProblem:
    """Validated bilevel model.

    ``G`` rows may depend on ``x`` and ``y``; ``g`` rows are the lower
    level constraints ``g(x, y) <= 0``.
    """

    d: int
    l: int
    F: Expr
    G: tuple[Expr, ...]
    f: Expr
    g: tuple[Expr, ...]
    name: str = "unnamed"
    lower_convex: bool = False
    xref: tuple[float, ...] | None = None
    yref: tuple[float, ...] | None = None
    Fstar: float | None = None
    fstar: float | None = None
    x0: tuple[float, ...] | None = None
    y0: tuple[float, ...] | None = None
    xbox: tuple[tuple[float, float], ...] | None = None
    ybox: tuple[tuple[float, float], ...] | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    @property
    def m(self) -> int:
        return len(self.g)

    @property
    def p(self) -> int:
        return len(self.G)

    @property
    def has_reference(self) -> bool:
        return self.xref is not None and self.yref is not None

    def start(self) -> tuple[np.ndarray, np.ndarray]:
        """Start point from metadata, zeros where absent."""
        x0 = np.array(self.x0, dtype=float) if self.x0 is not None else np.zeros(self.d)
        y0 = np.array(self.y0, dtype=float) if self.y0 is not None else np.zeros(self.l)
        return x0, y0

    def point(self, x, y) -> dict[str, np.ndarray]:
        return {"x": np.atleast_1d(np.asarray(x, dtype=float)), "y": np.atleast_1d(np.asarray(y, dtype=float))}

    def dim(self, block: str) -> int:
        if block == "x":
            return self.d
        if block == "y":
            return self.l
        raise UndeclaredVariableError(f"unknown block {block!r}")

    def evaluate(self, e: Expr, x, y) -> float:
        return ex.evaluate(e, self.point(x, y))

    def gradient_block(self, e: Expr, block: str) -> list[Expr]:
        """Symbolic gradient of ``e`` with respect to one block."""
        return ex.gradient(e, block, self.dim(block))

    def hessian_block(self, e: Expr, row_block: str, col_block: str) -> list[list[Expr]]:
        """Symbolic block ``d/d col (d e / d row)``, shape ``dim(row) x dim(col)``."""
        return ex.hessian(e, row_block, self.dim(row_block), col_block, self.dim(col_block))

    def reference(self) -> tuple[np.ndarray, np.ndarray, float, float]:
        """``(x*, y*, F*, f*)``; objective values are evaluated when not given."""
        if not self.has_reference:
            raise ModelError(f"{self.name}: no reference solution in metadata")
        x, y = np.array(self.xref, dtype=float), np.array(self.yref, dtype=float)
        pt = self.point(x, y)
        F = self.Fstar if self.Fstar is not None else ex.evaluate(self.F, pt)
        f = self.fstar if self.fstar is not None else ex.evaluate(self.f, pt)
        return x, y, float(F), float(f)

    def fingerprint(self) -> str:
        return hashlib.sha256(to_source(self).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<id>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op><=|>=|[-+*/^()\[\]{};,=])
  """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens = []
    line, line_start, pos = 1, 0, 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# recursive-descent parser


class _Parser:
    def __init__(self, source: str):
        self.tokens = tokenize(source)
        self.pos = 0
        self.dims: dict[str, int] = {}

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def error(self, message: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(message, tok.line, tok.col)

    def accept(self, text: str) -> Token | None:
        if self.tok.text == text and self.tok.kind in ("op", "id"):
            tok = self.tok
            self.pos += 1
            return tok
        return None

    def expect(self, text: str) -> Token:
        tok = self.accept(text)
        if tok is None:
            found = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")
        return tok

    # -- top level ----------------------------------------------------------

    def problem(self) -> BilevelProblem:
        while self.tok.text == "var":
            self.declaration()
        for block in ("x", "y"):
            if block not in self.dims:
                raise self.error(f"missing declaration 'var {block}[n]'")
        sections: dict[str, tuple[Expr, list[Expr]]] = {}
        meta: dict[str, Any] = {}
        while self.tok.kind != "eof":
            tok = self.tok
            if tok.text in ("upper", "lower"):
                if tok.text in sections:
                    raise self.error(f"duplicate section {tok.text!r}")
                self.pos += 1
                sections[tok.text] = self.section(tok)
            elif tok.text == "meta":
                self.pos += 1
                meta = self.meta()
            else:
                raise self.error(f"expected 'upper', 'lower' or 'meta', found {tok.text!r}")
        for name in ("upper", "lower"):
            if name not in sections:
                raise ModelError(f"objective missing: no {name!r} section")
        F, G = sections["upper"]
        f, g = sections["lower"]
        return _build(self.dims, F, G, f, g, meta)

    def declaration(self):
        self.expect("var")
        tok = self.tok
        if tok.text not in ("x", "y"):
            raise self.error(f"only blocks 'x' and 'y' can be declared, found {tok.text!r}")
        if tok.text in self.dims:
            raise self.error(f"block {tok.text!r} declared twice")
        self.pos += 1
        self.expect("[")
        n_tok = self.tok
        if n_tok.kind != "num" or not n_tok.text.isdigit() or int(n_tok.text) < 1:
            raise self.error("dimension must be a positive integer")
        self.pos += 1
        self.expect("]")
        self.expect(";")
        self.dims[tok.text] = int(n_tok.text)

    def section(self, head: Token) -> tuple[Expr, list[Expr]]:
        self.expect("{")
        if self.tok.text != "minimize":
            raise ModelError(
                f"objective missing in {head.text!r} section (line {head.line}): "
                f"expected 'minimize', found {self.tok.text!r}"
            )
        self.pos += 1
        objective = self.expr()
        self.expect(";")
        rows = []
        while not self.accept("}"):
            if self.tok.kind == "eof":
                raise self.error("unterminated section")
            lhs = self.expr()
            if self.accept("<="):
                rhs = self.expr()
                rows.append(_normalize(lhs, rhs))
            elif self.accept(">="):
                rhs = self.expr()
                rows.append(_normalize(rhs, lhs))
            else:
                raise self.error("expected '<=' or '>=' in constraint")
            self.expect(";")
        return objective, rows

    def meta(self) -> dict[str, Any]:
        self.expect("{")
        out: dict[str, Any] = {}
        while not self.accept("}"):
            key = self.tok
            if key.kind != "id":
                raise self.error("expected a metadata key")
            self.pos += 1
            self.expect("=")
            out[key.text] = self.meta_value()
            self.expect(";")
        return out

    def meta_value(self):
        if self.accept("["):
            items = []
            if not self.accept("]"):
                items.append(self.meta_value())
                while self.accept(","):
                    items.append(self.meta_value())
                self.expect("]")
            return items
        tok = self.tok
        if tok.kind == "id":
            self.pos += 1
            if tok.text in ("true", "false"):
                return tok.text == "true"
            return tok.text
        value = ex.fold(self.expr())
        if not isinstance(value, ex.Const):
            raise self.error("metadata values must be constant", tok)
        return value.value

    # -- expressions --------------------------------------------------------

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.text in ("+", "-") and self.tok.kind == "op":
            op = self.tok.text
            self.pos += 1
            node = self._binary(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.text in ("*", "/") and self.tok.kind == "op":
            op = self.tok.text
            self.pos += 1
            node = self._binary(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.accept("-"):
            return ex.fold_neg(self.unary())
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        tok = self.tok
        if self.accept("^"):
            exponent = self.unary()
            if not isinstance(exponent, ex.Const) or not float(exponent.value).is_integer():
                raise self.error("exponent must be an integer constant", tok)
            return self._binary("^", base, exponent)
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.pos += 1
            return ex.Const(float(tok.text))
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "id":
            self.pos += 1
            if tok.text in BUILTINS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                try:
                    return ex.fold_call(tok.text, arg)
                except ex.DomainError as exc:
                    raise self.error(str(exc), tok) from None
            if tok.text in ("x", "y"):
                return self.reference(tok)
            if tok.text in ("u", "s"):
                raise UndeclaredVariableError(
                    f"line {tok.line}, column {tok.col}: block {tok.text!r} is derived and cannot appear in a model"
                )
            raise UndeclaredVariableError(f"line {tok.line}, column {tok.col}: undeclared name {tok.text!r}")
        raise self.error(f"unexpected token {tok.text or 'end of input'!r}")

    def reference(self, tok: Token) -> Expr:
        self.expect("[")
        i_tok = self.tok
        if i_tok.kind != "num" or not i_tok.text.isdigit():
            raise self.error("index must be a positive integer")
        self.pos += 1
        self.expect("]")
        index = int(i_tok.text)
        dim = self.dims.get(tok.text)
        if dim is None:
            raise UndeclaredVariableError(f"line {tok.line}, column {tok.col}: block {tok.text!r} not declared")
        if not 1 <= index <= dim:
            raise DimensionError(
                f"line {tok.line}, column {tok.col}: {tok.text}[{index}] outside declared dimension {dim}"
            )
        return ex.Var(tok.text, index - 1)

    def _binary(self, op: str, a: Expr, b: Expr) -> Expr:
        try:
            return ex.fold_binary(op, a, b)
        except ex.DomainError as exc:
            raise self.error(str(exc)) from None


def _normalize(lhs: Expr, rhs: Expr) -> Expr:
    if ex.is_const(rhs, 0.0):
        return lhs
    return ex.fold_binary("-", lhs, rhs)


def _floats(value, key: str, dim: int | None = None) -> tuple[float, ...]:
    items = value if isinstance(value, list) else [value]
    out = tuple(float(v) for v in items)
    if dim is not None and len(out) != dim:
        raise DimensionError(f"metadata {key!r} has length {len(out)}, expected {dim}")
    return out


def _box(value, key: str, dim: int) -> tuple[tuple[float, float], ...]:
    items = value if isinstance(value, list) else [value]
    if len(items) == 2 and not isinstance(items[0], list):
        items = [items] * dim
    if len(items) != dim or any(not isinstance(b, list) or len(b) != 2 for b in items):
        raise DimensionError(f"metadata {key!r} must hold {dim} [lo, hi] pairs")
    return tuple((float(lo), float(hi)) for lo, hi in items)


def _build(dims, F, G, f, g, meta) -> BilevelProblem:
    d, l = dims["x"], dims["y"]
    meta = dict(meta)
    kwargs: dict[str, Any] = {}
    kwargs["name"] = str(meta.pop("name", "unnamed"))
    kwargs["lower_convex"] = bool(meta.pop("lower_convex", False))
    for key, dim in (("xref", d), ("yref", l), ("x0", d), ("y0", l)):
        if key in meta:
            kwargs[key] = _floats(meta.pop(key), key, dim)
    for key in ("Fstar", "fstar"):
        if key in meta:
            kwargs[key] = float(meta.pop(key))
    for key, dim in (("xbox", d), ("ybox", l)):
        if key in meta:
            kwargs[key] = _box(meta.pop(key), key, dim)
    return BilevelProblem(d=d, l=l, F=F, G=tuple(G), f=f, g=tuple(g), extra=meta, **kwargs)


def parse_problem(source: str) -> BilevelProblem:
    """Parse ``.blp`` source text into a :class:`BilevelProblem`."""
    return _Parser(source).problem()


def load_problem(path) -> BilevelProblem:
    return parse_problem(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# rendering


def _meta_text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_meta_text(v) for v in value) + "]"
    if isinstance(value, float):
        return ex.to_text(ex.Const(value))
    return str(value)


def to_source(prob: BilevelProblem, with_meta: bool = True) -> str:
    """Render a problem as ``.blp`` text that parses back to the same trees."""
    lines = [f"var x[{prob.d}];", f"var y[{prob.l}];", "upper {", f"  minimize {ex.to_text(prob.F)};"]
    lines += [f"  {ex.to_text(e)} <= 0;" for e in prob.G]
    lines += ["}", "lower {", f"  minimize {ex.to_text(prob.f)};"]
    lines += [f"  {ex.to_text(e)} <= 0;" for e in prob.g]
    lines.append("}")
    if with_meta:
        items = {"name": prob.name, "lower_convex": prob.lower_convex}
        for key in ("xref", "yref", "Fstar", "fstar", "x0", "y0", "xbox", "ybox"):
            value = getattr(prob, key)
            if value is not None:
                items[key] = value
        items.update(prob.extra)
        lines.append("meta {")
        lines += [f"  {k} = {_meta_text(v)};" for k, v in items.items()]
        lines.append("}")
    return "\n".join(lines) + "\n"


def permute_lower(prob: BilevelProblem, order) -> BilevelProblem:
    """Copy of ``prob`` with lower constraints reordered as ``g[order]``."""
    from dataclasses import replace

    return replace(prob, g=tuple(prob.g[i] for i in order))
