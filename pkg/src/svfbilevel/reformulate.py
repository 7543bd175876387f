"""Single-level SVF and KKT instances built from a bilevel model.

Both instances are NLPs with complementarity over one composite vector
``w``. The SVF instance keeps a separate reference point ``u`` carrying the
lower multipliers ``s``; the KKT instance poses stationarity at ``y``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import expr as ex
from .dsl import BilevelProblem
from .expr import Expr


@dataclass(frozen=True)
class ResidualBreakdown:
    equality_inf_norm: float
    inequality_violation_inf_norm: float
    complementarity_inf_norm: float
    dominance_violation: float

    def max(self) -> float:
        return max(
            self.equality_inf_norm,
            self.inequality_violation_inf_norm,
            self.complementarity_inf_norm,
            self.dominance_violation,
        )

    def feasible(self, tau: float) -> bool:
        return self.max() <= tau


class LowerBlock:
    """Compiled lower-level quantities posed at one block (``u`` or ``y``).

    Supplies values and Jacobians (over the full composite vector) of
    ``grad_v f(x, v)``, ``g(x, v)`` and ``grad_v g_i(x, v)``.
    """

    def __init__(self, prob: BilevelProblem, block: str, layout: dict, n: int):
        self.block = block
        self.l, self.m = prob.l, prob.m
        rename = {"y": block}
        f_v = ex.substitute(prob.f, rename)
        g_v = [ex.substitute(gi, rename) for gi in prob.g]
        self.grad_f = ex.gradient(f_v, block, prob.l)
        self.g = g_v
        self.grad_g = [ex.gradient(gi, block, prob.l) for gi in g_v]
        keys = sorted(layout, key=layout.get)
        self._layout = layout
        self._n = n

        def jac(rows):
            return [ex.diff(r, b, i) for r in rows for (b, i) in keys]

        flat_grad_g = [e for row in self.grad_g for e in row]
        self._values = ex.compile_many(self.grad_f + self.g + flat_grad_g, layout)
        self._jacobians = ex.compile_many(jac(self.grad_f) + jac(self.g) + jac(flat_grad_g), layout)

    def values(self, w):
        """``(grad_f (l,), g (m,), grad_g (m, l))``."""
        out = self._values(w)
        l, m = self.l, self.m
        return out[:l], out[l : l + m], out[l + m :].reshape(m, l)

    def jacobians(self, w):
        """``(d grad_f (l, n), d g (m, n), d grad_g (m, l, n))``."""
        out = self._jacobians(w)
        l, m, n = self.l, self.m, self._n
        a = l * n
        b = a + m * n
        return out[:a].reshape(l, n), out[a:b].reshape(m, n), out[b:].reshape(m, l, n)


@dataclass(eq=False)
class MpecInstance:
    """NLP with complementarity over a composite vector.

    ``inequality_labels`` tags each inequality row: ``("dominance",)``,
    ``("g_y", i)``, ``("g_u", i)``, ``("G", j)`` or ``("s", i)``.
    ``comp_pairs`` holds ``(i, row)`` so that ``0 <= s_i  _|_  -ineq[row] >= 0``.
    """

    kind: str
    prob: BilevelProblem
    blocks: list[tuple[str, int]]
    objective: Expr
    equalities: list[Expr]
    inequalities: list[Expr]
    inequality_labels: list[tuple]
    comp_pairs: list[tuple[int, int]]
    layout: dict = field(repr=False)

    @property
    def n(self) -> int:
        return sum(dim for _, dim in self.blocks)

    @property
    def lower_block(self) -> str:
        return "u" if self.kind == "SVF" else "y"

    @property
    def block_map(self) -> dict[str, tuple[int, int]]:
        """``block -> (offset, dim)``."""
        out, pos = {}, 0
        for name, dim in self.blocks:
            out[name] = (pos, dim)
            pos += dim
        return out

    def split(self, w) -> dict[str, np.ndarray]:
        w = np.asarray(w, dtype=float)
        return {name: w[off : off + dim] for name, (off, dim) in self.block_map.items()}

    def join(self, **parts) -> np.ndarray:
        w = np.zeros(self.n)
        for name, (off, dim) in self.block_map.items():
            if name in parts and parts[name] is not None:
                w[off : off + dim] = np.atleast_1d(np.asarray(parts[name], dtype=float))
        return w

    def _keys(self):
        return sorted(self.layout, key=self.layout.get)

    def _jacobian_exprs(self, rows):
        return [ex.diff(r, b, i) for r in rows for (b, i) in self._keys()]

    @cached_property
    def _objective_fn(self):
        return ex.compile_many([self.objective], self.layout)

    @cached_property
    def _objective_grad_fn(self):
        return ex.compile_many(self._jacobian_exprs([self.objective]), self.layout)

    @cached_property
    def _eq_fn(self):
        return ex.compile_many(self.equalities, self.layout)

    @cached_property
    def _eq_jac_fn(self):
        return ex.compile_many(self._jacobian_exprs(self.equalities), self.layout)

    @cached_property
    def _ineq_fn(self):
        return ex.compile_many(self.inequalities, self.layout)

    @cached_property
    def _ineq_jac_fn(self):
        return ex.compile_many(self._jacobian_exprs(self.inequalities), self.layout)

    @cached_property
    def lower(self) -> LowerBlock:
        return LowerBlock(self.prob, self.lower_block, self.layout, self.n)

    def objective_value(self, w) -> float:
        return float(self._objective_fn(w)[0])

    def objective_grad(self, w) -> np.ndarray:
        return self._objective_grad_fn(w)

    def eq(self, w) -> np.ndarray:
        return self._eq_fn(w)

    def eq_jac(self, w) -> np.ndarray:
        return self._eq_jac_fn(w).reshape(len(self.equalities), self.n)

    def ineq(self, w) -> np.ndarray:
        return self._ineq_fn(w)

    def ineq_jac(self, w) -> np.ndarray:
        return self._ineq_jac_fn(w).reshape(len(self.inequalities), self.n)

    def _hess_exprs(self, e: Expr) -> list[Expr]:
        keys = self._keys()
        n = len(keys)
        out = []
        for a in range(n):
            da = ex.diff(e, *keys[a])
            for b in range(a, n):
                out.append(ex.diff(da, *keys[b]))
        return out

    def _unpack_sym(self, flat) -> np.ndarray:
        n = self.n
        H = np.zeros((n, n))
        H[np.triu_indices(n)] = flat
        return H + np.triu(H, 1).T

    @cached_property
    def _objective_hess_fn(self):
        return ex.compile_many(self._hess_exprs(self.objective), self.layout)

    def objective_hess(self, w) -> np.ndarray:
        return self._unpack_sym(self._objective_hess_fn(w))

    @cached_property
    def _ineq_hess_cache(self) -> dict:
        return {}

    def ineq_hess_weighted(self, w, weights, rows=None) -> np.ndarray:
        """``sum_k weights[k] * hess(ineq[rows[k]])`` from symbolic second derivatives."""
        rows = tuple(range(len(self.inequalities))) if rows is None else tuple(rows)
        fn = self._ineq_hess_cache.get(rows)
        if fn is None:
            exprs = [h for k in rows for h in self._hess_exprs(self.inequalities[k])]
            fn = ex.compile_many(exprs, self.layout)
            self._ineq_hess_cache[rows] = fn
        tri = self.n * (self.n + 1) // 2
        flat = np.asarray(weights, dtype=float) @ fn(w).reshape(len(rows), tri) if rows else np.zeros(tri)
        return self._unpack_sym(flat)

    def rows_labelled(self, tag: str) -> list[int]:
        return [k for k, lab in enumerate(self.inequality_labels) if lab[0] == tag]

    def to_json(self) -> str:
        """Debug dump: blocks, constraint strings and pair indices."""
        payload = {
            "kind": self.kind,
            "problem": self.prob.name,
            "blocks": [{"name": b, "offset": self.block_map[b][0], "dim": d} for b, d in self.blocks],
            "objective": ex.to_text(self.objective),
            "equalities": [ex.to_text(e) for e in self.equalities],
            "inequalities": [
                {"label": list(lab), "expr": ex.to_text(e)}
                for lab, e in zip(self.inequality_labels, self.inequalities)
            ],
            "comp_pairs": [list(p) for p in self.comp_pairs],
        }
        return json.dumps(payload, indent=2)


def _stationarity_rows(prob: BilevelProblem, block: str) -> list[Expr]:
    rename = {"y": block}
    f_v = ex.substitute(prob.f, rename)
    g_v = [ex.substitute(gi, rename) for gi in prob.g]
    rows = []
    for j in range(prob.l):
        row = ex.diff(f_v, block, j)
        for i, gi in enumerate(g_v):
            row = ex.add(row, ex.mul(ex.Var("s", i), ex.diff(gi, block, j)))
        rows.append(row)
    return rows


def build_svf(prob: BilevelProblem) -> MpecInstance:
    """SVF instance over ``w = (x, y, u, s)``, ``n = d + 2l + m``."""
    blocks = [("x", prob.d), ("y", prob.l), ("u", prob.l), ("s", prob.m)]
    layout = ex.make_layout(blocks)
    f_u = ex.substitute(prob.f, {"y": "u"})
    ineqs: list[Expr] = [ex.sub(prob.f, f_u)]
    labels: list[tuple] = [("dominance",)]
    for i, gi in enumerate(prob.g):
        ineqs.append(gi)
        labels.append(("g_y", i))
    comp = []
    for i, gi in enumerate(prob.g):
        comp.append((i, len(ineqs)))
        ineqs.append(ex.substitute(gi, {"y": "u"}))
        labels.append(("g_u", i))
    for j, Gj in enumerate(prob.G):
        ineqs.append(Gj)
        labels.append(("G", j))
    for i in range(prob.m):
        ineqs.append(ex.neg(ex.Var("s", i)))
        labels.append(("s", i))
    return MpecInstance(
        kind="SVF",
        prob=prob,
        blocks=blocks,
        objective=prob.F,
        equalities=_stationarity_rows(prob, "u"),
        inequalities=ineqs,
        inequality_labels=labels,
        comp_pairs=comp,
        layout=layout,
    )


def build_kp(prob: BilevelProblem) -> MpecInstance:
    """KKT instance over ``w = (x, y, s)``, ``n = d + l + m``."""
    blocks = [("x", prob.d), ("y", prob.l), ("s", prob.m)]
    layout = ex.make_layout(blocks)
    ineqs: list[Expr] = []
    labels: list[tuple] = []
    comp = []
    for i, gi in enumerate(prob.g):
        comp.append((i, len(ineqs)))
        ineqs.append(gi)
        labels.append(("g_y", i))
    for j, Gj in enumerate(prob.G):
        ineqs.append(Gj)
        labels.append(("G", j))
    for i in range(prob.m):
        ineqs.append(ex.neg(ex.Var("s", i)))
        labels.append(("s", i))
    return MpecInstance(
        kind="KP",
        prob=prob,
        blocks=blocks,
        objective=prob.F,
        equalities=_stationarity_rows(prob, "y"),
        inequalities=ineqs,
        inequality_labels=labels,
        comp_pairs=comp,
        layout=layout,
    )


def mpec_residual(inst: MpecInstance, w) -> ResidualBreakdown:
    """Feasibility residuals of ``w`` for the unsmoothed instance."""
    w = np.asarray(w, dtype=float)
    if w.shape != (inst.n,):
        raise ValueError(f"expected a vector of length {inst.n}, got shape {w.shape}")
    eq = inst.eq(w)
    ineq = inst.ineq(w)
    dom_rows = inst.rows_labelled("dominance")
    other = [k for k in range(len(ineq)) if k not in dom_rows]
    s = inst.split(w)["s"]
    comp = [abs(s[i] * ineq[row]) for i, row in inst.comp_pairs]
    return ResidualBreakdown(
        equality_inf_norm=float(np.max(np.abs(eq), initial=0.0)),
        inequality_violation_inf_norm=float(np.max(np.maximum(ineq[other], 0.0), initial=0.0)),
        complementarity_inf_norm=float(max(comp, default=0.0)),
        dominance_violation=float(max((max(ineq[k], 0.0) for k in dom_rows), default=0.0)),
    )
