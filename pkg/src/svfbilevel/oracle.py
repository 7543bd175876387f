"""Brute-force ground truth: value function, global bilevel solutions, derivative audits.

Grids are built as ``lo + (hi - lo) * i / (N - 1)`` so that box centres and
other dyadic points are hit exactly. Grid minima are polished with SLSQP and
a polished point is kept only when it stays feasible and does not increase
the objective, so isolated feasible points survive polishing. A move shorter
than the cluster radius away from an exactly feasible grid point is
discarded, since it can only exploit the feasibility tolerance.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import expr as ex
from .dsl import BilevelProblem
from .expr import DomainError, Expr
from .smoothing import shift, shift_derivatives

DEFAULT_HALF_WIDTH = 10.0
MAX_GRID_POINTS = 2_000_000


class OracleError(ValueError):
    """Dimension too large or empty feasible set."""


@dataclass(frozen=True)
class GridSpec:
    resolution: int = 201
    rounds: int = 3
    shrink: float = 0.1
    feas_tol: float = 1e-9
    value_tol: float = 1e-6
    cluster_radius: float = 1e-4
    outer_resolution: int | None = None
    xbox: tuple | None = None
    ybox: tuple | None = None

    def __post_init__(self):
        if self.resolution < 3:
            raise ValueError("resolution must be at least 3")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        for box in (self.xbox, self.ybox):
            if box is not None and not all(math.isfinite(v) for pair in box for v in pair):
                raise ValueError("boxes must be finite")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=list).encode()).hexdigest()[:16]


def _box(prob_box, override, dim):
    box = override if override is not None else prob_box
    if box is None:
        return np.array([[-DEFAULT_HALF_WIDTH, DEFAULT_HALF_WIDTH]] * dim, dtype=float)
    return np.array(box, dtype=float).reshape(dim, 2)


def _axes(box: np.ndarray, n: int) -> list[np.ndarray]:
    i = np.arange(n)
    return [lo + (hi - lo) * i / (n - 1) for lo, hi in box]


@dataclass(frozen=True)
class ValueResult:
    V: float
    argmins: tuple  # tuple of y arrays, one per cluster
    grid_points: int


@dataclass(frozen=True)
class GlobalResult:
    x: np.ndarray
    y: np.ndarray
    F: float
    f: float
    V: float

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "y": self.y.tolist(), "F": self.F, "f": self.f, "V": self.V}

    @classmethod
    def from_dict(cls, data: dict) -> "GlobalResult":
        return cls(np.array(data["x"]), np.array(data["y"]), data["F"], data["f"], data["V"])


class _Compiled:
    """Compiled lower and upper quantities over the layout ``(x, y)``."""

    def __init__(self, prob: BilevelProblem):
        self.prob = prob
        self.layout = ex.make_layout([("x", prob.d), ("y", prob.l)])
        keys_y = [("y", j) for j in range(prob.l)]
        self.f_vec = ex.compile_many([prob.f], self.layout, vectorized=True)
        self.g_vec = ex.compile_many(list(prob.g), self.layout, vectorized=True)
        self.f = ex.compile_many([prob.f], self.layout)
        self.f_grad = ex.compile_many([ex.diff(prob.f, *k) for k in keys_y], self.layout)
        self.g = ex.compile_many(list(prob.g), self.layout)
        self.g_jac = ex.compile_many([ex.diff(gi, *k) for gi in prob.g for k in keys_y], self.layout)
        self.F = ex.compile_many([prob.F], self.layout)
        self.G = ex.compile_many(list(prob.G), self.layout)

    def w(self, x, y):
        return np.concatenate([np.atleast_1d(x), np.atleast_1d(y)])


def _lower_feasible(c: _Compiled, x, y, tol) -> bool:
    try:
        return bool(np.all(c.g(c.w(x, y)) <= tol))
    except DomainError:
        return False


def _polish(c: _Compiled, x, y0, box, tol, radius, start_feasible=True):
    """Local lower-level refinement; returns ``(y, f)`` no worse than the start.

    From an infeasible start the result is returned only when it is feasible;
    otherwise ``None``.
    """
    prob = c.prob
    f0 = float(c.f(c.w(x, y0))[0])
    l = prob.l

    def fun(y):
        return float(c.f(c.w(x, y))[0])

    def jac(y):
        return c.f_grad(c.w(x, y))

    cons = []
    if prob.m:
        cons.append(
            {
                "type": "ineq",
                "fun": lambda y: -c.g(c.w(x, y)),
                "jac": lambda y: -c.g_jac(c.w(x, y)).reshape(prob.m, l),
            }
        )
    try:
        res = minimize(fun, y0, jac=jac, constraints=cons, bounds=[tuple(b) for b in box], method="SLSQP",
                       options={"ftol": 1e-15, "maxiter": 200})
        y1 = np.clip(res.x, box[:, 0], box[:, 1])
        f1 = fun(y1)
    except (DomainError, ValueError, FloatingPointError):
        return (y0, f0) if start_feasible else None
    if not start_feasible:
        return (y1, f1) if np.isfinite(f1) and _lower_feasible(c, x, y1, tol) else None
    if not (np.isfinite(f1) and f1 <= f0 and _lower_feasible(c, x, y1, tol)):
        return y0, f0
    # a tiny move off an exactly feasible point only exploits the tolerance
    if np.linalg.norm(y1 - y0) <= radius and _lower_feasible(c, x, y0, 0.0):
        return y0, f0
    return y1, f1


def _cluster(points, values, radius):
    order = np.argsort(values, kind="stable")
    reps: list[np.ndarray] = []
    for k in order:
        if all(np.linalg.norm(points[k] - r) > radius for r in reps):
            reps.append(points[k])
    return reps


def _grid_candidates(c: _Compiled, x, box, n, keep=8):
    """Feasible grid points that are discrete local minima, best first.

    When no grid point is feasible (a lower feasible set thinner than the
    grid), the least-violating points are returned instead, flagged by a
    false third element.
    """
    prob = c.prob
    axes = _axes(box, n)
    mesh = np.meshgrid(*axes, indexing="ij")
    shape = mesh[0].shape
    xs = [np.full(shape, xi) for xi in np.atleast_1d(x)]
    W = np.stack(xs + list(mesh))
    with np.errstate(all="ignore"):
        fv = c.f_vec(W)[0]
        feasible = np.isfinite(fv)
        if prob.m:
            gv = c.g_vec(W)
            feasible &= np.all(gv <= 0.0, axis=0)
    if not feasible.any():
        if not prob.m:
            return [], 0, True
        with np.errstate(all="ignore"):
            viol = np.where(np.isfinite(fv), np.max(gv, axis=0), np.inf).ravel()
        picks = [int(k) for k in np.argsort(viol, kind="stable")[:keep] if np.isfinite(viol[k])]
        return [np.array([a.ravel()[k] for a in mesh]) for k in picks], int(np.prod(shape)), False
    fm = np.where(feasible, fv, np.inf)
    local = feasible.copy()
    for ax in range(prob.l):
        for step in (1, -1):
            nb = np.roll(fm, step, axis=ax)
            edge = [slice(None)] * prob.l
            edge[ax] = 0 if step == 1 else -1
            nb[tuple(edge)] = np.inf
            local &= fm <= nb
    idx = np.flatnonzero(local.ravel())
    idx = idx[np.argsort(fm.ravel()[idx], kind="stable")][:keep]
    best = np.argsort(fm.ravel(), kind="stable")[:keep]
    picks = list(dict.fromkeys(list(idx) + [int(b) for b in best if np.isfinite(fm.ravel()[b])]))
    pts = [np.array([a.ravel()[k] for a in mesh]) for k in picks]
    return pts, int(np.prod(shape)), True


def _resolution(spec: GridSpec, dim: int) -> int:
    n = spec.resolution
    while n**dim > MAX_GRID_POINTS and n > 3:
        n = (n - 1) // 2 + 1
    return n


def _value(c: _Compiled, x, spec: GridSpec) -> ValueResult:
    prob = c.prob
    box = _box(prob.ybox, spec.ybox, prob.l)
    cands, count, on_grid = _grid_candidates(c, x, box, _resolution(spec, prob.l))
    polished = [_polish(c, x, y, box, spec.feas_tol, spec.cluster_radius, on_grid) for y in cands]
    polished = [p for p in polished if p is not None]
    if not polished:
        raise OracleError(f"no feasible lower-level point found at x={np.atleast_1d(x).tolist()}")
    ys = np.array([p[0] for p in polished])
    fs = np.array([p[1] for p in polished])
    V = float(fs.min())
    near = fs <= V + spec.value_tol
    reps = _cluster(ys[near], fs[near], spec.cluster_radius)
    return ValueResult(V, tuple(reps), count)


def value_function(prob: BilevelProblem, x, spec: GridSpec | None = None) -> ValueResult:
    """``V(x)`` and one representative per cluster of global lower solutions."""
    spec = spec or GridSpec()
    if prob.l > 3:
        raise OracleError("value_function supports l <= 3")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (prob.d,):
        raise ValueError(f"x must have length {prob.d}")
    return _value(_Compiled(prob), x, spec)


def _best_at(c: _Compiled, x, spec: GridSpec):
    """Optimistic upper objective over ``S(x)``; ``None`` when nothing qualifies."""
    try:
        vr = _value(c, x, spec)
    except OracleError:
        return None
    best = None
    for y in vr.argmins:
        w = c.w(x, y)
        if c.prob.p and np.any(c.G(w) > 1e-9):
            continue
        F = float(c.F(w)[0])
        if best is None or F < best[0]:
            best = (F, y, vr.V)
    return best


def global_solve(prob: BilevelProblem, spec: GridSpec | None = None, cache: "OracleCache | None" = None) -> GlobalResult:
    """Grid search over ``x`` with refinement around the incumbent."""
    spec = spec or GridSpec()
    if prob.d > 2 or prob.l > 3:
        raise OracleError("global_solve supports d <= 2 and l <= 3")
    if cache is not None:
        hit = cache.get(prob, spec)
        if hit is not None:
            return hit
    c = _Compiled(prob)
    box = _box(prob.xbox, spec.xbox, prob.d)
    n = spec.outer_resolution or (201 if prob.d == 1 else 41)
    incumbent = None
    for rnd in range(spec.rounds + 1):
        axes = _axes(box, n)
        for point in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, prob.d):
            got = _best_at(c, point, spec)
            if got is not None and (incumbent is None or got[0] < incumbent[0] - 1e-12):
                incumbent = (got[0], point.copy(), got[1], got[2])
        if incumbent is None:
            raise OracleError("no bilevel-feasible grid point")
        if rnd == spec.rounds:
            break
        full = _box(prob.xbox, spec.xbox, prob.d)
        half = (box[:, 1] - box[:, 0]) * spec.shrink / 2
        centre = incumbent[1]
        box = np.stack([np.maximum(centre - half, full[:, 0]), np.minimum(centre + half, full[:, 1])], axis=1)
        n = max(3, min(n, 21) | 1)
    F, x, y, V = incumbent
    result = GlobalResult(x, np.asarray(y), float(F), float(c.f(c.w(x, y))[0]), float(V))
    if cache is not None:
        cache.put(prob, spec, result)
    return result


# ---------------------------------------------------------------------------
# cache


class OracleCache:
    """JSON files keyed by problem fingerprint and grid digest."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, prob, spec) -> Path:
        return self.directory / f"{prob.fingerprint()}-{spec.digest()}.json"

    def get(self, prob, spec) -> GlobalResult | None:
        path = self._path(prob, spec)
        if not path.exists():
            return None
        return GlobalResult.from_dict(json.loads(path.read_text()))

    def put(self, prob, spec, result: GlobalResult):
        self.directory.mkdir(parents=True, exist_ok=True)
        self._path(prob, spec).write_text(json.dumps(result.to_dict(), indent=2))


# ---------------------------------------------------------------------------
# finite-difference audits

FD_STEP_FIRST = 1e-6
FD_STEP_SECOND = 1e-4


@dataclass(frozen=True)
class FdReport:
    max_rel_error: float
    evaluated: int
    skipped: int


def _dims(e: Expr) -> dict[str, int]:
    dims: dict[str, int] = {}
    for block, i in ex.variables(e):
        dims[block] = max(dims.get(block, 0), i + 1)
    return dims


class _ExprAudit:
    def __init__(self, e: Expr, dims: dict[str, int]):
        self.layout = ex.make_layout(sorted(dims.items()))
        keys = sorted(self.layout, key=self.layout.get)
        self.keys = keys
        self.value = ex.compile_many([e], self.layout)
        grads = [ex.diff(e, *k) for k in keys]
        self.grad = ex.compile_many(grads, self.layout)
        self.hess = ex.compile_many([ex.diff(gk, *k) for gk in grads for k in keys], self.layout)

    @cached_property
    def n(self) -> int:
        return len(self.keys)


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)), initial=0.0))


def fd_check(
    target,
    samples: int = 10,
    order: int = 1,
    seed: int = 0,
    box=(-2.0, 2.0),
    dims: dict | None = None,
    r: float = 1.0,
    rho: float = 1.0,
) -> FdReport:
    """Max relative error of symbolic derivatives against central differences.

    ``target`` is an expression or the string ``"shift"``. First order uses
    step 1e-6 on values; second order uses step 1e-4 on symbolic gradients.
    Relative error is ``|fd - exact| / max(1, |exact|)``. Points where the
    expression leaves its domain are skipped and counted.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    rng = np.random.default_rng(seed)
    if isinstance(target, str):
        if target != "shift":
            raise ValueError(f"unknown audit target {target!r}")
        return _fd_shift(rng, samples, r, rho)
    audit = _ExprAudit(target, dims or _dims(target))
    lo, hi = box
    worst, done, skipped = 0.0, 0, 0
    for _ in range(samples):
        w = rng.uniform(lo, hi, audit.n)
        try:
            if order == 1:
                h = FD_STEP_FIRST
                exact = audit.grad(w)
                fd = np.array(
                    [(audit.value(w + h * e)[0] - audit.value(w - h * e)[0]) / (2 * h) for e in np.eye(audit.n)]
                )
            else:
                h = FD_STEP_SECOND
                exact = audit.hess(w).reshape(audit.n, audit.n)
                fd = np.array([(audit.grad(w + h * e) - audit.grad(w - h * e)) / (2 * h) for e in np.eye(audit.n)])
        except DomainError:
            skipped += 1
            continue
        if not (np.all(np.isfinite(exact)) and np.all(np.isfinite(fd))):
            skipped += 1
            continue
        worst = max(worst, _rel(fd, exact))
        done += 1
    return FdReport(worst, done, skipped)


def _fd_shift(rng, samples, r, rho) -> FdReport:
    h = FD_STEP_FIRST
    worst = 0.0
    for _ in range(samples):
        g = rng.uniform(-10, 10)
        s = rng.uniform(0, 10)
        d = shift_derivatives(g, s, [1.0], r, rho)
        dz_dg = (shift(g + h, s, r, rho).z - shift(g - h, s, r, rho).z) / (2 * h)
        dk_dg = (shift(g + h, s, r, rho).kappa - shift(g - h, s, r, rho).kappa) / (2 * h)
        dz_ds = (shift(g, s + h, r, rho).z - shift(g, s - h, r, rho).z) / (2 * h)
        dk_ds = (shift(g, s + h, r, rho).kappa - shift(g, s - h, r, rho).kappa) / (2 * h)
        fd = np.array([dz_dg, dk_dg, dz_ds, dk_ds])
        exact = np.array([d.grad_z[0], d.grad_kappa[0], d.dz_ds, d.dkappa_ds])
        worst = max(worst, _rel(fd, exact))
    return FdReport(worst, samples, 0)
