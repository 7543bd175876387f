"""W/C/M/S stationarity certificates for the SVF model and the lower KKT check.

Multipliers are searched by linear feasibility problems solved with a dense
two-phase simplex under Bland's rule. Indices are 0-based throughout.

Conditions, at a feasible ``(x, y, u, s)``:

* ``x_row``: ``grad_x F + lam0 (grad_x f(y) - grad_x f(u)) + sum_{I_y} lam_i grad_x g_i(y)
  + [f_yx + sum s_i g_i,yx](u)^T mu_phi + sum mu_g_i grad_x g_i(u) + sum lam_G grad_x G = 0``
* ``y_row``: ``grad_y F + lam0 grad_y f(y) + sum_{I_y} lam_i grad_y g_i(y) + sum lam_G grad_y G = 0``
* ``u_row``: ``-lam0 grad_y f(u) + sum mu_g_i grad_y g_i(u) + [f_yy + sum s_i g_i,yy](u)^T mu_phi = 0``
* ``sets``: ``mu_g = 0`` on ``I_s`` and ``a_i = grad_y g_i(u)^T mu_phi = 0`` on ``I_g``
* on ``I_0``: C needs ``mu_g_i a_i >= 0``; M needs ``mu_g_i, a_i > 0`` or ``mu_g_i a_i = 0``;
  S needs ``mu_g_i >= 0`` and ``a_i >= 0``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import expr as ex
from .dsl import BilevelProblem

MODES = ("W", "C", "M", "S")
MAX_BIACTIVE = 10


class InfeasiblePointError(ValueError):
    """The point is not feasible for the model within the activity tolerance."""


class EnumerationLimitError(ValueError):
    """Too many biactive indices for sign-pattern enumeration."""


# ---------------------------------------------------------------------------
# dense simplex


@dataclass(frozen=True)
class LpResult:
    status: str  # "optimal", "unbounded" or "infeasible"
    x: np.ndarray
    value: float


def _pivot(T, row, col):
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]


def _simplex(T, basis, n_cols, tol):
    """Minimize the objective held in the last row of tableau ``T`` (Bland's rule)."""
    while True:
        costs = T[-1, :n_cols]
        entering = next((j for j in range(n_cols) if costs[j] < -tol), None)
        if entering is None:
            return "optimal"
        col = T[:-1, entering]
        ratios = [
            (T[i, -1] / col[i], basis[i], i) for i in range(len(basis)) if col[i] > tol
        ]
        if not ratios:
            return "unbounded"
        best = min(r[0] for r in ratios)
        # Bland: smallest basis index among the tied rows
        leaving = min((r for r in ratios if r[0] <= best + tol), key=lambda r: r[1])[2]
        _pivot(T, leaving, entering)
        basis[leaving] = entering


def linprog_standard(c, A, b, tol: float = 1e-11) -> LpResult:
    """``min c^T v`` subject to ``A v = b``, ``v >= 0`` by two-phase simplex.

    When the equalities are infeasible the result has status ``"infeasible"``
    and ``value`` holds the phase-one optimum, the minimal l1 residual
    ``min ||A v - b||_1`` over ``v >= 0``.
    """
    A = np.array(A, dtype=float).reshape(len(b), -1)
    b = np.array(b, dtype=float)
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    sign = np.where(b < 0, -1.0, 1.0)
    A = A * sign[:, None]
    b = b * sign
    # phase one over [A | I] with artificial costs
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n : n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    _simplex(T, basis, n + m, tol)
    residual = max(-T[-1, -1], 0.0)
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    if residual > tol * scale * 10:
        v = np.zeros(n)
        for i, j in enumerate(basis):
            if j < n:
                v[j] = T[i, -1]
        return LpResult("infeasible", v, residual)
    # drive artificials out of the basis where possible
    for i, j in enumerate(basis):
        if j >= n:
            k = next((k for k in range(n) if abs(T[i, k]) > tol), None)
            if k is not None:
                _pivot(T, i, k)
                basis[i] = k
    T2 = np.zeros((m + 1, n + 1))
    T2[:m, :n] = T[:m, :n]
    T2[:m, -1] = T[:m, -1]
    T2[-1, :n] = c
    for i, j in enumerate(basis):
        if j < n and c[j] != 0.0:
            T2[-1] -= c[j] * T2[i]
    # rows whose artificial stayed basic are redundant; freeze them
    keep = [i for i, j in enumerate(basis) if j < n]
    T2 = np.vstack([T2[keep], T2[-1:]])
    basis = [basis[i] for i in keep]
    status = _simplex(T2, basis, n, tol)
    v = np.zeros(n)
    for i, j in enumerate(basis):
        v[j] = T2[i, -1]
    return LpResult(status, v, float(c @ v))


class _Lp:
    """Linear feasibility in signed variables, converted to standard form.

    Variable kinds: ``free``, ``nonneg``, ``nonpos``, ``zero``.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.names: list[tuple] = []
        self.rows: list[np.ndarray] = []
        self.rhs: list[float] = []
        self.ineq: list[tuple[np.ndarray, str]] = []

    def var(self, name, kind="free") -> int:
        self.names.append(name)
        self.kinds.append(kind)
        return len(self.kinds) - 1

    def eq(self, coeffs: np.ndarray, rhs: float):
        self.rows.append(coeffs)
        self.rhs.append(rhs)

    def sign(self, coeffs: np.ndarray, kind: str):
        """Require ``coeffs . z`` to be ``nonneg``, ``nonpos`` or ``zero``."""
        if kind == "zero":
            self.eq(coeffs, 0.0)
        elif kind != "free":
            self.ineq.append((coeffs, kind))

    def solve(self):
        """``(z, l1_residual)``; ``z`` is ``None`` when infeasible."""
        nz = len(self.kinds)
        cols = []  # (variable index, multiplier)
        for k, kind in enumerate(self.kinds):
            if kind in ("free", "nonneg"):
                cols.append((k, 1.0))
            if kind in ("free", "nonpos"):
                cols.append((k, -1.0))
        n_slack = len(self.ineq)
        A = []
        b = []

        def expand(coeffs):
            coeffs = np.pad(coeffs, (0, nz - len(coeffs)))
            return np.array([coeffs[k] * sgn for k, sgn in cols])

        for coeffs, r in zip(self.rows, self.rhs):
            A.append(np.concatenate([expand(coeffs), np.zeros(n_slack)]))
            b.append(r)
        for t, (coeffs, kind) in enumerate(self.ineq):
            slack = np.zeros(n_slack)
            slack[t] = -1.0 if kind == "nonneg" else 1.0
            A.append(np.concatenate([expand(coeffs), slack]))
            b.append(0.0)
        n = len(cols) + n_slack
        if not A:
            return np.zeros(nz), 0.0
        res = linprog_standard(np.zeros(n), np.array(A), np.array(b))
        if res.status == "infeasible":
            return None, res.value
        z = np.zeros(nz)
        for (k, sgn), val in zip(cols, res.x[: len(cols)]):
            z[k] += sgn * val
        return z, 0.0


# ---------------------------------------------------------------------------
# index sets and derivative blocks


@dataclass(frozen=True)
class IndexSets:
    I_y: tuple[int, ...]
    I_g: tuple[int, ...]
    I_0: tuple[int, ...]
    I_s: tuple[int, ...]
    active_G: tuple[int, ...]
    dominance_active: bool
    tau_act: float


def _as_point(point):
    if isinstance(point, dict):
        parts = point["x"], point["y"], point["u"], point["s"]
    else:
        parts = point
    return tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in parts)


def _values(prob, exprs, x, y):
    pt = prob.point(x, y)
    return np.array([ex.evaluate(e, pt) for e in exprs], dtype=float)


def index_sets(prob: BilevelProblem, x, y, u, s, tau_act: float = 1e-6) -> IndexSets:
    """Activity partition at a feasible SVF point (closed rule at ``tau_act``)."""
    x, y, u, s = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (x, y, u, s))
    if s.shape != (prob.m,):
        raise ValueError(f"s must have length {prob.m}")
    g_y = _values(prob, prob.g, x, y)
    g_u = _values(prob, prob.g, x, u)
    G = _values(prob, prob.G, x, y)
    bad = []
    if np.any(g_y > tau_act):
        bad.append("g(x, y) > 0")
    if np.any(g_u > tau_act):
        bad.append("g(x, u) > 0")
    if np.any(G > tau_act):
        bad.append("G > 0")
    if np.any(s < -tau_act):
        bad.append("s < 0")
    if np.any((g_u < -tau_act) & (s > tau_act)):
        bad.append("s_i g_i(x, u) != 0")
    dom = ex.evaluate(prob.f, prob.point(x, y)) - ex.evaluate(prob.f, prob.point(x, u))
    if dom > tau_act:
        bad.append("f(x, y) > f(x, u)")
    if bad:
        raise InfeasiblePointError("infeasible point: " + ", ".join(bad))
    active_u = np.abs(g_u) <= tau_act
    zero_s = s <= tau_act
    return IndexSets(
        I_y=tuple(int(i) for i in np.flatnonzero(np.abs(g_y) <= tau_act)),
        I_g=tuple(int(i) for i in np.flatnonzero(active_u & ~zero_s)),
        I_0=tuple(int(i) for i in np.flatnonzero(active_u & zero_s)),
        I_s=tuple(int(i) for i in np.flatnonzero(~active_u & zero_s)),
        active_G=tuple(int(j) for j in np.flatnonzero(np.abs(G) <= tau_act)),
        dominance_active=bool(abs(dom) <= tau_act),
        tau_act=tau_act,
    )


@dataclass
class _Blocks:
    """Numeric derivative blocks entering the stationarity rows."""

    F_x: np.ndarray
    F_y: np.ndarray
    f_x_y: np.ndarray
    f_y_y: np.ndarray
    f_x_u: np.ndarray
    f_y_u: np.ndarray
    g_x_y: np.ndarray  # (m, d)
    g_y_y: np.ndarray  # (m, l)
    g_x_u: np.ndarray
    g_y_u: np.ndarray
    G_x: np.ndarray  # (p, d)
    G_y: np.ndarray  # (p, l)
    H_yx: np.ndarray  # (l, d) of f + sum s_i g_i at u
    H_yy: np.ndarray  # (l, l)
    f_gap: float


def _grad(prob, e, block, x, y):
    return _values(prob, prob.gradient_block(e, block), x, y)


def _hess(prob, e, rb, cb, x, y):
    pt = prob.point(x, y)
    return np.array([[ex.evaluate(h, pt) for h in row] for row in prob.hessian_block(e, rb, cb)]).reshape(
        prob.dim(rb), prob.dim(cb)
    )


def _blocks(prob: BilevelProblem, x, y, u, s) -> _Blocks:
    d, l, m, p = prob.d, prob.l, prob.m, prob.p
    H_yx = _hess(prob, prob.f, "y", "x", x, u)
    H_yy = _hess(prob, prob.f, "y", "y", x, u)
    for i, gi in enumerate(prob.g):
        if s[i] != 0.0:
            H_yx = H_yx + s[i] * _hess(prob, gi, "y", "x", x, u)
            H_yy = H_yy + s[i] * _hess(prob, gi, "y", "y", x, u)
    stack = lambda rows, k: np.array(rows, dtype=float).reshape(len(rows), k)  # noqa: E731
    return _Blocks(
        F_x=_grad(prob, prob.F, "x", x, y),
        F_y=_grad(prob, prob.F, "y", x, y),
        f_x_y=_grad(prob, prob.f, "x", x, y),
        f_y_y=_grad(prob, prob.f, "y", x, y),
        f_x_u=_grad(prob, prob.f, "x", x, u),
        f_y_u=_grad(prob, prob.f, "y", x, u),
        g_x_y=stack([_grad(prob, gi, "x", x, y) for gi in prob.g], d),
        g_y_y=stack([_grad(prob, gi, "y", x, y) for gi in prob.g], l),
        g_x_u=stack([_grad(prob, gi, "x", x, u) for gi in prob.g], d),
        g_y_u=stack([_grad(prob, gi, "y", x, u) for gi in prob.g], l),
        G_x=stack([_grad(prob, Gj, "x", x, y) for Gj in prob.G], d),
        G_y=stack([_grad(prob, Gj, "y", x, y) for Gj in prob.G], l),
        H_yx=H_yx,
        H_yy=H_yy,
        f_gap=ex.evaluate(prob.f, prob.point(x, y)) - ex.evaluate(prob.f, prob.point(x, u)),
    )


# ---------------------------------------------------------------------------
# certificates


@dataclass
class StationarityCertificate:
    lambda0: float
    lam: list  # length m, zero off I_y
    lambda_G: list  # length p, zero off the active G rows
    mu_phi: list
    mu_g: list
    cls: str  # W, C, M, S or none
    residuals: dict = field(default_factory=dict)
    index_sets: dict = field(default_factory=dict)
    mode: str = "W"
    lp_residual: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StationarityCertificate":
        return cls(**json.loads(text))


def _rows(B: _Blocks, lambda0, lam, lambda_G, mu_phi, mu_g):
    x_row = (
        B.F_x
        + lambda0 * (B.f_x_y - B.f_x_u)
        + B.g_x_y.T @ lam
        + B.H_yx.T @ mu_phi
        + B.g_x_u.T @ mu_g
        + B.G_x.T @ lambda_G
    )
    y_row = B.F_y + lambda0 * B.f_y_y + B.g_y_y.T @ lam + B.G_y.T @ lambda_G
    u_row = -lambda0 * B.f_y_u + B.g_y_u.T @ mu_g + B.H_yy.T @ mu_phi
    return x_row, y_row, u_row


def _inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _mode_residual(mode: str, mu, a) -> float:
    if mode == "W" or len(mu) == 0:
        return 0.0
    if mode == "C":
        return float(np.max(np.maximum(-mu * a, 0.0)))
    if mode == "S":
        return float(np.max(np.maximum(np.maximum(-mu, -a), 0.0)))
    # M: distance to the union {mu >= 0, a >= 0} u {mu = 0} u {a = 0}
    pieces = np.stack([np.maximum(np.maximum(-mu, -a), 0.0), np.abs(mu), np.abs(a)])
    return float(np.max(pieces.min(axis=0)))


def verify_multipliers(prob: BilevelProblem, point, multipliers, mode: str = "W", tau_act: float = 1e-6) -> dict:
    """Residual of every condition for given multipliers, evaluated directly.

    ``multipliers`` holds ``lambda0``, ``lam`` (length m), ``mu_phi``, ``mu_g``
    and optionally ``lambda_G`` (length p).
    """
    x, y, u, s = _as_point(point)
    sets = index_sets(prob, x, y, u, s, tau_act)
    B = _blocks(prob, x, y, u, s)
    lambda0 = float(multipliers["lambda0"])
    lam = np.asarray(multipliers["lam"], dtype=float)
    lambda_G = np.asarray(multipliers.get("lambda_G", np.zeros(prob.p)), dtype=float)
    mu_phi = np.asarray(multipliers["mu_phi"], dtype=float)
    mu_g = np.asarray(multipliers["mu_g"], dtype=float)
    x_row, y_row, u_row = _rows(B, lambda0, lam, lambda_G, mu_phi, mu_g)
    a = B.g_y_u @ mu_phi if prob.m else np.zeros(0)
    off_y = [i for i in range(prob.m) if i not in sets.I_y]
    off_G = [j for j in range(prob.p) if j not in sets.active_G]
    sign = max(
        [max(-lambda0, 0.0)]
        + [max(-v, 0.0) for v in lam]
        + [max(-v, 0.0) for v in lambda_G]
        + [abs(lam[i]) for i in off_y]
        + [abs(lambda_G[j]) for j in off_G]
    )
    I0 = list(sets.I_0)
    return {
        "x_row": _inf(x_row),
        "y_row": _inf(y_row),
        "u_row": _inf(u_row),
        "sets": max(_inf(mu_g[list(sets.I_s)]), _inf(a[list(sets.I_g)])),
        "sign": sign,
        "dominance": abs(lambda0 * B.f_gap),
        "mode": _mode_residual(mode, mu_g[I0], a[I0]),
    }


def _sets_dict(sets: IndexSets) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(sets).items()}


def _patterns(mode: str, k: int):
    if mode == "W":
        return [("free",) * k]
    if mode == "S":
        return [("pos",) * k]
    if mode == "C":
        return list(itertools.product(("pos", "neg"), repeat=k))
    return list(itertools.product(("pos", "mu0", "a0"), repeat=k))


def _solve_pattern(prob, sets: IndexSets, B: _Blocks, pattern):
    d, l, m, p = prob.d, prob.l, prob.m, prob.p
    lp = _Lp()
    i_lam0 = lp.var("lambda0", "nonneg" if sets.dominance_active else "zero")
    i_lam = [lp.var(("lam", i), "nonneg" if i in sets.I_y else "zero") for i in range(m)]
    i_G = [lp.var(("lambda_G", j), "nonneg" if j in sets.active_G else "zero") for j in range(p)]
    i_phi = [lp.var(("mu_phi", j)) for j in range(l)]
    kinds = {i: "zero" for i in sets.I_s}
    for i, piece in zip(sets.I_0, pattern):
        kinds[i] = {"free": "free", "pos": "nonneg", "neg": "nonpos", "mu0": "zero", "a0": "free"}[piece]
    # an inactive index carries s = 0 and lies in I_s; anything left is I_g
    i_mu = [lp.var(("mu_g", i), kinds.get(i, "free")) for i in range(m)]
    nz = len(lp.kinds)

    def row(coef_map):
        c = np.zeros(nz)
        for k, v in coef_map:
            c[k] += v
        return c

    # x, y and u rows are affine in the multipliers: A z = -constant
    for j in range(d):
        terms = [(i_lam0, B.f_x_y[j] - B.f_x_u[j])]
        terms += [(i_lam[i], B.g_x_y[i, j]) for i in range(m)]
        terms += [(i_phi[k], B.H_yx[k, j]) for k in range(l)]
        terms += [(i_mu[i], B.g_x_u[i, j]) for i in range(m)]
        terms += [(i_G[q], B.G_x[q, j]) for q in range(p)]
        lp.eq(row(terms), -B.F_x[j])
    for j in range(l):
        terms = [(i_lam0, B.f_y_y[j])]
        terms += [(i_lam[i], B.g_y_y[i, j]) for i in range(m)]
        terms += [(i_G[q], B.G_y[q, j]) for q in range(p)]
        lp.eq(row(terms), -B.F_y[j])
    for j in range(l):
        terms = [(i_lam0, -B.f_y_u[j])]
        terms += [(i_mu[i], B.g_y_u[i, j]) for i in range(m)]
        terms += [(i_phi[k], B.H_yy[k, j]) for k in range(l)]
        lp.eq(row(terms), 0.0)
    for i in sets.I_g:
        lp.eq(row([(i_phi[k], B.g_y_u[i, k]) for k in range(l)]), 0.0)
    for i, piece in zip(sets.I_0, pattern):
        a_row = row([(i_phi[k], B.g_y_u[i, k]) for k in range(l)])
        lp.sign(a_row, {"free": "free", "pos": "nonneg", "neg": "nonpos", "mu0": "free", "a0": "zero"}[piece])
    z, residual = lp.solve()
    if z is None:
        return None, residual
    return {
        "lambda0": float(z[i_lam0]),
        "lam": [float(z[k]) for k in i_lam],
        "lambda_G": [float(z[k]) for k in i_G],
        "mu_phi": [float(z[k]) for k in i_phi],
        "mu_g": [float(z[k]) for k in i_mu],
    }, 0.0


def _search(prob, sets, B, mode):
    """First multipliers (in lexicographic pattern order) for ``mode``."""
    best = np.inf
    for pattern in _patterns(mode, len(sets.I_0)):
        mult, residual = _solve_pattern(prob, sets, B, pattern)
        if mult is not None:
            return mult, 0.0
        best = min(best, residual)
    return None, best


def certify(
    prob: BilevelProblem,
    point,
    mode: str = "S",
    tau: float = 1e-8,
    tau_act: float = 1e-6,
    multipliers: dict | None = None,
) -> StationarityCertificate:
    """Strongest stationarity class up to ``mode`` established at ``point``.

    ``point`` is ``(x, y, u, s)`` or a mapping with those keys. With
    ``multipliers`` given, those are checked instead of searched for.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x, y, u, s = _as_point(point)
    sets = index_sets(prob, x, y, u, s, tau_act)
    if len(sets.I_0) > MAX_BIACTIVE and mode in ("C", "M"):
        raise EnumerationLimitError(f"|I_0| = {len(sets.I_0)} exceeds {MAX_BIACTIVE}")
    B = _blocks(prob, x, y, u, s)
    ladder = MODES[: MODES.index(mode) + 1][::-1]
    if multipliers is not None:
        for cls in ladder:
            res = verify_multipliers(prob, (x, y, u, s), multipliers, cls, tau_act)
            if max(res.values()) <= tau:
                return _certificate(multipliers, cls, res, sets, mode, 0.0)
        res = verify_multipliers(prob, (x, y, u, s), multipliers, "W", tau_act)
        return _certificate(multipliers, "none", res, sets, mode, max(res.values()))
    lp_residual = np.inf
    for cls in ladder:
        mult, resid = _search(prob, sets, B, cls)
        if mult is not None:
            res = verify_multipliers(prob, (x, y, u, s), mult, cls, tau_act)
            if max(res.values()) <= 10 * tau:
                return _certificate(mult, cls, res, sets, mode, 0.0)
        lp_residual = resid
    zero = {"lambda0": 0.0, "lam": [0.0] * prob.m, "lambda_G": [0.0] * prob.p, "mu_phi": [0.0] * prob.l, "mu_g": [0.0] * prob.m}
    res = verify_multipliers(prob, (x, y, u, s), zero, "W", tau_act)
    return _certificate(zero, "none", res, sets, mode, float(lp_residual))


def _certificate(mult, cls, residuals, sets, mode, lp_residual):
    return StationarityCertificate(
        lambda0=float(mult["lambda0"]),
        lam=[float(v) for v in mult["lam"]],
        lambda_G=[float(v) for v in mult.get("lambda_G", [])],
        mu_phi=[float(v) for v in mult["mu_phi"]],
        mu_g=[float(v) for v in mult["mu_g"]],
        cls=cls,
        residuals=residuals,
        index_sets=_sets_dict(sets),
        mode=mode,
        lp_residual=float(lp_residual),
    )


# ---------------------------------------------------------------------------
# lower-level KKT check


@dataclass(frozen=True)
class LowerKktResult:
    feasible: bool
    s: np.ndarray | None
    residual: float
    active: tuple[int, ...]


def lower_kkt_check(prob: BilevelProblem, x, y, tau: float = 1e-9, tau_act: float = 1e-6) -> LowerKktResult:
    """``min ||grad_y f + sum s_i grad_y g_i||_inf`` over ``s >= 0`` on the active set.

    Returns the minimizing multipliers when the optimum is at most ``tau``;
    otherwise ``feasible`` is false and ``residual`` certifies the gap.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    g = _values(prob, prob.g, x, y)
    if np.any(g > tau_act):
        raise InfeasiblePointError("y is not feasible for the lower level")
    active = tuple(int(i) for i in np.flatnonzero(np.abs(g) <= tau_act))
    c = _grad(prob, prob.f, "y", x, y)
    Bm = np.array([_grad(prob, prob.g[i], "y", x, y) for i in active]).reshape(len(active), prob.l).T
    k, l = len(active), prob.l
    # variables (s, t, slack+, slack-) >= 0; c + B s <= t and -(c + B s) <= t
    A = np.zeros((2 * l, k + 1 + 2 * l))
    A[:l, :k] = Bm
    A[:l, k] = -1.0
    A[:l, k + 1 : k + 1 + l] = np.eye(l)
    A[l:, :k] = -Bm
    A[l:, k] = -1.0
    A[l:, k + 1 + l :] = np.eye(l)
    b = np.concatenate([-c, c])
    cost = np.zeros(A.shape[1])
    cost[k] = 1.0
    res = linprog_standard(cost, A, b)
    s_act = res.x[:k]
    residual = _inf(c + Bm @ s_act) if l else 0.0
    s_full = np.zeros(prob.m)
    s_full[list(active)] = s_act
    ok = residual <= tau
    return LowerKktResult(ok, s_full if ok else None, residual, active)


# ---------------------------------------------------------------------------
# SVF -> KKT certificate mapping


@dataclass
class KpCertificate:
    mu: list
    mu_phi: list
    lambda_G: list
    residuals: dict
    valid: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def kp_s_residuals(prob: BilevelProblem, x, y, s, mu, mu_phi, lambda_G, tau_act: float = 1e-6) -> dict:
    """Residuals of S-stationarity for the KKT model at ``(x, y, s)``."""
    x, y, s = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (x, y, s))
    mu = np.asarray(mu, dtype=float)
    mu_phi = np.asarray(mu_phi, dtype=float)
    lambda_G = np.asarray(lambda_G, dtype=float)
    sets = index_sets(prob, x, y, y, s, tau_act)
    B = _blocks(prob, x, y, y, s)
    x_row = B.F_x + B.H_yx.T @ mu_phi + B.g_x_y.T @ mu + B.G_x.T @ lambda_G
    y_row = B.F_y + B.g_y_y.T @ mu + B.H_yy.T @ mu_phi + B.G_y.T @ lambda_G
    a = B.g_y_y @ mu_phi if prob.m else np.zeros(0)
    I0 = list(sets.I_0)
    return {
        "x_row": _inf(x_row),
        "y_row": _inf(y_row),
        "sets": max(_inf(mu[list(sets.I_s)]), _inf(a[list(sets.I_g)])),
        "sign": max([0.0] + [max(-v, 0.0) for v in lambda_G]),
        "mode": _mode_residual("S", mu[I0], a[I0]),
    }


def svf_to_kp_certificate(prob: BilevelProblem, point, cert: StationarityCertificate, tau: float = 1e-9) -> KpCertificate:
    """Map an S certificate at ``y = u`` to KKT-model multipliers ``mu = mu_g + lam``."""
    x, y, u, s = _as_point(point)
    if cert.cls != "S":
        raise ValueError(f"certificate class {cert.cls!r} is below S")
    if np.max(np.abs(y - u), initial=0.0) > tau:
        raise ValueError("the mapping needs y = u")
    mu = np.asarray(cert.mu_g, dtype=float) + np.asarray(cert.lam, dtype=float)
    lambda_G = cert.lambda_G or [0.0] * prob.p
    res = kp_s_residuals(prob, x, y, s, mu, cert.mu_phi, lambda_G)
    return KpCertificate(
        mu=mu.tolist(),
        mu_phi=list(cert.mu_phi),
        lambda_G=list(lambda_G),
        residuals=res,
        valid=max(res.values()) <= tau,
    )
