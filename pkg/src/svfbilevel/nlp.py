"""Augmented Lagrangian solver for small smooth NLPs.

Problems expose ``n``, ``objective_value``, ``objective_grad``, ``eq``,
``eq_jac``, ``ineq`` and ``ineq_jac``; rows read ``eq(w) = 0`` and
``ineq(w) <= 0``. Equalities get a multiplier plus quadratic penalty, and
inequalities a shifted squared hinge ``max(0, lam/mu + c)^2`` carrying its
own multiplier. Each penalty subproblem is minimized by dense BFGS with
Powell damping under Armijo backtracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from .expr import DomainError

CONVERGED = "converged"
ITERATION_LIMIT = "iteration-limit"
LINE_SEARCH_FAILURE = "line-search-failure"


@dataclass(frozen=True)
class NlpOptions:
    equality_penalty_init: float = 10.0
    multiplier_update: bool = True
    max_outer: int = 30
    max_inner: int = 500
    grad_tol: float = 1e-6
    feas_tol: float | None = None
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    bfgs_memory: str = "full"
    penalty_growth: float = 10.0
    penalty_max: float = 1e13
    min_step: float = 1e-16
    stall_window: int = 30

    def __post_init__(self):
        if self.grad_tol <= 0 or (self.feas_tol is not None and self.feas_tol <= 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.armijo_c < 1 or not 0 < self.backtrack_factor < 1:
            raise ValueError("line-search factors must lie in (0, 1)")
        if self.equality_penalty_init <= 0:
            raise ValueError("initial penalty must be positive")

    @property
    def feasibility_tol(self) -> float:
        if self.feas_tol is not None:
            return self.feas_tol
        return max(1e-12, 1e-2 * self.grad_tol)


@dataclass
class NlpResult:
    w: np.ndarray
    kkt_residual: float
    equality_residual: float
    inequality_violation: float
    status: str
    inner_iterations: int
    outer_iterations: int = 0
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ineq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    penalty: float = 0.0
    merit_trace: list = field(default_factory=list)
    # penalty multipliers to resume from; may differ from the reported ones
    warm_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    warm_in: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def multipliers(self) -> tuple[np.ndarray, np.ndarray]:
        return self.eq_multipliers, self.ineq_multipliers


def lagrangian_gradient(prob, w, lam_eq, lam_in) -> np.ndarray:
    grad = np.asarray(prob.objective_grad(w), dtype=float).copy()
    if len(lam_eq):
        grad += prob.eq_jac(w).T @ lam_eq
    if len(lam_in):
        grad += prob.ineq_jac(w).T @ lam_in
    return grad


def kkt_residual_nlp(prob, w, multipliers=None) -> float:
    """``||grad L||_inf + max_i |lam_i c_i|`` over the inequality rows.

    ``multipliers`` is ``(lam_eq, lam_in)``; ``None`` means zero multipliers,
    which reduces the measure to the objective-gradient norm.
    """
    w = np.asarray(w, dtype=float)
    if multipliers is None:
        lam_eq, lam_in = np.zeros(0), np.zeros(0)
    else:
        lam_eq, lam_in = (np.asarray(v, dtype=float) for v in multipliers)
    stat = float(np.max(np.abs(lagrangian_gradient(prob, w, lam_eq, lam_in)), initial=0.0))
    comp = 0.0
    if len(lam_in):
        comp = float(np.max(np.abs(lam_in * prob.ineq(w)), initial=0.0))
    return stat + comp


def least_squares_multipliers(prob, w) -> tuple[np.ndarray, np.ndarray]:
    """Multipliers minimizing ``||grad L||_2^2 + sum_i (lam_i c_i)^2`` with ``lam_in >= 0``."""
    w = np.asarray(w, dtype=float)
    grad_F = np.asarray(prob.objective_grad(w), dtype=float)
    c_i = prob.ineq(w)
    n_eq = len(prob.eq(w))
    blocks = []
    if n_eq:
        blocks.append(prob.eq_jac(w).T)
    if len(c_i):
        blocks.append(prob.ineq_jac(w).T)
    if not blocks:
        return np.zeros(0), np.zeros(0)
    A = np.hstack(blocks)
    k = A.shape[1]
    comp = np.zeros((len(c_i), k))
    comp[np.arange(len(c_i)), n_eq + np.arange(len(c_i))] = np.abs(c_i)
    A = np.vstack([A, comp])
    b = np.concatenate([-grad_F, np.zeros(len(c_i))])
    lb = np.concatenate([np.full(n_eq, -np.inf), np.zeros(len(c_i))])
    sol = lsq_linear(A, b, bounds=(lb, np.full(k, np.inf)), method="bvls")
    return sol.x[:n_eq], sol.x[n_eq:]


def _violations(prob, w) -> tuple[float, float]:
    eq = prob.eq(w)
    ineq = prob.ineq(w)
    return (
        float(np.max(np.abs(eq), initial=0.0)),
        float(np.max(np.maximum(ineq, 0.0), initial=0.0)),
    )


class _Merit:
    """Augmented Lagrangian for fixed multipliers and penalty."""

    def __init__(self, prob, lam_eq, lam_in, mu):
        self.prob, self.lam_eq, self.lam_in, self.mu = prob, lam_eq, lam_in, mu

    def value(self, w) -> float:
        try:
            f = self.prob.objective_value(w)
            c_e = self.prob.eq(w)
            c_i = self.prob.ineq(w)
        except (DomainError, FloatingPointError):
            return np.inf
        mu = self.mu
        val = f + self.lam_eq @ c_e + 0.5 * mu * (c_e @ c_e)
        hinge = np.maximum(0.0, self.lam_in / mu + c_i)
        val += 0.5 * mu * (hinge @ hinge) - (self.lam_in @ self.lam_in) / (2.0 * mu)
        return float(val) if np.isfinite(val) else np.inf

    def parts(self, w):
        """Merit gradient plus the pieces of the structured model at ``w``.

        Returns ``(grad, grad_F, J_e, J_i, est_eq, est_in)`` where ``est_*`` are
        the first-order multiplier estimates implied by the penalty.
        """
        prob, mu = self.prob, self.mu
        grad_F = np.asarray(prob.objective_grad(w), dtype=float)
        c_e = prob.eq(w)
        c_i = prob.ineq(w)
        J_e = prob.eq_jac(w) if len(c_e) else np.zeros((0, len(w)))
        J_i = prob.ineq_jac(w) if len(c_i) else np.zeros((0, len(w)))
        est_eq = self.lam_eq + mu * c_e
        est_in = np.maximum(0.0, self.lam_in + mu * c_i)
        grad = grad_F + J_e.T @ est_eq + J_i.T @ est_in
        return grad, grad_F, J_e, J_i, est_eq, est_in


def _bfgs(merit: _Merit, w0, tol, opts: NlpOptions, trace, B=None):
    """Minimize the merit by structured quasi-Newton steps.

    The model Hessian is ``E + B + mu (J_e^T J_e + J_A^T J_A)``. ``E`` holds
    the exact curvature of the objective and inequality rows when the
    problem provides ``exact_hessian``; damped BFGS updates ``B`` for the
    remaining Lagrangian curvature. Returns ``(w, B, iterations, failed)``.
    """
    prob = merit.prob
    exact = getattr(prob, "exact_hessian", None)
    w = w0.copy()
    n = len(w)
    mu = merit.mu
    fval = merit.value(w)
    if B is None:
        B = np.eye(n) if exact is None else np.zeros((n, n))
    if not np.isfinite(fval) or n == 0:
        return w, B, 0, not np.isfinite(fval)
    grad, grad_F, J_e, J_i, est_eq, est_in = merit.parts(w)
    iters = 0
    failed = False
    reset = False
    anchor, since = fval, 0
    while iters < opts.max_inner:
        if np.max(np.abs(grad), initial=0.0) <= tol:
            break
        # stalled: no decrease beyond roundoff over a window of steps
        if since >= opts.stall_window:
            if anchor - fval <= 1e-12 * max(1.0, abs(fval)):
                break
            anchor, since = fval, 0
        since += 1
        iters += 1
        active = est_in > 0
        J_a = J_i[active]
        H = B + mu * (J_e.T @ J_e + J_a.T @ J_a)
        if exact is not None:
            H = H + exact(w, est_in)
        p = _descent_direction(H, grad)
        slope = grad @ p
        step = 1.0
        accepted = False
        # slack at the rounding level of the merit value, so steps whose
        # predicted decrease drowns in roundoff are not rejected forever
        noise = 8.0 * np.finfo(float).eps * max(1.0, abs(fval))
        while step >= opts.min_step:
            trial = w + step * p
            fnew = merit.value(trial)
            if fnew <= fval + opts.armijo_c * step * slope + noise:
                accepted = True
                break
            step *= opts.backtrack_factor
        if not accepted:
            if not reset:
                # retry once from a fresh quasi-Newton model before giving up
                B = np.eye(n) if exact is None else np.zeros((n, n))
                reset = True
                continue
            failed = True
            break
        reset = False
        grad_n, grad_Fn, J_en, J_in, est_eqn, est_inn = merit.parts(trial)
        s = trial - w
        # difference of the Lagrangian part that B models, at the new estimate
        if exact is None:
            y = (grad_Fn + J_en.T @ est_eqn + J_in.T @ est_inn) - (grad_F + J_e.T @ est_eqn + J_i.T @ est_inn)
        else:
            y = J_en.T @ est_eqn - J_e.T @ est_eqn
        w, fval = trial, fnew
        grad, grad_F, J_e, J_i, est_eq, est_in = grad_n, grad_Fn, J_en, J_in, est_eqn, est_inn
        trace.append(fval)
        B = _damped_update(B, s, y)
    return w, B, iters, failed


def _damped_update(B, s, y):
    """Powell-damped BFGS update; keeps ``B`` positive semidefinite."""
    Bs = B @ s
    sBs = s @ Bs
    ss = s @ s
    if ss == 0.0 or not np.isfinite(ss):
        return B
    if sBs <= 1e-12 * ss:
        # flat model along s: plain secant scaling when curvature is positive
        sy = s @ y
        if sy > 0:
            return B + np.outer(y, y) / sy
        return B
    sy = s @ y
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = s @ y
    return B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def _descent_direction(H, grad):
    """Solve ``(H + tau I) p = -grad`` with the smallest ``tau`` giving a Cholesky factor."""
    n = len(grad)
    H = 0.5 * (H + H.T)
    scale = max(1.0, float(np.max(np.abs(np.diag(H)), initial=0.0)))
    tau = 0.0
    for _ in range(60):
        try:
            L = np.linalg.cholesky(H + tau * np.eye(n))
            p = -np.linalg.solve(L.T, np.linalg.solve(L, grad))
            if np.all(np.isfinite(p)) and grad @ p < 0:
                return p
        except np.linalg.LinAlgError:
            pass
        tau = max(1e-10 * scale, 10.0 * tau)
    return -grad


def solve_subproblem(prob, w0, opts: NlpOptions | None = None, multipliers=None, penalty=None) -> NlpResult:
    """Approximate KKT point of ``min F s.t. eq = 0, ineq <= 0``.

    ``multipliers`` and ``penalty`` warm-start the outer loop.
    """
    opts = opts or NlpOptions()
    w = np.array(w0, dtype=float)
    if w.shape != (prob.n,):
        raise ValueError(f"start point has shape {w.shape}, expected ({prob.n},)")
    n_eq = len(prob.eq(w))
    n_in = len(prob.ineq(w))
    if multipliers is not None:
        lam_eq = np.array(multipliers[0], dtype=float)
        lam_in = np.array(multipliers[1], dtype=float)
        if lam_eq.shape != (n_eq,) or lam_in.shape != (n_in,):
            lam_eq, lam_in = np.zeros(n_eq), np.zeros(n_in)
    else:
        lam_eq, lam_in = np.zeros(n_eq), np.zeros(n_in)
    mu = float(penalty) if penalty else opts.equality_penalty_init
    feas_tol = opts.feasibility_tol
    status = ITERATION_LIMIT
    total_inner = 0
    outer = 0
    trace: list = []
    prev_viol = np.inf
    B = None
    for outer in range(1, opts.max_outer + 1):
        merit = _Merit(prob, lam_eq, lam_in, mu)
        trace.append([merit.value(w)])
        w, B, iters, failed = _bfgs(merit, w, opts.grad_tol, opts, trace[-1], B)
        total_inner += iters
        c_e = prob.eq(w)
        c_i = prob.ineq(w)
        if opts.multiplier_update:
            lam_eq = lam_eq + mu * c_e
            lam_in = np.maximum(0.0, lam_in + mu * c_i)
        else:
            lam_eq = mu * c_e
            lam_in = np.maximum(0.0, mu * c_i)
        eq_res, in_res = _violations(prob, w)
        kkt = kkt_residual_nlp(prob, w, (lam_eq, lam_in))
        viol = max(eq_res, in_res)
        if kkt <= opts.grad_tol and viol <= feas_tol:
            status = CONVERGED
            break
        if failed and viol <= feas_tol:
            status = LINE_SEARCH_FAILURE
            break
        if viol > 0.5 * prev_viol and viol > feas_tol:
            if mu >= opts.penalty_max and viol > 0.9 * prev_viol:
                break
            mu = min(mu * opts.penalty_growth, opts.penalty_max)
        prev_viol = viol
    w_out, le, li = w, lam_eq, lam_in
    if status != CONVERGED:
        ls_eq, ls_in = least_squares_multipliers(prob, w)
        kkt_ls = kkt_residual_nlp(prob, w, (ls_eq, ls_in))
        if kkt_ls < kkt:
            kkt = kkt_ls
            if kkt <= opts.grad_tol and viol <= feas_tol:
                status = CONVERGED
            # report these, but keep the penalty estimates for warm starts
            le, li = ls_eq, ls_in
    return NlpResult(
        w=w_out,
        kkt_residual=kkt,
        equality_residual=eq_res,
        inequality_violation=in_res,
        status=status,
        inner_iterations=total_inner,
        outer_iterations=outer,
        eq_multipliers=le,
        ineq_multipliers=li,
        penalty=mu,
        merit_trace=trace,
        warm_eq=lam_eq,
        warm_in=lam_in,
    )
