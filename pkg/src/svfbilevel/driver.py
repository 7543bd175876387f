"""Outer continuation loops: SVF-SBAL, KP-SBAL and KP-RLX.

Each loop solves a sequence of smooth NLPs with the augmented Lagrangian
solver, warm-starting point and multipliers, and stops on the first of

1. ``Res_k <= 5e-5``;
2. ``k >= 50``;
3. ``k >= 20`` and ``|Res_k - Res_{k-1}| <= 1e-8``;
4. ``k >= 30`` and ``Res_k <= 5e-4``.

``Res_k`` is the maximum of the subproblem KKT residual, the complementarity
residual ``max_i |s_i g_i|`` of the unsmoothed model and every constraint
violation of the unsmoothed model.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dsl import BilevelProblem
from .expr import DomainError
from .nlp import NlpOptions, kkt_residual_nlp, least_squares_multipliers, solve_subproblem
from .reformulate import MpecInstance, build_kp, build_svf, mpec_residual
from .smoothing import smooth_instance

MIN_R = 1e-16
DEFAULT_SEED = 42

RES_TOL = 5e-5
RES_TOL_LATE = 5e-4
STALL_TOL = 1e-8


# ---------------------------------------------------------------------------
# seeded generator: splitmix64 seeding followed by xorshift64*

_MASK = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* generator; the seed is expanded once through splitmix64."""

    def __init__(self, seed: int = DEFAULT_SEED):
        _, state = _splitmix64(int(seed) & _MASK)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK

    def uniform(self, size: int) -> np.ndarray:
        """``size`` draws from U[0, 1) using the top 53 bits."""
        return np.array([(self.next_u64() >> 11) * 2.0**-53 for _ in range(size)])


# ---------------------------------------------------------------------------
# parameters and reports


@dataclass(frozen=True)
class ScheduleParams:
    r0: float = 1.0
    rho0: float = 1.0
    rho_bar: float = 0.01
    delta: float = 0.1
    max_outer_k: int = 50

    def __post_init__(self):
        if not (self.r0 > 0 and self.rho0 > 0 and self.rho_bar > 0):
            raise ValueError("r0, rho0 and rho_bar must be positive")
        if not 0 <= self.delta < 1:
            raise ValueError("delta must lie in [0, 1)")
        if self.max_outer_k < 1:
            raise ValueError("max_outer_k must be at least 1")

    def r(self, k: int) -> float:
        """Unclamped smoothing parameter ``r0 * delta^k``."""
        return self.r0 * self.delta**k

    def rho(self, k: int) -> float:
        return max(self.rho_bar, self.rho0 * self.delta**k)


@dataclass(frozen=True)
class RelaxParams:
    eps0: float = 1.0
    shrink: float = 0.1
    max_outer_k: int = 50

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")

    def eps(self, k: int) -> float:
        return self.eps0 * self.shrink**k


@dataclass
class SolveReport:
    problem: str
    solver: str
    x: list
    y: list
    u: list | None
    s: list | None
    residual_trace: list
    criterion: int
    F: float
    f: float
    time_s: float
    u0_strategy: str
    seed: int
    parameter_trace: list = field(default_factory=list)
    subproblem_status: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    alternatives: list = field(default_factory=list)

    @property
    def outer_iterations(self) -> int:
        return len(self.residual_trace) - 1

    @property
    def final_residual(self) -> float:
        return self.residual_trace[-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SolveReport":
        return cls(**json.loads(text))


def stopping_criterion(k: int, trace, max_k: int = 50) -> int | None:
    """First satisfied criterion (1-4) at iteration ``k``, else ``None``."""
    res = trace[k]
    if res <= RES_TOL:
        return 1
    if k >= max_k:
        return 2
    if k >= 20 and abs(res - trace[k - 1]) <= STALL_TOL:
        return 3
    if k >= 30 and res <= RES_TOL_LATE:
        return 4
    return None


def initial_multipliers(m: int, seed: int) -> np.ndarray:
    return XorShift64Star(seed).uniform(m)


# ---------------------------------------------------------------------------
# residuals


def _kkt_estimate(prob, w, multipliers) -> float:
    """Subproblem KKT residual under the better of two multiplier estimates."""
    best = np.inf
    if multipliers is not None:
        best = kkt_residual_nlp(prob, w, multipliers)
    best = min(best, kkt_residual_nlp(prob, w, least_squares_multipliers(prob, w)))
    return float(best)


def _model_residual(inst: MpecInstance, w) -> float:
    try:
        return mpec_residual(inst, w).max()
    except DomainError:
        return math.inf


def _subproblem_options(r: float) -> NlpOptions:
    """Inner tolerances tied to the smoothing parameter ``r``."""
    return NlpOptions(grad_tol=max(1e-9, 1e-2 * r))


# ---------------------------------------------------------------------------
# SBAL continuation shared by SVF and KP


def _sbal_loop(inst: MpecInstance, w0, params: ScheduleParams, callback=None):
    notes = []
    w = np.array(w0, dtype=float)
    sub = smooth_instance(inst, max(params.r(0), MIN_R), params.rho(0))
    trace = [max(_kkt_estimate(sub, w, None), _model_residual(inst, w))]
    ptrace = []
    statuses = []
    warm = None
    criterion = stopping_criterion(0, trace, params.max_outer_k)
    k = 0
    while criterion is None:
        r = params.r(k)
        if r < MIN_R:
            if not any("clamped" in n for n in notes):
                notes.append(f"r clamped to {MIN_R:g} from iteration {k}")
            r = MIN_R
        rho = params.rho(k)
        ptrace.append([r, rho])
        sub = smooth_instance(inst, r, rho)
        try:
            res = solve_subproblem(sub, w, _subproblem_options(r), *(warm or (None, None)))
        except DomainError as exc:
            statuses.append("domain-error")
            notes.append(f"iteration {k}: {exc}")
            if k == 0:
                trace.append(trace[-1])
                criterion = 2
                break
            trace.append(trace[-1])
            k += 1
            criterion = stopping_criterion(k, trace, params.max_outer_k)
            continue
        statuses.append(res.status)
        w = res.w
        warm = ((res.warm_eq, res.warm_in), res.penalty)
        if callback is not None:
            callback(k, r, rho, w.copy(), res)
        k += 1
        trace.append(max(res.kkt_residual, _model_residual(inst, w)))
        criterion = stopping_criterion(k, trace, params.max_outer_k)
    return w, trace, criterion, ptrace, statuses, notes


def _objectives(prob: BilevelProblem, x, y) -> tuple[float, float]:
    pt = prob.point(x, y)
    from .expr import evaluate

    return float(evaluate(prob.F, pt)), float(evaluate(prob.f, pt))


def _run_svf(prob, x0, y0, u0, s0, params, seed, strategy, callback=None) -> SolveReport:
    t0 = time.perf_counter()
    inst = build_svf(prob)
    w0 = inst.join(x=x0, y=y0, u=u0, s=s0)
    w, trace, crit, ptrace, statuses, notes = _sbal_loop(inst, w0, params, callback)
    b = inst.split(w)
    F, f = _objectives(prob, b["x"], b["y"])
    return SolveReport(
        problem=prob.name,
        solver="svf-sbal",
        x=b["x"].tolist(),
        y=b["y"].tolist(),
        u=b["u"].tolist(),
        s=b["s"].tolist(),
        residual_trace=[float(v) for v in trace],
        criterion=crit,
        F=F,
        f=f,
        time_s=time.perf_counter() - t0,
        u0_strategy=strategy,
        seed=seed,
        parameter_trace=ptrace,
        subproblem_status=statuses,
        notes=notes,
    )


def _start(prob, start):
    if start is None:
        return prob.start()
    x0, y0 = start
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if x0.shape != (prob.d,) or y0.shape != (prob.l,):
        raise ValueError("start point dimensions do not match the problem")
    return x0, y0


def _adoption_key(rep: SolveReport):
    return (rep.final_residual, rep.F)


def solve_svf_sbal(
    prob: BilevelProblem,
    start=None,
    params: ScheduleParams | None = None,
    seed: int = DEFAULT_SEED,
    callback=None,
) -> SolveReport:
    """SBAL continuation on the SVF model.

    Convex lower levels start ``u`` at ``y0``. Otherwise both ``u0 = y0`` and
    ``u0 = -y0`` run to completion and the run with the smaller final
    residual (then smaller ``F``) is adopted; the other is summarized in
    ``alternatives``. ``callback(k, r, rho, w, result)`` sees every accepted
    subproblem solution.
    """
    params = params or ScheduleParams()
    x0, y0 = _start(prob, start)
    s0 = initial_multipliers(prob.m, seed)
    t0 = time.perf_counter()
    if prob.lower_convex:
        return _run_svf(prob, x0, y0, y0, s0, params, seed, "y0", callback)
    runs = [
        _run_svf(prob, x0, y0, y0, s0, params, seed, "y0", callback),
        _run_svf(prob, x0, y0, -y0, s0, params, seed, "-y0", callback),
    ]
    runs.sort(key=_adoption_key)
    best = runs[0]
    best.alternatives = [
        {"u0_strategy": r.u0_strategy, "final_residual": r.final_residual, "F": r.F, "criterion": r.criterion}
        for r in runs[1:]
    ]
    best.time_s = time.perf_counter() - t0
    return best


def solve_kp_sbal(
    prob: BilevelProblem,
    start=None,
    params: ScheduleParams | None = None,
    seed: int = DEFAULT_SEED,
    callback=None,
) -> SolveReport:
    """SBAL continuation on the KKT model."""
    params = params or ScheduleParams()
    x0, y0 = _start(prob, start)
    s0 = initial_multipliers(prob.m, seed)
    t0 = time.perf_counter()
    inst = build_kp(prob)
    w, trace, crit, ptrace, statuses, notes = _sbal_loop(inst, inst.join(x=x0, y=y0, s=s0), params, callback)
    b = inst.split(w)
    F, f = _objectives(prob, b["x"], b["y"])
    return SolveReport(
        problem=prob.name,
        solver="kp-sbal",
        x=b["x"].tolist(),
        y=b["y"].tolist(),
        u=None,
        s=b["s"].tolist(),
        residual_trace=[float(v) for v in trace],
        criterion=crit,
        F=F,
        f=f,
        time_s=time.perf_counter() - t0,
        u0_strategy="n/a",
        seed=seed,
        parameter_trace=ptrace,
        subproblem_status=statuses,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# relaxation comparator


class RelaxedKp:
    """KKT model with complementarity relaxed to ``-eps <= s^T g(x, y) <= 0``.

    ``s >= 0`` and ``g <= 0`` stay explicit, which makes ``s^T g <= 0``
    automatic; only the lower bound is added as a row.
    """

    def __init__(self, base: MpecInstance, eps: float):
        if base.kind != "KP":
            raise ValueError("relaxation applies to the KKT model")
        self.base = base
        self.eps = float(eps)
        self._s_off = base.block_map["s"][0]

    @property
    def n(self) -> int:
        return self.base.n

    def objective_value(self, w):
        return self.base.objective_value(w)

    def objective_grad(self, w):
        return self.base.objective_grad(w)

    def eq(self, w):
        return self.base.eq(w)

    def eq_jac(self, w):
        return self.base.eq_jac(w)

    def _relax(self, w):
        _, g, _ = self.base.lower.values(w)
        s = self.base.split(w)["s"]
        return g, s

    def ineq(self, w):
        g, s = self._relax(w)
        return np.append(self.base.ineq(w), -(s @ g) - self.eps)

    def ineq_jac(self, w):
        g, s = self._relax(w)
        _, j_g, _ = self.base.lower.jacobians(w)
        row = -(s @ j_g)
        row[self._s_off : self._s_off + len(s)] -= g
        return np.vstack([self.base.ineq_jac(w), row])

    def exact_hessian(self, w, ineq_weights):
        H = self.base.objective_hess(w)
        H = H + self.base.ineq_hess_weighted(w, ineq_weights[:-1])
        weight = ineq_weights[-1]
        if weight:
            g, s = self._relax(w)
            _, j_g, _ = self.base.lower.jacobians(w)
            rows = [k for _, k in self.base.comp_pairs]
            Hg = self.base.ineq_hess_weighted(w, -weight * s, rows)
            cross = np.zeros((self.n, self.n))
            for i in range(len(s)):
                cross[self._s_off + i] -= weight * j_g[i]
            H = H + Hg + cross + cross.T
        return H


def solve_kp_rlx(prob: BilevelProblem, start=None, params_rlx: RelaxParams | None = None, seed: int = DEFAULT_SEED) -> SolveReport:
    """Relaxation loop on the KKT model with ``eps_k = eps0 * shrink^k``."""
    params_rlx = params_rlx or RelaxParams()
    x0, y0 = _start(prob, start)
    s0 = initial_multipliers(prob.m, seed)
    t0 = time.perf_counter()
    inst = build_kp(prob)
    w = inst.join(x=x0, y=y0, s=s0)

    def residual(sub, w, kkt):
        g, s = sub._relax(w)
        return max(kkt, _model_residual(inst, w), abs(float(s @ g)))

    sub = RelaxedKp(inst, params_rlx.eps(0))
    trace = [residual(sub, w, _kkt_estimate(sub, w, None))]
    ptrace, statuses, notes = [], [], []
    warm = None
    k = 0
    criterion = stopping_criterion(0, trace, params_rlx.max_outer_k)
    while criterion is None:
        eps = params_rlx.eps(k)
        ptrace.append([eps])
        sub = RelaxedKp(inst, eps)
        try:
            res = solve_subproblem(sub, w, NlpOptions(grad_tol=max(1e-9, 1e-2 * eps)), *(warm or (None, None)))
            statuses.append(res.status)
            w = res.w
            warm = ((res.warm_eq, res.warm_in), res.penalty)
            trace.append(residual(sub, w, res.kkt_residual))
        except DomainError as exc:
            statuses.append("domain-error")
            notes.append(f"iteration {k}: {exc}")
            trace.append(trace[-1])
        k += 1
        criterion = stopping_criterion(k, trace, params_rlx.max_outer_k)
    b = inst.split(w)
    F, f = _objectives(prob, b["x"], b["y"])
    return SolveReport(
        problem=prob.name,
        solver="kp-rlx",
        x=b["x"].tolist(),
        y=b["y"].tolist(),
        u=None,
        s=b["s"].tolist(),
        residual_trace=[float(v) for v in trace],
        criterion=criterion,
        F=F,
        f=f,
        time_s=time.perf_counter() - t0,
        u0_strategy="n/a",
        seed=seed,
        parameter_trace=ptrace,
        subproblem_status=statuses,
        notes=notes,
    )


SOLVERS = {
    "svf-sbal": solve_svf_sbal,
    "kp-sbal": solve_kp_sbal,
    "kp-rlx": solve_kp_rlx,
}
