"""Barrier-smoothed complementarity: the shift pair and smoothed subproblems.

For each complementarity pair ``0 <= s_i  _|_  -g_i >= 0`` the barrier slack
is eliminated in closed form, giving

    z     = (sqrt(t^2 + 4 r rho) - t) / 2
    kappa = (sqrt(t^2 + 4 r rho) + t) / 2,      t = rho * s + g,

so that ``z * kappa = rho * r`` and ``z + g = kappa - rho * s``. The smoothed
subproblem replaces ``s_i`` by ``kappa_i / rho`` in the stationarity rows and
adds ``psi_i = z_i + g_i = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .reformulate import MpecInstance


class SingularShiftError(ZeroDivisionError):
    """The shift pair is not differentiable (``z + kappa = 0``)."""


@dataclass(frozen=True)
class ShiftPair:
    z: float
    kappa: float
    g_value: float
    s_value: float
    r: float
    rho: float


@dataclass(frozen=True)
class ShiftDerivatives:
    """Derivatives of ``z`` and ``kappa`` with respect to ``(x, u)`` and ``s``."""

    grad_z: np.ndarray
    grad_kappa: np.ndarray
    dz_ds: float
    dkappa_ds: float


def _check(r, rho):
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if not r >= 0:
        raise ValueError(f"r must be nonnegative, got {r}")


def shift_arrays(g, s, r: float, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``(z, kappa)`` with the cancellation-safe branch."""
    _check(r, rho)
    g = np.asarray(g, dtype=float)
    s = np.asarray(s, dtype=float)
    t = rho * s + g
    prod = rho * r
    root = np.hypot(t, 2.0 * math.sqrt(prod))
    with np.errstate(divide="ignore", invalid="ignore"):
        big_k = 0.5 * (root + t)
        big_z = 0.5 * (root - t)
        pos = t >= 0
        # larger root explicitly, smaller one from the product
        kappa = np.where(pos, big_k, np.where(big_z > 0, prod / big_z, 0.0))
        z = np.where(pos, np.where(big_k > 0, prod / big_k, 0.0), big_z)
    return z, kappa


def shift(g_value: float, s_value: float, r: float, rho: float) -> ShiftPair:
    """Closed-form shift pair for one complementarity pair."""
    z, kappa = shift_arrays(g_value, s_value, r, rho)
    return ShiftPair(float(z), float(kappa), float(g_value), float(s_value), float(r), float(rho))


def shift_derivatives(g_value, s_value, grad_g, r: float, rho: float) -> ShiftDerivatives:
    """Gradients of the shift pair; requires ``r > 0``."""
    if not r > 0:
        raise SingularShiftError("shift derivatives need r > 0")
    pair = shift(g_value, s_value, r, rho)
    total = pair.z + pair.kappa
    if total == 0.0:
        raise SingularShiftError("z + kappa vanished")
    a = pair.z / total
    b = pair.kappa / total
    grad_g = np.asarray(grad_g, dtype=float)
    return ShiftDerivatives(
        grad_z=-a * grad_g,
        grad_kappa=b * grad_g,
        dz_ds=-rho * a,
        dkappa_ds=rho * b,
    )


@dataclass(frozen=True)
class SmoothedState:
    """Iterate blocks with the shifts they imply under ``(r, rho)``."""

    blocks: dict
    z: np.ndarray
    kappa: np.ndarray
    r: float
    rho: float

    @property
    def multiplier_estimate(self) -> np.ndarray:
        return self.kappa / self.rho


class SmoothedInstance:
    """Smoothed subproblem over the composite vector of ``base``.

    Equalities are the ``l`` rows of ``phi`` followed by the ``m`` rows of
    ``psi``. Inequalities are the rows of ``base`` minus those tied to
    complementarity (the lower constraints carrying ``s`` and ``-s <= 0``).
    """

    def __init__(self, base: MpecInstance, r: float, rho: float):
        if not r > 0:
            raise SingularShiftError("smoothing needs r > 0")
        if not rho > 0:
            raise ValueError(f"rho must be positive, got {rho}")
        self.base = base
        self.r = float(r)
        self.rho = float(rho)
        comp_rows = {row for _, row in base.comp_pairs}
        self.kept_rows = [
            k for k, lab in enumerate(base.inequality_labels) if k not in comp_rows and lab[0] != "s"
        ]
        self.inequality_labels = [base.inequality_labels[k] for k in self.kept_rows]
        self._s_off = base.block_map["s"][0]

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def kind(self) -> str:
        return self.base.kind

    @property
    def l(self) -> int:
        return self.base.prob.l

    @property
    def m(self) -> int:
        return self.base.prob.m

    @property
    def n_eq(self) -> int:
        return self.l + self.m

    @property
    def n_ineq(self) -> int:
        return len(self.kept_rows)

    def with_params(self, r: float, rho: float) -> "SmoothedInstance":
        return SmoothedInstance(self.base, r, rho)

    def state(self, w) -> SmoothedState:
        _, g, _ = self.base.lower.values(w)
        s = self.base.split(w)["s"]
        z, kappa = shift_arrays(g, s, self.r, self.rho)
        return SmoothedState(self.base.split(w), z, kappa, self.r, self.rho)

    # objective is the upper objective, unchanged
    def objective_value(self, w) -> float:
        return self.base.objective_value(w)

    def objective_grad(self, w) -> np.ndarray:
        return self.base.objective_grad(w)

    def _shifts(self, w):
        grad_f, g, grad_g = self.base.lower.values(w)
        s = self.base.split(w)["s"]
        z, kappa = shift_arrays(g, s, self.r, self.rho)
        return grad_f, g, grad_g, z, kappa

    def phi(self, w) -> np.ndarray:
        grad_f, _, grad_g, _, kappa = self._shifts(w)
        return grad_f + grad_g.T @ (kappa / self.rho)

    def psi(self, w) -> np.ndarray:
        _, g, _, z, _ = self._shifts(w)
        return z + g

    def eq(self, w) -> np.ndarray:
        grad_f, g, grad_g, z, kappa = self._shifts(w)
        return np.concatenate([grad_f + grad_g.T @ (kappa / self.rho), z + g])

    def eq_jac(self, w) -> np.ndarray:
        grad_f, g, grad_g, z, kappa = self._shifts(w)
        j_grad_f, j_g, j_grad_g = self.base.lower.jacobians(w)
        m, n = self.m, self.n
        total = z + kappa
        a = z / total
        b = kappa / total
        # d kappa_i / dw and d z_i / dw
        d_kappa = b[:, None] * j_g
        d_z = -a[:, None] * j_g
        idx = self._s_off + np.arange(m)
        d_kappa[np.arange(m), idx] += self.rho * b
        d_z[np.arange(m), idx] -= self.rho * a
        j_phi = j_grad_f + np.einsum("i,ijn->jn", kappa / self.rho, j_grad_g) + grad_g.T @ d_kappa / self.rho
        j_psi = d_z + j_g
        return np.vstack([j_phi, j_psi]) if m else j_phi.reshape(self.l, n)

    def ineq(self, w) -> np.ndarray:
        return self.base.ineq(w)[self.kept_rows]

    def ineq_jac(self, w) -> np.ndarray:
        return self.base.ineq_jac(w)[self.kept_rows]

    def exact_hessian(self, w, ineq_weights) -> np.ndarray:
        """Objective Hessian plus weighted inequality Hessians (all symbolic)."""
        H = self.base.objective_hess(w)
        if self.kept_rows:
            H = H + self.base.ineq_hess_weighted(w, ineq_weights, self.kept_rows)
        return H

    @cached_property
    def _lower_objective(self):
        from . import expr as ex

        f_v = ex.substitute(self.base.prob.f, {"y": self.base.lower_block})
        return ex.compile_expr(f_v, self.base.layout), ex.compile_many(
            [ex.diff(f_v, b, i) for (b, i) in sorted(self.base.layout, key=self.base.layout.get)],
            self.base.layout,
        )


def smooth_instance(base: MpecInstance, r: float, rho: float) -> SmoothedInstance:
    """Smoothed subproblem of ``base`` at parameters ``(r, rho)``."""
    return SmoothedInstance(base, r, rho)


def augmented_objective(inst: SmoothedInstance, w, s_estimate=None) -> float:
    """Reduced augmented Lagrangian of the lower level with ``z`` eliminated.

    ``f(x, v) + sum_i [-r ln z_i + s_i (z_i + g_i) + (z_i + g_i)^2 / (2 rho)]``
    where ``v`` is the lower block of the instance and ``s`` comes from ``w``
    unless ``s_estimate`` is given.
    """
    w = np.asarray(w, dtype=float)
    f_fn, _ = inst._lower_objective
    _, g, _ = inst.base.lower.values(w)
    s = inst.base.split(w)["s"] if s_estimate is None else np.asarray(s_estimate, dtype=float)
    z, _ = shift_arrays(g, s, inst.r, inst.rho)
    if np.any(z <= 0):
        raise ValueError("implied z must be strictly positive")
    h = z + g
    return float(f_fn(w) + np.sum(-inst.r * np.log(z) + s * h + h * h / (2.0 * inst.rho)))


def augmented_gradient(inst: SmoothedInstance, w, s_estimate=None) -> np.ndarray:
    """Gradient of :func:`augmented_objective` over ``w`` by the chain rule through ``z``.

    Computed without the envelope identity, so comparing it with ``phi`` and
    ``psi`` checks that identity.
    """
    w = np.asarray(w, dtype=float)
    _, df_fn = inst._lower_objective
    _, g, _ = inst.base.lower.values(w)
    _, j_g, _ = inst.base.lower.jacobians(w)
    s = inst.base.split(w)["s"] if s_estimate is None else np.asarray(s_estimate, dtype=float)
    grad = df_fn(w).astype(float)
    off = inst.base.block_map["s"][0]
    for i in range(inst.m):
        d = shift_derivatives(g[i], s[i], j_g[i], inst.r, inst.rho)
        z = shift(g[i], s[i], inst.r, inst.rho).z
        h = z + g[i]
        dz = d.grad_z.copy()
        dz[off + i] += d.dz_ds
        dh = dz + j_g[i]
        grad += -inst.r / z * dz + s[i] * dh + h / inst.rho * dh
        grad[off + i] += h
    return grad
