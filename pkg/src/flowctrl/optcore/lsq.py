"""Projected Levenberg-Marquardt for bound-constrained least squares."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


class JacobianMismatchError(ValueError):
    """Analytic Jacobian disagrees with central finite differences."""

    def __init__(self, error, worst):
        super().__init__(f"Jacobian check failed: relative error {error:.3e} "
                         f"(worst entry residual {worst[0]}, variable {worst[1]})")
        self.error = error
        self.worst = worst


@dataclass
class LeastSquaresProblem:
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    lo: np.ndarray
    hi: np.ndarray

    def cost(self, z) -> float:
        r = self.residual(z)
        return 0.5 * float(r @ r)


@dataclass
class LMResult:
    z: np.ndarray
    cost: float
    converged: bool
    stalled: bool = False
    iterations: int = 0
    reason: str = ""
    trace: list = field(default_factory=list, repr=False)


def fd_jacobian(fun, z, step=1e-6):
    z = np.asarray(z, dtype=float)
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = step
        cols.append((fun(z + e) - fun(z - e)) / (2 * step))
    return np.column_stack(cols)


def check_jacobian(problem: LeastSquaresProblem, z, step=1e-6, rtol=1e-4):
    """Raise :class:`JacobianMismatchError` when the analytic Jacobian is off."""
    jac = np.asarray(problem.jacobian(z))
    num = fd_jacobian(problem.residual, z, step)
    diff = np.abs(jac - num)
    scale = max(1.0, np.abs(num).max(initial=0.0))
    err = diff.max(initial=0.0) / scale
    if err > rtol:
        raise JacobianMismatchError(err, np.unravel_index(np.argmax(diff), diff.shape))
    return err


def lm_solve(problem: LeastSquaresProblem, z0, max_iter: int = 500, lam0: float = 1e-3,
             xtol: float = 1e-10, ftol: float = 1e-10, gtol: float = 1e-10,
             verify_jacobian: bool = True) -> LMResult:
    """Minimise ``0.5 * ||r(z)||^2`` subject to ``lo <= z <= hi``.

    Steps are computed on the variables not pinned at an active bound, clamped
    into the box, and accepted only when the cost decreases.  The damping is
    halved on acceptance and doubled on rejection.
    """
    lo = np.asarray(problem.lo, dtype=float)
    hi = np.asarray(problem.hi, dtype=float)
    z = np.asarray(z0, dtype=float).copy()
    if np.any(z < lo) or np.any(z > hi):
        raise ValueError("starting point outside bounds")
    if verify_jacobian:
        check_jacobian(problem, z)

    r = problem.residual(z)
    cost = 0.5 * float(r @ r)
    trace = [cost]
    lam = lam0
    jac = problem.jacobian(z)
    reason = "max_iter"
    converged = False
    stalled = False

    for it in range(1, max_iter + 1):
        g = jac.T @ r
        at_lo = (z <= lo) & (g > 0)
        at_hi = (z >= hi) & (g < 0)
        free = ~(at_lo | at_hi)
        pg = np.where(free, g, 0.0)
        if np.abs(pg).max(initial=0.0) <= gtol * (1.0 + cost):
            reason, converged = "gradient", True
            break

        jf = jac[:, free]
        h = jf.T @ jf
        diag = np.maximum(np.diag(h), 1e-12)
        accepted = False
        while lam < 1e16:
            try:
                step_f = np.linalg.solve(h + lam * np.diag(diag), -g[free])
            except np.linalg.LinAlgError:
                lam *= 2.0
                continue
            z_try = z.copy()
            z_try[free] += step_f
            np.clip(z_try, lo, hi, out=z_try)
            try:
                r_try = problem.residual(z_try)
                cost_try = 0.5 * float(r_try @ r_try)
            except (ValueError, ArithmeticError, RuntimeError):
                cost_try = np.inf
            if np.isfinite(cost_try) and cost_try < cost:
                accepted = True
                break
            lam *= 2.0
        if not accepted:
            # no decrease representable in floating point: converged if stationary
            if np.abs(pg).max(initial=0.0) <= 1e-8 * (1.0 + cost):
                reason, converged = "stationary", True
            else:
                reason, stalled = "stall", True
            break

        step = z_try - z
        decrease = cost - cost_try
        z, r, cost = z_try, r_try, cost_try
        trace.append(cost)
        lam = max(lam * 0.5, 1e-12)
        jac = problem.jacobian(z)
        if np.abs(step).max(initial=0.0) < xtol * (1.0 + np.abs(z).max(initial=0.0)):
            reason, converged = "step", True
            break
        if decrease <= ftol * max(cost + decrease, 1e-300):
            reason, converged = "ftol", True
            break

    return LMResult(z=z, cost=cost, converged=converged, stalled=stalled,
                    iterations=len(trace) - 1, reason=reason, trace=trace)
