"""Convex QP with diagonal Hessian by ADMM operator splitting.

Solves::

    min  sum_i q_i x_i**2 + c @ x
    s.t. A_eq @ x == b_eq,  A_ub @ x <= b_ub,  lo <= x <= hi

All constraints are stacked as ``l <= M x <= u`` and handled by the usual
splitting ``M x = z, z in [l, u]``.  After the residuals drop below
tolerance an active-set polish step solves the reduced KKT system, which
recovers vertex-accurate solutions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from flowctrl.optcore.lp import INFEASIBLE, OPTIMAL, UNBOUNDED, _pair

log = logging.getLogger(__name__)


class QPIterationError(RuntimeError):
    """ADMM exhausted its iteration budget; carries the final residuals."""

    def __init__(self, iterations, primal, dual):
        super().__init__(f"ADMM stopped after {iterations} iterations "
                         f"(primal residual {primal:.3e}, dual residual {dual:.3e})")
        self.iterations = iterations
        self.primal = primal
        self.dual = dual


@dataclass
class QuadraticProgram:
    q: np.ndarray
    c: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        if np.any(self.q < 0):
            raise ValueError("quadratic coefficients must be nonnegative")
        self.c = np.zeros(n) if self.c is None else np.asarray(self.c, dtype=float).ravel()
        self.A_eq, self.b_eq = _pair(self.A_eq, self.b_eq, n, "eq")
        self.A_ub, self.b_ub = _pair(self.A_ub, self.b_ub, n, "ub")
        self.lo = np.full(n, -np.inf) if self.lo is None else np.broadcast_to(
            np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.full(n, np.inf) if self.hi is None else np.broadcast_to(
            np.asarray(self.hi, dtype=float), (n,)).copy()

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, x) -> float:
        return float(self.q @ (x * x) + self.c @ x)

    def stacked(self):
        n = self.n
        m = np.vstack([self.A_eq, self.A_ub, np.eye(n)])
        lower = np.r_[self.b_eq, np.full(self.A_ub.shape[0], -np.inf), self.lo]
        upper = np.r_[self.b_eq, self.b_ub, self.hi]
        return m, lower, upper

    def max_violation(self, x) -> float:
        m, lower, upper = self.stacked()
        mx = m @ x
        return float(max(np.maximum(lower - mx, 0).max(initial=0.0),
                         np.maximum(mx - upper, 0).max(initial=0.0)))


@dataclass
class QPResult:
    status: str
    x: np.ndarray | None = None
    obj: float = np.nan
    y: np.ndarray | None = field(default=None, repr=False)
    iterations: int = 0
    primal_residual: float = np.nan
    dual_residual: float = np.nan
    polished: bool = False
    trace: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def qp_solve(qp: QuadraticProgram, eps: float = 1e-7, max_iter: int = 50_000,
             rho: float = 1.0, sigma: float = 1e-6, alpha: float = 1.6,
             adapt_every: int = 50, polish: bool = True) -> QPResult:
    m_mat, lower, upper = qp.stacked()
    n = qp.n
    pdiag = 2.0 * qp.q
    c = qp.c
    eq = np.isclose(lower, upper)
    free = np.isinf(lower) & np.isinf(upper)

    def rho_vec(r):
        v = np.full(m_mat.shape[0], r)
        v[eq] = 1e3 * r
        v[free] = 1e-6
        return v

    rv = rho_vec(rho)

    def factor(rv):
        kkt = np.diag(pdiag + sigma) + m_mat.T @ (rv[:, None] * m_mat)
        return sla.cho_factor(kkt, check_finite=False)

    chol = factor(rv)
    x = np.zeros(n)
    z = np.clip(m_mat @ x, lower, upper)
    y = np.zeros(m_mat.shape[0])
    trace = []
    r_prim = r_dual = np.inf

    for it in range(1, max_iter + 1):
        rhs = sigma * x - c + m_mat.T @ (rv * z - y)
        x_t = sla.cho_solve(chol, rhs, check_finite=False)
        z_t = m_mat @ x_t
        x_new = alpha * x_t + (1 - alpha) * x
        z_relax = alpha * z_t + (1 - alpha) * z
        z_new = np.clip(z_relax + y / rv, lower, upper)
        y_new = y + rv * (z_relax - z_new)
        dy = y_new - y
        dx = x_new - x
        x, z, y = x_new, z_new, y_new

        mx = m_mat @ x
        px = pdiag * x
        aty = m_mat.T @ y
        r_prim = np.abs(mx - z).max(initial=0.0)
        r_dual = np.abs(px + c + aty).max(initial=0.0)
        trace.append(qp.objective(x) + y @ (mx - z) + 0.5 * (rv * (mx - z) ** 2).sum())

        if r_prim < eps and r_dual < eps:
            break

        if _primal_infeasible(dy, m_mat, lower, upper):
            return QPResult(INFEASIBLE, iterations=it, primal_residual=r_prim,
                            dual_residual=r_dual, trace=trace)
        if _dual_infeasible(dx, pdiag, c, m_mat, lower, upper):
            return QPResult(UNBOUNDED, iterations=it, primal_residual=r_prim,
                            dual_residual=r_dual, trace=trace)

        if it % adapt_every == 0:
            # residual balancing
            scale_p = r_prim / max(np.abs(mx).max(initial=0.0), np.abs(z).max(initial=0.0), 1e-12)
            scale_d = r_dual / max(np.abs(px).max(initial=0.0), np.abs(aty).max(initial=0.0),
                                   np.abs(c).max(initial=0.0), 1e-12)
            new_rho = rho * np.sqrt(scale_p / max(scale_d, 1e-30))
            new_rho = float(np.clip(new_rho, 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                rv = rho_vec(rho)
                chol = factor(rv)
    else:
        raise QPIterationError(max_iter, r_prim, r_dual)

    result = QPResult(OPTIMAL, x=x, obj=qp.objective(x), y=y, iterations=it,
                      primal_residual=r_prim, dual_residual=r_dual, trace=trace)
    if polish:
        _polish(qp, m_mat, lower, upper, pdiag, result)
    return result


def _primal_infeasible(dy, m_mat, lower, upper, eps=1e-5):
    norm = np.abs(dy).max(initial=0.0)
    if norm < 1e-12:
        return False
    if np.abs(m_mat.T @ dy).max(initial=0.0) > eps * norm:
        return False
    pos, neg = np.maximum(dy, 0), np.minimum(dy, 0)
    if np.any((pos > 0) & np.isinf(upper)) or np.any((neg < 0) & np.isinf(lower)):
        return False
    support = (np.where(pos > 0, upper, 0) * pos).sum() + (np.where(neg < 0, lower, 0) * neg).sum()
    return support < -eps * norm


def _dual_infeasible(dx, pdiag, c, m_mat, lower, upper, eps=1e-5):
    norm = np.abs(dx).max(initial=0.0)
    if norm < 1e-12:
        return False
    if np.abs(pdiag * dx).max(initial=0.0) > eps * norm or c @ dx > -eps * norm:
        return False
    mdx = m_mat @ dx
    ok_hi = np.isinf(upper) | (mdx <= eps * norm)
    ok_lo = np.isinf(lower) | (mdx >= -eps * norm)
    return bool(np.all(ok_hi & ok_lo))


def _polish(qp, m_mat, lower, upper, pdiag, result, delta=1e-9, refine=10):
    """Solve the equality-constrained KKT system on the guessed active set."""
    x, y = result.x, result.y
    mx = m_mat @ x
    tol = 1e-7 * (1 + np.abs(y).max(initial=0.0))
    act_lo = (y < -tol) | np.isclose(lower, upper)
    act_hi = (y > tol) & ~act_lo
    act = act_lo | act_hi
    if not act.any():
        act_rows = np.zeros(0, dtype=int)
    else:
        act_rows = np.flatnonzero(act)
    a = m_mat[act_rows]
    rhs_b = np.where(act_lo[act_rows], lower[act_rows], upper[act_rows])
    n, k = qp.n, len(act_rows)
    kkt = np.block([[np.diag(pdiag), a.T], [a, np.zeros((k, k))]])
    reg = kkt.copy()
    reg[:n, :n] += delta * np.eye(n)
    reg[n:, n:] -= delta * np.eye(k)
    rhs = np.r_[-qp.c, rhs_b]
    try:
        lu = sla.lu_factor(reg, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    for _ in range(refine):
        sol = sol + sla.lu_solve(lu, rhs - kkt @ sol, check_finite=False)
    xp = sol[:n]
    yp = np.zeros(m_mat.shape[0])
    yp[act_rows] = sol[n:]
    if not np.all(np.isfinite(xp)):
        return
    # accept only if feasible and dual-consistent
    mxp = m_mat @ xp
    viol = max(np.maximum(lower - mxp, 0).max(initial=0.0),
               np.maximum(mxp - upper, 0).max(initial=0.0))
    sign_ok = np.all(yp[act_lo & ~np.isclose(lower, upper)] <= 1e-9) and np.all(yp[act_hi] >= -1e-9)
    r_dual = np.abs(pdiag * xp + qp.c + m_mat.T @ yp).max(initial=0.0)
    if viol <= max(result.primal_residual, 1e-10) and sign_ok and r_dual <= max(result.dual_residual, 1e-9):
        result.x = xp
        result.y = yp
        result.obj = qp.objective(xp)
        result.primal_residual = viol
        result.dual_residual = r_dual
        result.polished = True
