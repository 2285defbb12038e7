"""Bounded-variable revised simplex.

Problem form::

    min  c @ x
    s.t. A_eq @ x == b_eq
         A_ub @ x <= b_ub
         lo <= x <= hi          (entries may be +/- inf)

Inequalities get slack columns, so the engine works on ``A z = b`` with box
bounds.  Phase 1 minimises the sum of artificial variables; artificials are
then frozen at zero for phase 2.  Pricing is Dantzig's rule, switching to
Bland's rule after a run of degenerate pivots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"

_FEAS_TOL = 1e-9
_OPT_TOL = 1e-9
_PIV_TOL = 1e-11


@dataclass
class LinearProgram:
    c: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A_eq, self.b_eq = _pair(self.A_eq, self.b_eq, n, "eq")
        self.A_ub, self.b_ub = _pair(self.A_ub, self.b_ub, n, "ub")
        self.lo = np.zeros(n) if self.lo is None else np.broadcast_to(
            np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.full(n, np.inf) if self.hi is None else np.broadcast_to(
            np.asarray(self.hi, dtype=float), (n,)).copy()
        if np.any(self.lo > self.hi):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.c.size

    def residuals(self, x):
        """Max violation of equalities, inequalities and bounds at ``x``."""
        x = np.asarray(x, dtype=float)
        eq = np.abs(self.A_eq @ x - self.b_eq).max(initial=0.0)
        ub = np.maximum(self.A_ub @ x - self.b_ub, 0).max(initial=0.0)
        bd = max(np.maximum(self.lo - x, 0).max(initial=0.0),
                 np.maximum(x - self.hi, 0).max(initial=0.0))
        return float(eq), float(ub), float(bd)

    def dump(self) -> str:
        """Plain-text listing for external cross-checks."""
        lines = [f"minimize {_expr(self.c)}", "subject to"]
        for k, (row, rhs) in enumerate(zip(self.A_eq, self.b_eq)):
            lines.append(f"  e{k}: {_expr(row)} = {rhs:.17g}")
        for k, (row, rhs) in enumerate(zip(self.A_ub, self.b_ub)):
            lines.append(f"  u{k}: {_expr(row)} <= {rhs:.17g}")
        lines.append("bounds")
        for j, (a, b) in enumerate(zip(self.lo, self.hi)):
            lines.append(f"  {a:.17g} <= x{j} <= {b:.17g}")
        return "\n".join(lines) + "\n"


def _expr(row):
    terms = [f"{v:+.17g} x{j}" for j, v in enumerate(row) if v != 0]
    return " ".join(terms) if terms else "0"


def _pair(a, b, n, tag):
    if a is None:
        return np.zeros((0, n)), np.zeros(0)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if a.shape[1] != n or a.shape[0] != b.size:
        raise ValueError(f"A_{tag}/b_{tag} dimensions inconsistent with {n} variables")
    return a, b


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None = None
    obj: float = np.nan
    dual_bound: float = np.nan
    y: np.ndarray | None = field(default=None, repr=False)
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class _Simplex:
    def __init__(self, A, b, lo, hi, max_iter):
        self.A = A
        self.b = b
        self.lo = lo
        self.hi = hi
        self.m, self.n = A.shape
        self.max_iter = max_iter
        self.iterations = 0

    def _factor(self):
        self.lu = sla.lu_factor(self.A[:, self.basis], check_finite=False)

    def _refresh(self):
        self._factor()
        nb = self.nonbasic
        rhs = self.b - self.A[:, nb] @ self.x[nb]
        self.x[self.basis] = sla.lu_solve(self.lu, rhs, check_finite=False)

    def run(self, cost):
        """Optimise ``cost`` from the current basis; returns a status string."""
        degenerate = 0
        bland = False
        limit = 10 * (self.m + self.n)
        refactor_every = 50
        since = 0
        while True:
            if self.iterations >= self.max_iter:
                return ITERATION_LIMIT
            y = sla.lu_solve(self.lu, cost[self.basis], trans=1, check_finite=False)
            d = cost - self.A.T @ y
            nb = self.nonbasic
            x = self.x
            # candidates: improving direction that the bounds allow
            up = (d < -_OPT_TOL) & (x < self.hi - _FEAS_TOL)
            down = (d > _OPT_TOL) & (x > self.lo + _FEAS_TOL)
            mask = np.zeros(self.n, dtype=bool)
            mask[nb] = True
            cand = mask & (up | down)
            if not cand.any():
                self.y, self.d = y, d
                return OPTIMAL
            idx = np.flatnonzero(cand)
            if bland:
                q = int(idx[0])
            else:
                q = int(idx[np.argmax(np.abs(d[idx]))])
            direction = 1.0 if d[q] < 0 else -1.0

            col = sla.lu_solve(self.lu, self.A[:, q], check_finite=False)
            # basic variables move by -direction * col * t
            delta = -direction * col
            xb = x[self.basis]
            lob, hib = self.lo[self.basis], self.hi[self.basis]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.full(self.m, np.inf)
                dec = delta < -_PIV_TOL
                inc = delta > _PIV_TOL
                ratio[dec] = (xb[dec] - lob[dec]) / -delta[dec]
                ratio[inc] = (hib[inc] - xb[inc]) / delta[inc]
            ratio = np.maximum(ratio, 0.0)
            t_bound = self.hi[q] - self.lo[q]
            t_row = ratio.min(initial=np.inf)
            if not np.isfinite(t_row) and not np.isfinite(t_bound):
                return UNBOUNDED

            self.iterations += 1
            if t_bound <= t_row:
                # bound flip, basis unchanged
                t = t_bound
                x[q] += direction * t
                x[self.basis] = xb + delta * t
            else:
                t = t_row
                ties = np.flatnonzero(ratio <= t + 1e-12)
                if bland:
                    r = int(ties[np.argmin(self.basis[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(delta[ties]))])
                leaving = self.basis[r]
                x[q] += direction * t
                x[self.basis] = xb + delta * t
                # snap leaving variable onto the bound it hit
                x[leaving] = lob[r] if delta[r] < 0 else hib[r]
                self.basis[r] = q
                self.in_basis[leaving] = False
                self.in_basis[q] = True
                self.nonbasic = np.flatnonzero(~self.in_basis)
                since += 1
                if since >= refactor_every:
                    self._refresh()
                    since = 0
                else:
                    self._factor()
            if t <= 1e-12:
                degenerate += 1
                if degenerate > limit:
                    bland = True
            else:
                degenerate = 0

    def start(self, basis, x):
        self.basis = np.asarray(basis, dtype=int)
        self.in_basis = np.zeros(self.n, dtype=bool)
        self.in_basis[self.basis] = True
        self.nonbasic = np.flatnonzero(~self.in_basis)
        self.x = x
        self._refresh()


def lp_solve(lp: LinearProgram, max_iter: int = 50_000, method: str = "simplex") -> LPResult:
    """Solve ``lp``; infeasible and unbounded are statuses, not exceptions.

    ``method="highs"`` routes through SciPy's HiGHS for problems beyond desk
    scale; the default is the in-house revised simplex.
    """
    if method == "highs":
        return _lp_highs(lp)
    if method != "simplex":
        raise ValueError(f"unknown LP method {method!r}")

    n = lp.n
    m_eq, m_ub = lp.A_eq.shape[0], lp.A_ub.shape[0]
    m = m_eq + m_ub
    if m == 0:
        return _box_only(lp)

    # structural | slacks | artificials
    A = np.zeros((m, n + m_ub))
    A[:m_eq, :n] = lp.A_eq
    A[m_eq:, :n] = lp.A_ub
    A[m_eq:, n:] = np.eye(m_ub)
    b = np.r_[lp.b_eq, lp.b_ub]
    lo = np.r_[lp.lo, np.zeros(m_ub)]
    hi = np.r_[lp.hi, np.full(m_ub, np.inf)]

    # nonbasic start: finite lower bound, else finite upper bound, else zero
    x0 = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
    resid = b - A @ x0
    sign = np.where(resid >= 0, 1.0, -1.0)
    art = np.diag(sign)
    A_full = np.hstack([A, art])
    lo_full = np.r_[lo, np.zeros(m)]
    hi_full = np.r_[hi, np.full(m, np.inf)]
    x_full = np.r_[x0, np.abs(resid)]
    nt = A.shape[1]

    solver = _Simplex(A_full, b, lo_full, hi_full, max_iter)
    solver.start(np.arange(nt, nt + m), x_full)
    phase1_cost = np.r_[np.zeros(nt), np.ones(m)]
    status = solver.run(phase1_cost)
    if status == ITERATION_LIMIT:
        return LPResult(ITERATION_LIMIT, iterations=solver.iterations)
    infeas = solver.x[nt:].sum()
    scale = 1.0 + np.abs(b).max(initial=0.0)
    if infeas > 1e-8 * scale:
        return LPResult(INFEASIBLE, iterations=solver.iterations)

    # freeze artificials at zero
    solver.x[nt:] = 0.0
    solver.hi[nt:] = 0.0
    solver._refresh()
    cost = np.r_[lp.c, np.zeros(m_ub + m)]
    status = solver.run(cost)
    if status != OPTIMAL:
        return LPResult(status, iterations=solver.iterations)
    solver._refresh()
    x = solver.x[:n].copy()
    # clean bound noise
    x = np.minimum(np.maximum(x, lp.lo), lp.hi)
    obj = float(lp.c @ x)
    dual = _dual_bound(solver, cost)
    return LPResult(OPTIMAL, x=x, obj=obj, dual_bound=dual, y=solver.y.copy(),
                    iterations=solver.iterations)


def _dual_bound(solver, cost):
    """Lagrangian dual value ``b'y + sum_j d_j * bound_j`` at the final basis."""
    y = sla.lu_solve(solver.lu, cost[solver.basis], trans=1, check_finite=False)
    d = cost - solver.A.T @ y
    val = solver.b @ y
    for j in solver.nonbasic:
        if d[j] == 0:
            continue
        bound = solver.lo[j] if d[j] > 0 else solver.hi[j]
        if not np.isfinite(bound):
            bound = solver.x[j]
        val += d[j] * bound
    return float(val)


def _box_only(lp):
    x = np.where(lp.c > 0, lp.lo, np.where(lp.c < 0, lp.hi, np.clip(0.0, lp.lo, lp.hi)))
    if not np.all(np.isfinite(x)):
        return LPResult(UNBOUNDED)
    obj = float(lp.c @ x)
    return LPResult(OPTIMAL, x=x, obj=obj, dual_bound=obj)


def _lp_highs(lp):
    from scipy.optimize import linprog

    res = linprog(lp.c, A_ub=lp.A_ub if lp.A_ub.size else None,
                  b_ub=lp.b_ub if lp.A_ub.size else None,
                  A_eq=lp.A_eq if lp.A_eq.size else None,
                  b_eq=lp.b_eq if lp.A_eq.size else None,
                  bounds=list(zip(np.where(np.isfinite(lp.lo), lp.lo, None),
                                  np.where(np.isfinite(lp.hi), lp.hi, None))),
                  method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status == 0:
        return LPResult(OPTIMAL, x=res.x, obj=float(res.fun), dual_bound=float(res.fun),
                        iterations=int(res.nit))
    if res.status == 2:
        return LPResult(INFEASIBLE)
    if res.status == 3:
        return LPResult(UNBOUNDED)
    return LPResult(ITERATION_LIMIT)
