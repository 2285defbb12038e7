"""Best-first branch and bound over LP relaxations."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np

from flowctrl.optcore.lp import (
    INFEASIBLE,
    OPTIMAL,
    UNBOUNDED,
    LinearProgram,
    lp_solve,
)

NODE_LIMIT = "node_limit"
INT_TOL = 1e-6


@dataclass
class MixedIntegerProgram:
    lp: LinearProgram
    integer_mask: np.ndarray

    def __post_init__(self):
        self.integer_mask = np.asarray(self.integer_mask, dtype=bool)
        if self.integer_mask.size != self.lp.n:
            raise ValueError("integer_mask length must equal the variable count")

    def dump(self) -> str:
        ints = " ".join(f"x{j}" for j in np.flatnonzero(self.integer_mask))
        return self.lp.dump() + f"integer\n  {ints}\n"


@dataclass
class MILPResult:
    status: str
    x: np.ndarray | None = None
    obj: float = np.inf
    bound: float = -np.inf
    nodes: int = 0
    proven_optimal: bool = False

    @property
    def gap(self) -> float:
        if not np.isfinite(self.obj):
            return np.inf
        return abs(self.obj - self.bound) / max(1.0, abs(self.obj))

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def milp_solve(mip: MixedIntegerProgram, node_limit: int = 100_000, method: str = "bnb",
               lp_method: str = "simplex", abs_gap: float = 1e-9) -> MILPResult:
    """Solve ``mip`` by branch and bound.

    Branches on the most fractional integer variable (lowest index on ties) and
    always expands the open node with the smallest relaxation bound.
    ``method="highs"`` delegates to SciPy's HiGHS MILP instead.
    """
    if method == "highs":
        return _milp_highs(mip, node_limit)
    if method != "bnb":
        raise ValueError(f"unknown MILP method {method!r}")

    base = mip.lp
    lo0 = base.lo.copy()
    hi0 = base.hi.copy()
    ints = mip.integer_mask
    lo0[ints] = np.ceil(lo0[ints] - INT_TOL)
    hi0[ints] = np.floor(hi0[ints] + INT_TOL)
    if np.any(lo0 > hi0):
        return MILPResult(INFEASIBLE, proven_optimal=True)

    def relax(lo, hi):
        lp = LinearProgram(base.c, base.A_eq, base.b_eq, base.A_ub, base.b_ub, lo, hi)
        return lp_solve(lp, method=lp_method)

    counter = itertools.count()
    best_x, best_obj = None, np.inf
    nodes = 0
    root = relax(lo0, hi0)
    nodes += 1
    if root.status == INFEASIBLE:
        return MILPResult(INFEASIBLE, nodes=nodes, proven_optimal=True)
    if root.status == UNBOUNDED:
        return MILPResult(UNBOUNDED, nodes=nodes)
    if root.status != OPTIMAL:
        return MILPResult(root.status, nodes=nodes)
    heap = [(root.obj, next(counter), lo0, hi0, root)]

    while heap:
        bound, _, lo, hi, res = heapq.heappop(heap)
        if bound >= best_obj - abs_gap:
            continue
        j = _branch_var(res.x, ints)
        if j is None:
            best_x, best_obj = res.x.copy(), res.obj
            best_x[ints] = np.round(best_x[ints])
            continue
        if nodes >= node_limit:
            heapq.heappush(heap, (bound, next(counter), lo, hi, res))
            open_bound = min(h[0] for h in heap)
            status = NODE_LIMIT
            return MILPResult(status, x=best_x, obj=best_obj, bound=min(open_bound, best_obj),
                              nodes=nodes)
        v = res.x[j]
        for child_lo, child_hi in _children(lo, hi, j, v):
            child = relax(child_lo, child_hi)
            nodes += 1
            if child.status != OPTIMAL or child.obj >= best_obj - abs_gap:
                continue
            heapq.heappush(heap, (child.obj, next(counter), child_lo, child_hi, child))

    if best_x is None:
        return MILPResult(INFEASIBLE, nodes=nodes, proven_optimal=True)
    return MILPResult(OPTIMAL, x=best_x, obj=best_obj, bound=best_obj, nodes=nodes,
                      proven_optimal=True)


def _branch_var(x, ints):
    frac = np.abs(x - np.round(x))
    frac[~ints] = 0.0
    if frac.max(initial=0.0) <= INT_TOL:
        return None
    # most fractional: distance to the nearest integer closest to 0.5
    score = np.where(ints, frac, -1.0)
    best = score.max()
    return int(np.flatnonzero(score >= best - 1e-12)[0])


def _children(lo, hi, j, v):
    down_hi = hi.copy()
    down_hi[j] = np.floor(v)
    up_lo = lo.copy()
    up_lo[j] = np.ceil(v)
    return [(lo, down_hi), (up_lo, hi)]


def _milp_highs(mip, node_limit):
    from scipy.optimize import Bounds, LinearConstraint, milp

    lp = mip.lp
    cons = []
    if lp.A_eq.size:
        cons.append(LinearConstraint(lp.A_eq, lp.b_eq, lp.b_eq))
    if lp.A_ub.size:
        cons.append(LinearConstraint(lp.A_ub, -np.inf, lp.b_ub))
    res = milp(lp.c, constraints=cons, integrality=mip.integer_mask.astype(int),
               bounds=Bounds(lp.lo, lp.hi),
               options={"node_limit": node_limit, "mip_rel_gap": 1e-9})
    if res.status == 0:
        x = res.x.copy()
        x[mip.integer_mask] = np.round(x[mip.integer_mask])
        bound = getattr(res, "mip_dual_bound", res.fun)
        return MILPResult(OPTIMAL, x=x, obj=float(res.fun), bound=float(bound),
                          nodes=int(getattr(res, "mip_node_count", 0) or 0), proven_optimal=True)
    if res.status == 2:
        return MILPResult(INFEASIBLE, proven_optimal=True)
    if res.status == 3:
        return MILPResult(UNBOUNDED)
    if res.x is not None:
        return MILPResult(NODE_LIMIT, x=res.x, obj=float(res.fun),
                          bound=float(getattr(res, "mip_dual_bound", -np.inf)))
    return MILPResult(NODE_LIMIT)
