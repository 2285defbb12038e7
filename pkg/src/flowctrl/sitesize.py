"""Siting and sizing of reactance controllers under DC physics.

For a set of target flows the mixed-integer program chooses which lines get
a controller (``d``), the adjustable reactance range ``[x_lo, x_hi]`` per line
and, for every scenario, a reactance vector inside that range that realizes
the target flow.  The objective is the total range ``sum(x_hi - x_lo)``.
"""

from __future__ import annotations

import io
import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from flowctrl.dcflow import MIN_REACTANCE
from flowctrl.netmodel import Network
from flowctrl.optcore import (
    OPTIMAL,
    LinearProgram,
    MixedIntegerProgram,
    lp_solve,
    milp_solve,
)

log = logging.getLogger(__name__)

DESK_MAX_SPRIME = 200
PLAN_TOL = 1e-7


class InfeasibleAtFullBudget(RuntimeError):
    """Scenario set is not realizable within the +/-100% reactance range."""


class DeskScaleError(ValueError):
    pass


@dataclass
class SitingProblem:
    net: Network
    flows: np.ndarray  # S' x E
    K: int
    exempt_bridges: bool = True

    def __post_init__(self):
        self.flows = np.atleast_2d(np.asarray(self.flows, dtype=float))
        if self.flows.shape[1] != self.net.n_branch:
            raise ValueError("flow vectors must have one entry per branch")
        if not 0 <= self.K <= self.net.n_branch:
            raise ValueError(f"budget K={self.K} outside [0, {self.net.n_branch}]")

    @property
    def n_scenarios(self) -> int:
        return self.flows.shape[0]


@dataclass
class SitingPlan:
    status: str
    K: int
    objective: float = np.nan
    d: np.ndarray | None = None
    x_lo: np.ndarray | None = None
    x_hi: np.ndarray | None = None
    x_s: np.ndarray | None = None
    theta_s: np.ndarray | None = None
    nodes: int = 0

    @property
    def feasible(self) -> bool:
        return self.status == OPTIMAL

    def to_json(self) -> dict:
        out = {"status": self.status, "K": self.K, "objective": self.objective, "nodes": self.nodes}
        for k in ("d", "x_lo", "x_hi", "x_s", "theta_s"):
            v = getattr(self, k)
            out[k] = None if v is None else np.asarray(v).tolist()
        return out

    @classmethod
    def from_json(cls, data: dict) -> "SitingPlan":
        kw = dict(data)
        for k in ("d", "x_lo", "x_hi", "x_s", "theta_s"):
            if kw.get(k) is not None:
                kw[k] = np.asarray(kw[k], dtype=float)
        return cls(**kw)


@dataclass
class AdjustmentProfile:
    gamma_down: np.ndarray
    gamma_up: np.ndarray


@dataclass
class KminResult:
    k_min: int
    plan: SitingPlan
    table: list = field(default_factory=list)  # (K, status, objective, solved)
    objective_full: float = np.nan

    @property
    def objective_kmin(self) -> float:
        return self.plan.objective


def check_desk_scale(s_prime, allow_large: bool = False) -> None:
    """Refuse siting runs above the desk-scale cap unless explicitly allowed."""
    if s_prime > DESK_MAX_SPRIME and not allow_large:
        raise DeskScaleError(
            f"S'={s_prime} exceeds the desk-scale cap of {DESK_MAX_SPRIME}; the siting MILP "
            f"grows as S'(E+N) variables. Pass allow_large (CLI: --allow-large) to proceed.")


def _layout(e, n, s):
    """Column offsets: x_lo, x_hi, d, then (x_s, theta_s) per scenario."""
    base = 3 * e
    xs = [base + k * (e + n) for k in range(s)]
    th = [o + e for o in xs]
    return xs, th, base + s * (e + n)


def build_siting_milp(net: Network, flows, K: int, exempt_bridges: bool = False,
             fixed_d=None) -> MixedIntegerProgram:
    """Assemble the siting MILP.

    ``fixed_d`` pins the placement vector (used by the enumeration oracle);
    ``exempt_bridges`` pins bridges to ``d = 0`` and nominal reactance.
    """
    flows = np.atleast_2d(np.asarray(flows, dtype=float))
    s = flows.shape[0]
    e, n = net.n_branch, net.n_bus
    a = net.incidence.astype(float)
    x0 = net.x_nominal
    xs_off, th_off, nv = _layout(e, n, s)
    eye = np.eye(e)

    c = np.zeros(nv)
    c[:e] = -1.0
    c[e : 2 * e] = 1.0

    # branch law per scenario: f_s * x_s - A theta_s = 0
    a_eq = np.zeros((s * e, nv))
    for k in range(s):
        rows = slice(k * e, (k + 1) * e)
        a_eq[rows, xs_off[k] : xs_off[k] + e] = np.diag(flows[k])
        a_eq[rows, th_off[k] : th_off[k] + n] = -a
    b_eq = np.zeros(s * e)

    ub_rows, ub_rhs = [], []
    for k in range(s):
        # x_lo - x_s <= 0
        blk = np.zeros((e, nv))
        blk[:, :e] = eye
        blk[:, xs_off[k] : xs_off[k] + e] = -eye
        ub_rows.append(blk)
        ub_rhs.append(np.zeros(e))
        # x_s - x_hi <= 0
        blk = np.zeros((e, nv))
        blk[:, xs_off[k] : xs_off[k] + e] = eye
        blk[:, e : 2 * e] = -eye
        ub_rows.append(blk)
        ub_rhs.append(np.zeros(e))
    # x_hi - x0 <= x0 * d
    blk = np.zeros((e, nv))
    blk[:, e : 2 * e] = eye
    blk[:, 2 * e : 3 * e] = -np.diag(x0)
    ub_rows.append(blk)
    ub_rhs.append(x0.copy())
    # x0 - x_lo <= x0 * d
    blk = np.zeros((e, nv))
    blk[:, :e] = -eye
    blk[:, 2 * e : 3 * e] = -np.diag(x0)
    ub_rows.append(blk)
    ub_rhs.append(-x0)
    # budget
    blk = np.zeros((1, nv))
    blk[0, 2 * e : 3 * e] = 1.0
    ub_rows.append(blk)
    ub_rhs.append(np.array([float(K)]))

    lo = np.full(nv, -np.inf)
    hi = np.full(nv, np.inf)
    lo[:e], hi[:e] = 0.0, x0
    lo[e : 2 * e], hi[e : 2 * e] = x0, 2 * x0
    lo[2 * e : 3 * e], hi[2 * e : 3 * e] = 0.0, 1.0
    for k in range(s):
        # strictly positive realizing reactance: x_s = 0 would satisfy the
        # branch law for any flow with theta = 0
        lo[xs_off[k] : xs_off[k] + e] = MIN_REACTANCE

    pinned = np.zeros(e, dtype=bool)
    if exempt_bridges:
        pinned[list(net.bridges)] = True
    if fixed_d is not None:
        fixed_d = np.asarray(fixed_d, dtype=float)
        lo[2 * e : 3 * e] = fixed_d
        hi[2 * e : 3 * e] = fixed_d
        pinned |= fixed_d == 0
    for j in np.flatnonzero(pinned):
        lo[j], hi[j] = x0[j], x0[j]
        lo[e + j], hi[e + j] = x0[j], x0[j]
        lo[2 * e + j], hi[2 * e + j] = 0.0, 0.0
        for k in range(s):
            lo[xs_off[k] + j] = hi[xs_off[k] + j] = x0[j]

    integer = np.zeros(nv, dtype=bool)
    integer[2 * e : 3 * e] = True
    lp = LinearProgram(c, a_eq, b_eq, np.vstack(ub_rows), np.concatenate(ub_rhs), lo, hi)
    return MixedIntegerProgram(lp, integer)


def _plan_from_x(net, problem_s, K, res_x, obj, nodes):
    e, n = net.n_branch, net.n_bus
    xs_off, th_off, _ = _layout(e, n, problem_s)
    x = res_x
    d = np.round(x[2 * e : 3 * e])
    x_lo = x[:e].copy()
    x_hi = x[e : 2 * e].copy()
    x0 = net.x_nominal
    # d = 0 means no control at all; snap solver noise
    x_lo[d == 0] = x0[d == 0]
    x_hi[d == 0] = x0[d == 0]
    x_s = np.array([np.clip(x[o : o + e], x_lo, x_hi) for o in xs_off])
    th_s = np.array([x[o : o + n] for o in th_off])
    return SitingPlan(OPTIMAL, K, float(np.sum(x_hi - x_lo)), d, x_lo, x_hi, x_s, th_s, nodes)


def solve_siting(problem: SitingProblem, engine: str = "highs", node_limit: int = 200_000) -> SitingPlan:
    """Optimal plan for ``problem`` or a plan with ``status="infeasible"``."""
    mip = build_siting_milp(problem.net, problem.flows, problem.K, exempt_bridges=problem.exempt_bridges)
    if engine == "highs":
        res = milp_solve(mip, node_limit=node_limit, method="highs")
    elif engine == "bnb":
        res = milp_solve(mip, node_limit=node_limit, method="bnb")
    else:
        raise ValueError(f"unknown engine {engine!r}")
    if res.status != OPTIMAL:
        return SitingPlan(res.status, problem.K, nodes=res.nodes)
    x, obj = res.x, res.obj
    if engine == "highs":
        # re-solve with the placement fixed for tight continuous values
        d = np.round(x[2 * problem.net.n_branch : 3 * problem.net.n_branch])
        fixed = build_siting_milp(problem.net, problem.flows, problem.K,
                         exempt_bridges=problem.exempt_bridges, fixed_d=d)
        polished = lp_solve(fixed.lp, method="highs")
        if polished.ok and polished.obj <= obj + 1e-6 * max(1.0, abs(obj)):
            x, obj = polished.x, polished.obj
    return _plan_from_x(problem.net, problem.n_scenarios, problem.K, x, obj, res.nodes)


def check_plan(net: Network, flows, plan: SitingPlan, tol: float = PLAN_TOL) -> list:
    """List of violated plan invariants (empty when the plan is valid)."""
    flows = np.atleast_2d(flows)
    x0 = net.x_nominal
    a = net.incidence.astype(float)
    bad = []
    if np.any(plan.x_s < plan.x_lo - tol) or np.any(plan.x_s > plan.x_hi + tol):
        bad.append("x_s outside [x_lo, x_hi]")
    up = plan.x_hi - x0
    dn = x0 - plan.x_lo
    if np.any(up < -tol) or np.any(up > x0 * plan.d + tol):
        bad.append("x_hi bound")
    if np.any(dn < -tol) or np.any(dn > x0 * plan.d + tol):
        bad.append("x_lo bound")
    if plan.d.sum() > plan.K + tol:
        bad.append("budget")
    if not np.all(np.isin(plan.d, (0, 1))):
        bad.append("d not binary")
    for k, f in enumerate(flows):
        r = f * plan.x_s[k] - a @ plan.theta_s[k]
        if np.abs(r).max() > tol * (1 + np.abs(f).max()):
            bad.append(f"branch law scenario {k}")
    return bad


def placement_lp(net: Network, flows, d, method: str = "simplex"):
    """Objective of the siting LP with the placement fixed to ``d`` (inf if infeasible)."""
    mip = build_siting_milp(net, flows, int(np.sum(d)), fixed_d=d)
    res = lp_solve(mip.lp, method=method)
    return res.obj if res.ok else np.inf


def brute_force_siting(net: Network, flows, K: int | None = None, method: str = "simplex"):
    """Enumerate every placement with at most ``K`` controllers; returns (best, d)."""
    e = net.n_branch
    K = e if K is None else K
    best, best_d = np.inf, None
    for bits in itertools.product((0, 1), repeat=e):
        if sum(bits) > K:
            continue
        val = placement_lp(net, flows, np.array(bits, dtype=float), method=method)
        if val < best - 1e-12:
            best, best_d = val, np.array(bits)
    return best, best_d


def screen_scenarios(net: Network, scenarios, exempt_bridges: bool = True):
    """Split scenarios into those realizable within +/-100% and those that are not."""
    keep, dropped = [], []
    for sc in scenarios:
        mip = build_siting_milp(net, sc.f_target[None, :], net.n_branch, exempt_bridges=exempt_bridges)
        # with every line allowed the budget never binds, so the relaxation is exact
        res = lp_solve(mip.lp, method="highs")
        (keep if res.ok else dropped).append(sc)
    if dropped:
        log.warning("dropping %d scenario(s) not realizable within the reactance range: %s",
                    len(dropped), [sc.index for sc in dropped])
    return keep, dropped


def kmin_search(net: Network, flows, engine: str = "highs", exempt_bridges: bool = True) -> KminResult:
    """Smallest feasible budget, found by lowering ``K`` from ``E``.

    An optimal plan that uses ``k`` controllers at budget ``K`` stays optimal for
    every budget in ``[k, K]``, so those rows are filled without re-solving.
    """
    e = net.n_branch
    plan = solve_siting(SitingProblem(net, flows, e, exempt_bridges), engine=engine)
    if not plan.feasible:
        raise InfeasibleAtFullBudget("scenario set infeasible with controllers on every line")
    table = [(e, plan.status, plan.objective, True)]
    best = plan
    full_obj = plan.objective
    K = e
    while True:
        used = int(best.d.sum())
        for k in range(K - 1, used - 1, -1):
            table.append((k, OPTIMAL, best.objective, False))
        K = used - 1
        if K < 0:
            break
        trial = solve_siting(SitingProblem(net, flows, K, exempt_bridges), engine=engine)
        table.append((K, trial.status, trial.objective, True))
        if not trial.feasible:
            break
        best = trial
    return KminResult(k_min=int(best.d.sum()), plan=best, table=table, objective_full=full_obj)


def adjustment_profile(plan: SitingPlan, x_nominal) -> AdjustmentProfile:
    x0 = np.asarray(x_nominal, dtype=float)
    down = (plan.x_lo - x0) / x0
    up = (plan.x_hi - x0) / x0
    off = plan.d == 0
    down[off] = 0.0
    up[off] = 0.0
    return AdjustmentProfile(gamma_down=down, gamma_up=up)


def dc_setpoints(net: Network, flows, plan: SitingPlan, exempt_bridges: bool = True) -> np.ndarray:
    """Per-scenario realizing reactances inside the plan's range, closest to nominal in l1.

    The siting optimum only pins the range; this second stage removes the
    arbitrariness of the per-scenario vertex the MILP happened to return.
    """
    flows = np.atleast_2d(flows)
    e, n = net.n_branch, net.n_bus
    a = net.incidence.astype(float)
    x0 = net.x_nominal
    out = []
    for f in flows:
        nv = 2 * e + n
        c = np.r_[np.zeros(e + n), np.ones(e)]
        a_eq = np.zeros((e + 1, nv))
        a_eq[:e, :e] = np.diag(f)
        a_eq[:e, e : e + n] = -a
        a_eq[e, e + net.slack] = 1.0
        eye = np.eye(e)
        a_ub = np.zeros((2 * e, nv))
        a_ub[:e, :e] = eye
        a_ub[:e, e + n :] = -eye
        a_ub[e:, :e] = -eye
        a_ub[e:, e + n :] = -eye
        lo = np.r_[np.maximum(plan.x_lo, MIN_REACTANCE), np.full(n, -np.inf), np.zeros(e)]
        hi = np.r_[plan.x_hi, np.full(n, np.inf), np.full(e, np.inf)]
        res = lp_solve(LinearProgram(c, a_eq, np.zeros(e + 1), a_ub, np.r_[x0, -x0], lo, hi),
                       method="highs")
        if not res.ok:
            raise InfeasibleAtFullBudget("scenario not realizable inside the plan's range")
        out.append(res.x[:e])
    return np.array(out)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def sweep_csv(rows, chash: str = "") -> str:
    """Rows of ``(S', K, status, objective_pu, solved)``."""
    buf = io.StringIO()
    buf.write(f"# config_hash={chash} units: objective = total reactance range in p.u.\n")
    buf.write("s_prime,K,status,objective_pu,solved\n")
    for sp, k, st, obj, solved in rows:
        obj_s = "" if not np.isfinite(obj) else f"{obj:.12g}"
        buf.write(f"{sp},{k},{st},{obj_s},{int(bool(solved))}\n")
    return buf.getvalue()


def kmin_csv(rows, chash: str = "") -> str:
    """Rows of ``(S', K_min, objective_at_kmin, objective_at_E)``."""
    buf = io.StringIO()
    buf.write(f"# config_hash={chash} units: objectives in p.u.\n")
    buf.write("s_prime,k_min,objective_kmin_pu,objective_full_pu\n")
    for sp, k, ok, of in rows:
        buf.write(f"{sp},{k},{ok:.12g},{of:.12g}\n")
    return buf.getvalue()


def gamma_csv(net: Network, plan: SitingPlan, chash: str = "", s_prime=None) -> str:
    prof = adjustment_profile(plan, net.x_nominal)
    buf = io.StringIO()
    buf.write(f"# config_hash={chash} units: gamma dimensionless (fraction of nominal x)\n")
    buf.write("s_prime,edge,from_bus,to_bus,bridge,d,gamma_down,gamma_up\n")
    for e in range(net.n_branch):
        buf.write(f"{'' if s_prime is None else s_prime},{e},{net.from_bus[e]},{net.to_bus[e]},"
                  f"{int(e in net.bridges)},{int(plan.d[e])},"
                  f"{prof.gamma_down[e]:.12g},{prof.gamma_up[e]:.12g}\n")
    return buf.getvalue()


def plan_json(plan: SitingPlan) -> str:
    return json.dumps(plan.to_json(), sort_keys=True)
