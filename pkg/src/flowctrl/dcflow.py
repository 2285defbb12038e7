"""Generalized DC power flow and flow-pattern realizability.

The DC model couples nodal balance ``A.T @ f = p`` with the branch law
``x * f = A @ theta``.  Reactances may be zero or negative here; uniqueness
then depends on the cycle-space matrix ``N.T @ diag(x) @ N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from flowctrl.netmodel import Network, is_radial
from flowctrl.optcore import LinearProgram, lp_solve

BALANCE_TOL = 1e-9
SINGULAR_RTOL = 1e-10
ZERO_FLOW_TOL = 1e-9
MIN_REACTANCE = 1e-4
DENSE_LIMIT = 2000


class UnbalancedInjectionError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


class RealizabilityError(ValueError):
    pass


@dataclass
class DcSolution:
    flows: np.ndarray
    angles: np.ndarray
    ref_bus: int
    ref_angle: float = 0.0


@dataclass
class RealizabilityVerdict:
    realizable: bool
    witness: np.ndarray | None = None
    cycle: list | None = None

    def __bool__(self):
        return self.realizable


def dc_system_matrix(net: Network, x, ref_bus: int) -> np.ndarray:
    """Square (E+N) matrix over ``(f, theta)``.

    Rows: nodal balance at every bus except ``ref_bus``, the E branch laws,
    then the reference-angle row.
    """
    a = net.incidence.astype(float)
    e, n = a.shape
    keep = np.array([k for k in range(n) if k != ref_bus], dtype=int)
    m = np.zeros((e + n, e + n))
    m[: n - 1, :e] = a.T[keep]
    m[n - 1 : n - 1 + e, :e] = np.diag(np.asarray(x, dtype=float))
    m[n - 1 : n - 1 + e, e:] = -a
    m[-1, e + ref_bus] = 1.0
    return m


def _relative_smin(mat, scale=None) -> float:
    """Smallest singular value over ``scale`` (default: the largest one)."""
    s = np.linalg.svd(mat, compute_uv=False)
    if s.size == 0:
        return 1.0
    ref = s[0] if scale is None else scale
    if ref == 0:
        return 0.0
    return float(s[-1] / ref)


def solve_dcpf(net: Network, x, p, ref_bus: int | None = None, ref_angle: float = 0.0) -> DcSolution:
    """Unique ``(f, theta)`` for reactances ``x`` and balanced injections ``p``."""
    p = np.asarray(p, dtype=float)
    if abs(p.sum()) > BALANCE_TOL:
        raise UnbalancedInjectionError(f"injections sum to {p.sum():.3e}, not zero")
    ref = net.slack if ref_bus is None else int(ref_bus)
    e, n = net.n_branch, net.n_bus
    keep = np.array([k for k in range(n) if k != ref], dtype=int)
    rhs = np.r_[p[keep], np.zeros(e), ref_angle]
    mat = dc_system_matrix(net, x, ref)
    if e + n <= DENSE_LIMIT:
        if _relative_smin(mat) <= SINGULAR_RTOL:
            raise SingularSystemError("DC power-flow system is singular for this reactance vector")
        sol = sla.solve(mat, rhs)
    else:
        try:
            lu = spla.splu(sp.csc_matrix(mat))
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from None
        sol = lu.solve(rhs)
    return DcSolution(flows=sol[:e], angles=sol[e:], ref_bus=ref, ref_angle=ref_angle)


def check_uniqueness(net: Network, x) -> bool:
    """True iff the DC equations have a unique solution for reactances ``x``."""
    if is_radial(net):
        return True
    cyc = net.cycles.astype(float)
    x = np.asarray(x, dtype=float)
    mat = cyc.T @ (x[:, None] * cyc)
    # measure against the cancellation-free product so 1x1 cases are judged too
    scale = np.linalg.norm(cyc.T @ (np.abs(x)[:, None] * cyc), 2)
    return _relative_smin(mat, scale) > SINGULAR_RTOL


def check_realizability(net: Network, f, method: str = "graph") -> RealizabilityVerdict:
    """Can strictly positive reactances make ``f`` a DC power-flow solution?

    ``f`` is realizable iff no cycle-space vector ``n`` gives ``f * n >= 0`` with
    a positive entry, i.e. the flow has no circulating component.  The graph
    method contracts zero-flow edges and searches for a directed cycle with
    edges oriented along the flow; ``method="lp"`` decides the same question
    by LP feasibility over cycle coordinates.
    """
    f = np.asarray(f, dtype=float)
    if is_radial(net):
        return RealizabilityVerdict(True)
    if method == "graph":
        return _realizability_graph(net, f)
    if method == "lp":
        return _realizability_lp(net, f)
    raise ValueError(f"unknown method {method!r}")


def _realizability_graph(net, f):
    n = net.n_bus
    zero = np.abs(f) <= ZERO_FLOW_TOL
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in np.flatnonzero(zero):
        ra, rb = find(int(net.from_bus[e])), find(int(net.to_bus[e]))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comp = [find(k) for k in range(n)]

    # directed multigraph on components, edges oriented along the flow
    succ = {}
    for e in np.flatnonzero(~zero):
        u, v = int(net.from_bus[e]), int(net.to_bus[e])
        if f[e] < 0:
            u, v = v, u
        succ.setdefault(comp[u], []).append((comp[v], int(e)))

    cyc_edges = _find_directed_cycle(succ)
    if cyc_edges is None:
        return RealizabilityVerdict(True)
    indicator = _lift_cycle(net, f, cyc_edges, zero, comp)
    witness = f * indicator
    witness /= witness.sum()
    return RealizabilityVerdict(False, witness=witness, cycle=cyc_edges)


def _find_directed_cycle(succ):
    """Edge list of some directed cycle, or None (iterative three-colour DFS)."""
    color = {}
    for start in sorted(succ):
        if color.get(start):
            continue
        color[start] = 1
        stack = [(start, iter(succ.get(start, [])))]
        path_edges = []
        while stack:
            u, it = stack[-1]
            for v, e in it:
                c = color.get(v, 0)
                if c == 1:
                    # back edge closes a cycle: unwind path to v
                    cycle = [e]
                    for (node, _), pe in zip(reversed(stack), reversed(path_edges)):
                        if node == v:
                            break
                        cycle.append(pe)
                    return cycle[::-1]
                if c == 0:
                    color[v] = 1
                    stack.append((v, iter(succ.get(v, []))))
                    path_edges.append(e)
                    break
            else:
                color[u] = 2
                stack.pop()
                if path_edges:
                    path_edges.pop()
    return None


def _lift_cycle(net, f, cyc_edges, zero, comp):
    """Cycle-space vector for a directed cycle on the contracted graph.

    Consecutive flow edges are joined through paths of zero-flow edges inside
    each contracted component, so the result satisfies ``A.T @ n == 0``.
    """
    indicator = np.zeros(net.n_branch)
    heads, tails = [], []
    for e in cyc_edges:
        u, v = int(net.from_bus[e]), int(net.to_bus[e])
        sign = 1.0 if f[e] > 0 else -1.0
        if sign < 0:
            u, v = v, u
        indicator[e] += sign
        tails.append(u)
        heads.append(v)
    zadj = {}
    for e in np.flatnonzero(zero):
        u, v = int(net.from_bus[e]), int(net.to_bus[e])
        zadj.setdefault(u, []).append((v, int(e), 1.0))
        zadj.setdefault(v, []).append((u, int(e), -1.0))
    k = len(cyc_edges)
    for i in range(k):
        src, dst = heads[i], tails[(i + 1) % k]
        if src == dst:
            continue
        for e, s in _bfs_path(zadj, src, dst):
            indicator[e] += s
    return indicator


def _bfs_path(adj, src, dst):
    prev = {src: None}
    queue = [src]
    for u in queue:
        if u == dst:
            break
        for v, e, s in sorted(adj.get(u, [])):
            if v not in prev:
                prev[v] = (u, e, s)
                queue.append(v)
    path = []
    node = dst
    while prev[node] is not None:
        u, e, s = prev[node]
        path.append((e, s))
        node = u
    return path[::-1]


def _realizability_lp(net, f):
    cyc = net.cycles.astype(float)
    c = cyc.shape[1]
    if c == 0:
        return RealizabilityVerdict(True)
    fn = f[:, None] * cyc  # s = fn @ coeffs
    lp = LinearProgram(np.zeros(c), A_eq=fn.sum(axis=0, keepdims=True), b_eq=[1.0],
                       A_ub=-fn, b_ub=np.zeros(net.n_branch),
                       lo=np.full(c, -np.inf), hi=np.full(c, np.inf))
    res = lp_solve(lp)
    if not res.ok:
        return RealizabilityVerdict(True)
    s = np.maximum(fn @ res.x, 0.0)
    return RealizabilityVerdict(False, witness=s / s.sum())


def is_valid_witness(net: Network, f, witness, tol=1e-8) -> bool:
    """Independent check: ``witness`` is a normalized nonneg circulation ``f * n``."""
    f = np.asarray(f, dtype=float)
    w = np.asarray(witness, dtype=float)
    if np.any(w < -tol) or abs(w.sum() - 1.0) > 1e-6 or w.max() <= tol:
        return False
    zero = np.abs(f) <= ZERO_FLOW_TOL
    if np.any(np.abs(w[zero]) > tol):
        return False
    # n is fixed on flow edges; zero-flow entries are free to close the cycle
    n_fixed = np.zeros_like(f)
    n_fixed[~zero] = w[~zero] / f[~zero]
    at = net.incidence.T.astype(float)
    resid = at @ n_fixed
    if zero.any():
        sol, *_ = np.linalg.lstsq(at[:, zero], -resid, rcond=None)
        resid = resid + at[:, zero] @ sol
    scale = 1.0 + np.abs(n_fixed).max()
    return bool(np.abs(resid).max() <= 1e-7 * scale)


def solve_reactance_for_target(net: Network, f_target, x_nominal=None, eps: float = MIN_REACTANCE):
    """Positive reactances closest to nominal (in l1) that realize ``f_target``.

    Returns ``(x, theta)`` with ``theta[slack] == 0``.
    """
    f = np.asarray(f_target, dtype=float)
    x0 = net.x_nominal if x_nominal is None else np.asarray(x_nominal, dtype=float)
    e, n = net.n_branch, net.n_bus
    a = net.incidence.astype(float)
    if is_radial(net):
        theta = np.zeros(n)
        keep = [k for k in range(n) if k != net.slack]
        x = np.maximum(x0, eps)
        theta[keep] = np.linalg.lstsq(a[:, keep], f * x, rcond=None)[0]
        return x, theta
    verdict = check_realizability(net, f)
    if not verdict:
        raise RealizabilityError("target flow contains a circulating component")
    # variables: x (E), theta (N), t (E) with t >= |x - x0|
    nv = 2 * e + n
    c = np.r_[np.zeros(e + n), np.ones(e)]
    a_eq = np.zeros((e + 1, nv))
    a_eq[:e, :e] = np.diag(f)
    a_eq[:e, e : e + n] = -a
    a_eq[e, e + net.slack] = 1.0
    b_eq = np.zeros(e + 1)
    eye = np.eye(e)
    a_ub = np.zeros((2 * e, nv))
    a_ub[:e, :e] = eye
    a_ub[:e, e + n :] = -eye
    a_ub[e:, :e] = -eye
    a_ub[e:, e + n :] = -eye
    b_ub = np.r_[x0, -x0]
    lo = np.r_[np.full(e, eps), np.full(n, -np.inf), np.zeros(e)]
    hi = np.full(nv, np.inf)
    res = lp_solve(LinearProgram(c, a_eq, b_eq, a_ub, b_ub, lo, hi))
    if not res.ok:
        raise RealizabilityError(f"reactance LP returned {res.status}")
    # the l1 optimum is often a face; among its points take the largest total
    # reactance, which keeps lines away from the eps floor and is deterministic
    cap = np.r_[np.zeros(e + n), np.ones(e)]
    tie = lp_solve(LinearProgram(np.r_[-np.ones(e), np.zeros(n + e)], a_eq, b_eq,
                                 np.vstack([a_ub, cap]), np.r_[b_ub, res.obj + 1e-11 * (1 + res.obj)],
                                 lo, hi))
    best = tie if tie.ok else res
    return best.x[:e], best.x[e : e + n]


def nominal_flows(net: Network, p) -> np.ndarray:
    return solve_dcpf(net, net.x_nominal, p).flows


def difficulty(net: Network, f_target, p) -> float:
    """Squared distance between the target and the nominal-reactance DC flows."""
    d = np.asarray(f_target, dtype=float) - nominal_flows(net, p)
    return float(d @ d)
