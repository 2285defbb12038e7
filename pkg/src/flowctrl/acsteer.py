"""Steering AC flows toward a target by adjusting line reactances.

The AC power flow equations are relaxed into a penalty: a bound-constrained
Levenberg-Marquardt solve minimises

    ||f_send(z) - f_target||^2 + w ||x - x_prior||^2 + mu ||balance(z)||^2

over ``z = (x, angles at non-slack buses, magnitudes at PQ buses)``.  The
penalty weight ``mu`` grows tenfold until the bus balance mismatch drops
below ``BALANCE_TOL``.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from flowctrl.acpf import (
    AcPowerFlowError,
    AcState,
    ImpedanceError,
    acpf_solve,
    bus_injection_spec,
    bus_types,
    dsbus_dv,
    dsf_dv,
    flow_mismatch,
    make_ybus,
    power_mismatch,
    series_admittance,
    state_from_voltage,
)
from flowctrl.netmodel import Network
from flowctrl.optcore import LeastSquaresProblem, lm_solve

log = logging.getLogger(__name__)

BALANCE_TOL = 1e-5
MU_START = 1e4
MU_FACTOR = 10.0
MAX_ROUNDS = 6
DEFAULT_W_GRID = tuple(float(w) for w in np.logspace(4, -4, 9))


class PenaltyContinuationError(RuntimeError):
    pass


@dataclass
class SteerConfig:
    w: float
    x_prior: np.ndarray
    mu0: float = MU_START
    mu_factor: float = MU_FACTOR
    max_rounds: int = MAX_ROUNDS
    tol: float = BALANCE_TOL
    max_iter: int = 500
    verify_jacobian: bool = True

    def __post_init__(self):
        if not self.w >= 0:
            raise ValueError("w must be nonnegative")
        self.x_prior = np.asarray(self.x_prior, dtype=float)
        if np.any(self.x_prior < 0):
            raise ValueError("x_prior must be nonnegative")


@dataclass
class SteerResult:
    x_star: np.ndarray
    mismatch_per_line: np.ndarray
    mean_mismatch: float
    converged: bool
    voltage: np.ndarray = field(repr=False, default=None)
    max_balance: float = np.inf
    mu: float = np.nan
    objective: float = np.nan
    reason: str = ""
    trace: list = field(default_factory=list, repr=False)


class SteeringModel:
    """Residuals and analytic Jacobian of the penalised steering problem."""

    def __init__(self, net: Network, p_d, q_d, p_g, f_target, x_prior, w, mu):
        self.net = net
        self.types = bus_types(net)
        self.pvpq = self.types.non_slack
        self.pq = self.types.pq
        self.s_spec = bus_injection_spec(net, p_d, q_d, p_g)
        self.f_target = np.asarray(f_target, dtype=float)
        self.x_prior = np.asarray(x_prior, dtype=float)
        self.w = float(w)
        self.mu = float(mu)
        self.v_template = None
        e = net.n_branch
        self.sl_x = slice(0, e)
        self.sl_va = slice(e, e + len(self.pvpq))
        self.sl_vm = slice(e + len(self.pvpq), e + len(self.pvpq) + len(self.pq))

    @property
    def size(self) -> int:
        return self.sl_vm.stop

    def pack(self, x, v) -> np.ndarray:
        return np.r_[x, np.angle(v)[self.pvpq], np.abs(v)[self.pq]]

    def unpack(self, z):
        x = z[self.sl_x]
        va = np.angle(self.v_template).copy()
        vm = np.abs(self.v_template).copy()
        va[self.pvpq] = z[self.sl_va]
        vm[self.pq] = z[self.sl_vm]
        return x, vm * np.exp(1j * va)

    def bounds(self):
        lo = np.full(self.size, -np.inf)
        lo[self.sl_x] = 0.0
        lo[self.sl_vm] = 0.0
        return lo, np.full(self.size, np.inf)

    def balance(self, z) -> np.ndarray:
        x, v = self.unpack(z)
        ybus, _ = make_ybus(self.net, x)
        mis = power_mismatch(ybus, v, self.s_spec)
        return np.r_[mis.real[self.pvpq], mis.imag[self.pq]]

    def residual(self, z) -> np.ndarray:
        x, v = self.unpack(z)
        ybus, yf = make_ybus(self.net, x)
        f = (v[self.net.from_bus] * np.conj(yf @ v)).real
        mis = power_mismatch(ybus, v, self.s_spec)
        return np.r_[f - self.f_target,
                     math.sqrt(self.w) * (x - self.x_prior),
                     math.sqrt(self.mu) * mis.real[self.pvpq],
                     math.sqrt(self.mu) * mis.imag[self.pq]]

    def jacobian(self, z) -> np.ndarray:
        net = self.net
        x, v = self.unpack(z)
        e = net.n_branch
        fb, tb = net.from_bus, net.to_bus
        ybus, yf = make_ybus(net, x)
        ys = series_admittance(net, x)
        dys = -1j * ys**2
        tap = net.tap
        vf, vt = v[fb], v[tb]
        # d(complex power)/dx_e at the two ends of branch e
        ds_from = vf * np.conj(dys * (vf / tap - vt) / tap)
        ds_to = vt * np.conj(dys * (vt - vf / tap))

        pvpq, pq = self.pvpq, self.pq
        sf_va, sf_vm = dsf_dv(yf, fb, v)
        sb_va, sb_vm = dsbus_dv(ybus, v)

        rows = np.arange(e)
        dsbus_dx = np.zeros((net.n_bus, e), dtype=complex)
        np.add.at(dsbus_dx, (fb, rows), ds_from)
        np.add.at(dsbus_dx, (tb, rows), ds_to)

        flow = np.hstack([np.diag(ds_from.real), sf_va.real[:, pvpq], sf_vm.real[:, pq]])
        reg = np.hstack([math.sqrt(self.w) * np.eye(e), np.zeros((e, self.size - e))])
        sm = math.sqrt(self.mu)
        bal_p = sm * np.hstack([dsbus_dx.real[pvpq], sb_va.real[np.ix_(pvpq, pvpq)],
                                sb_vm.real[np.ix_(pvpq, pq)]])
        bal_q = sm * np.hstack([dsbus_dx.imag[pq], sb_va.imag[np.ix_(pq, pvpq)],
                                sb_vm.imag[np.ix_(pq, pq)]])
        return np.vstack([flow, reg, bal_p, bal_q])

    def problem(self) -> LeastSquaresProblem:
        lo, hi = self.bounds()
        return LeastSquaresProblem(self.residual, self.jacobian, lo, hi)


def _ac_start(net, p_d, q_d, p_g, x, v_gen):
    state = acpf_solve(net, p_d, q_d, p_g, x, v_gen=v_gen)
    return state.voltage


def steer_reactance(net: Network, p_d, q_d, p_g, f_target, config: SteerConfig,
             v_gen=1.0) -> SteerResult:
    """Reactances that steer the AC flows toward ``f_target``.

    ``config.w = inf`` skips the optimisation and evaluates the prior.
    """
    f_target = np.asarray(f_target, dtype=float)
    x_prior = config.x_prior
    v0 = _ac_start(net, p_d, q_d, p_g, x_prior, v_gen)
    if math.isinf(config.w):
        per, mean = flow_mismatch(net, state_flows(net, x_prior, v0), f_target)
        return SteerResult(x_prior.copy(), per, mean, True, voltage=v0, max_balance=0.0,
                           mu=np.nan, objective=0.0, reason="prior")

    model = SteeringModel(net, p_d, q_d, p_g, f_target, x_prior, config.w, config.mu0)
    model.v_template = v0
    z = model.pack(x_prior, v0)
    trace = []
    reason = ""
    converged = False
    for rnd in range(config.max_rounds):
        res = lm_solve(model.problem(), z, max_iter=config.max_iter,
                       verify_jacobian=config.verify_jacobian and rnd == 0)
        z = res.z
        bal = float(np.abs(model.balance(z)).max(initial=0.0))
        trace.append({"round": rnd + 1, "mu": model.mu, "cost": res.cost,
                      "iterations": res.iterations, "reason": res.reason, "balance": bal})
        log.debug("steer round %d mu=%.1e cost=%.3e balance=%.2e (%s)",
                  rnd + 1, model.mu, res.cost, bal, res.reason)
        if bal < config.tol:
            converged = True
            reason = res.reason if res.converged else f"lm {res.reason}"
            break
        model.mu *= config.mu_factor
    else:
        reason = f"balance {bal:.2e} above tolerance after {config.max_rounds} penalty rounds"
        log.warning("steering did not converge: %s", reason)

    x_star, v_star = model.unpack(z)
    x_star = x_star.copy()
    f_star = state_flows(net, x_star, v_star)
    per, mean = flow_mismatch(net, f_star, f_target)
    objective = float(np.sum((f_star - f_target) ** 2) + config.w * np.sum((x_star - x_prior) ** 2))
    return SteerResult(x_star, per, mean, converged, voltage=v_star, max_balance=bal,
                       mu=model.mu, objective=objective, reason=reason, trace=trace)


def state_flows(net: Network, x, v) -> np.ndarray:
    _, yf = make_ybus(net, x)
    return (v[net.from_bus] * np.conj(yf @ v)).real


def balance_at(net: Network, p_d, q_d, p_g, x, v) -> float:
    """Largest enforced bus mismatch (P at non-slack, Q at PQ buses) at ``(x, v)``."""
    s_spec = bus_injection_spec(net, p_d, q_d, p_g)
    state = state_from_voltage(net, x, np.asarray(v), s_spec)
    return state.max_mismatch


def steering_objective(net: Network, p_d, q_d, p_g, f_target, x, x_prior, w, v_gen=1.0) -> float:
    """Steering objective with the AC equations solved exactly at ``x``."""
    state: AcState = acpf_solve(net, p_d, q_d, p_g, x, v_gen=v_gen)
    d = state.f_send - np.asarray(f_target)
    return float(d @ d + w * np.sum((np.asarray(x) - np.asarray(x_prior)) ** 2))


def baseline_mismatch(net: Network, v_gen=1.0):
    """AC vs DC flows at the case's nominal loads, dispatch and reactances.

    The DC slack absorbs the case's generation/load imbalance (the losses the
    AC slack would cover).  Returns ``(per-line %, mean %)``.
    """
    from flowctrl.dcflow import nominal_flows

    p = net.injection(net.p_setpoint, net.p_demand)
    p[net.slack] -= p.sum()
    f_dc = nominal_flows(net, p)
    state = acpf_solve(net, net.p_demand, net.q_demand, net.p_setpoint, net.x_nominal, v_gen=v_gen)
    return flow_mismatch(net, state.f_send, f_dc)


# ---------------------------------------------------------------------------
# w sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    scenario: int
    label: str
    w: float
    mean_mismatch: float
    converged: bool = True
    x_star: np.ndarray | None = field(default=None, repr=False)


def _sweep_one(args):
    net, sc, x_dc, w_grid, v_gen = args
    rows = []
    try:
        nominal = acpf_solve(net, sc.p_demand, sc.q_demand, sc.p_gen, net.x_nominal, v_gen=v_gen)
    except (AcPowerFlowError, ImpedanceError) as exc:
        log.warning("scenario %d: AC power flow failed at nominal reactance: %s", sc.index, exc)
        rows.append(SweepRow(sc.index, "nominal", np.nan, np.nan, False))
    else:
        rows.append(SweepRow(sc.index, "nominal", np.nan,
                             flow_mismatch(net, nominal.f_send, sc.f_target)[1], True,
                             net.x_nominal.copy()))
    for label, w in [("dc", math.inf)] + [("steered", float(w)) for w in w_grid]:
        try:
            res = steer_reactance(net, sc.p_demand, sc.q_demand, sc.p_gen, sc.f_target,
                           SteerConfig(w=w, x_prior=x_dc), v_gen=v_gen)
        except (AcPowerFlowError, ImpedanceError, np.linalg.LinAlgError) as exc:
            log.warning("scenario %d, w=%g: steering failed: %s", sc.index, w, exc)
            rows.append(SweepRow(sc.index, label, w, np.nan, False))
            continue
        if not res.converged:
            log.warning("scenario %d, w=%g: %s", sc.index, w, res.reason)
        rows.append(SweepRow(sc.index, label, w, res.mean_mismatch, res.converged, res.x_star))
    return rows


def w_sweep(net: Network, scenarios, x_dc, w_grid=DEFAULT_W_GRID, jobs: int = 1,
            v_gen=1.0) -> list:
    """Mismatch at nominal reactance, at the DC setpoint and at each grid weight.

    ``x_dc`` holds one prior per scenario.  Failures are recorded as rows
    with ``converged=False`` and a NaN mismatch; the sweep continues.
    """
    work = [(net, sc, np.asarray(xd, dtype=float), tuple(w_grid), v_gen)
            for sc, xd in zip(scenarios, x_dc)]
    if jobs <= 1 or len(work) < 2:
        chunks = [_sweep_one(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_sweep_one, work))
    return [row for chunk in chunks for row in chunk]


def average_curve(rows) -> list:
    """Across-scenario mean per setpoint (NaN rows skipped), in sweep order."""
    keys = []
    groups: dict = {}
    for r in rows:
        key = (r.label, r.w if r.label == "steered" else None)
        if key not in groups:
            keys.append(key)
            groups[key] = []
        if r.converged and np.isfinite(r.mean_mismatch):
            groups[key].append(r.mean_mismatch)
    out = []
    for label, w in keys:
        vals = groups[(label, w)]
        out.append((label, w, float(np.mean(vals)) if vals else np.nan, len(vals)))
    return out


def trend_violations(curve, noise: float = 0.2) -> list:
    """Steps where the averaged steered curve rises by more than ``noise`` pp as w decreases."""
    steered = sorted((r for r in curve if r[0] == "steered"), key=lambda r: -r[1])
    bad = []
    for a, b in zip(steered, steered[1:]):
        if b[2] > a[2] + noise:
            bad.append((a[1], b[1], b[2] - a[2]))
    return bad


def _fmt_w(w) -> str:
    if w is None or (isinstance(w, float) and math.isnan(w)):
        return ""
    return "inf" if math.isinf(w) else f"{w:.6g}"


def sweep_csv(rows, chash: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={chash} units: mean_mismatch in % of line rating\n")
    buf.write("scenario,setpoint,w,mean_mismatch_pct,converged\n")
    for r in rows:
        buf.write(f"{r.scenario},{r.label},{_fmt_w(r.w)},{r.mean_mismatch:.10g},{int(r.converged)}\n")
    for label, w, mean, n in average_curve(rows):
        buf.write(f"average,{label},{_fmt_w(w)},{mean:.10g},{n}\n")
    return buf.getvalue()


def x_star_json(rows) -> str:
    out = [{"scenario": r.scenario, "setpoint": r.label, "w": _fmt_w(r.w),
            "converged": r.converged,
            "x": None if r.x_star is None else [float(v) for v in r.x_star]}
           for r in rows]
    return json.dumps(out, indent=1, sort_keys=True)


def default_jobs() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
