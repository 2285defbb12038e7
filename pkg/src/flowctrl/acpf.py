"""Newton-Raphson AC power flow in polar coordinates.

Only series reactance varies with the control vector ``x``; resistance, line
charging and taps stay at their case values.  Dense linear algebra throughout:
the intended networks have at most a few hundred buses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from flowctrl.netmodel import BusKind, Network

log = logging.getLogger(__name__)

MIN_IMPEDANCE = 1e-6


class AcPowerFlowError(RuntimeError):
    """Newton-Raphson failed to converge or hit a singular Jacobian."""

    def __init__(self, message, iterations=0, max_mismatch=np.inf):
        super().__init__(message)
        self.iterations = iterations
        self.max_mismatch = max_mismatch


class ImpedanceError(ValueError):
    """Series impedance too small to form a branch admittance."""


@dataclass
class AcState:
    v_mag: np.ndarray
    v_ang: np.ndarray
    f_send: np.ndarray
    p_mismatch: np.ndarray
    q_mismatch: np.ndarray
    iterations: int = 0
    converged: bool = True

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    @property
    def max_mismatch(self) -> float:
        return float(max(np.abs(self.p_mismatch).max(), np.abs(self.q_mismatch).max()))


@dataclass(frozen=True)
class BusTypes:
    slack: int
    pv: np.ndarray
    pq: np.ndarray

    @property
    def non_slack(self) -> np.ndarray:
        return np.sort(np.r_[self.pv, self.pq])


def bus_types(net: Network) -> BusTypes:
    kinds = [b.kind for b in net.buses]
    pv = np.array([k for k, kd in enumerate(kinds) if kd == BusKind.PV], dtype=int)
    pq = np.array([k for k, kd in enumerate(kinds) if kd == BusKind.PQ], dtype=int)
    return BusTypes(net.slack, pv, pq)


def voltage_setpoints(net: Network, v_gen=1.0) -> np.ndarray:
    """Initial magnitudes: ``v_gen`` at slack/PV buses (``"case"`` keeps case values)."""
    vm = np.ones(net.n_bus)
    for b in net.buses:
        if b.kind != BusKind.PQ:
            vm[b.id] = b.v_setpoint if v_gen == "case" else float(v_gen)
    return vm


def series_admittance(net: Network, x) -> np.ndarray:
    z = net.r + 1j * np.asarray(x, dtype=float)
    if np.any(np.abs(z) < MIN_IMPEDANCE):
        bad = np.flatnonzero(np.abs(z) < MIN_IMPEDANCE).tolist()
        raise ImpedanceError(f"|r + jx| < {MIN_IMPEDANCE} on branches {bad}")
    return 1.0 / z


def branch_admittances(net: Network, x):
    """Per-branch two-port entries ``(yff, yft, ytf, ytt)``."""
    ys = series_admittance(net, x)
    bc = 0.5j * net.b_charging
    tap = net.tap
    return (ys + bc) / tap**2, -ys / tap, -ys / tap, ys + bc


def make_ybus(net: Network, x):
    """Dense bus admittance matrix plus from-side branch matrix ``Yf`` (E x N)."""
    yff, yft, ytf, ytt = branch_admittances(net, x)
    n, e = net.n_bus, net.n_branch
    f, t = net.from_bus, net.to_bus
    rows = np.arange(e)
    yf = np.zeros((e, n), dtype=complex)
    yt = np.zeros((e, n), dtype=complex)
    yf[rows, f] = yff
    yf[rows, t] = yft
    yt[rows, f] = ytf
    yt[rows, t] = ytt
    cf = np.zeros((e, n))
    ct = np.zeros((e, n))
    cf[rows, f] = 1.0
    ct[rows, t] = 1.0
    ybus = cf.T @ yf + ct.T @ yt
    return ybus, yf


def bus_injection_spec(net: Network, p_d, q_d, p_g) -> np.ndarray:
    p = net.gen_matrix @ np.asarray(p_g, dtype=float) - np.asarray(p_d, dtype=float)
    return p - 1j * np.asarray(q_d, dtype=float)


def power_mismatch(ybus, v, s_spec):
    """Complex mismatch ``V * conj(Ybus V) - S_spec`` at every bus."""
    return v * np.conj(ybus @ v) - s_spec


def dsbus_dv(ybus, v):
    """Derivatives of complex bus injections w.r.t. angle and magnitude."""
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    dva = 1j * np.diag(v) @ np.conj(np.diag(ibus) - ybus * v[None, :])
    dvm = np.diag(v) @ np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
    return dva, dvm


def dsf_dv(yf, from_bus, v):
    """Derivatives of from-end complex branch flows w.r.t. angle and magnitude."""
    i_f = yf @ v
    vf = v[from_bus]
    vnorm = v / np.abs(v)
    e = len(from_bus)
    cf_v = np.zeros((e, len(v)), dtype=complex)
    cf_v[np.arange(e), from_bus] = v[from_bus]
    cf_vn = np.zeros((e, len(v)), dtype=complex)
    cf_vn[np.arange(e), from_bus] = vnorm[from_bus]
    dva = 1j * (np.conj(i_f)[:, None] * cf_v - vf[:, None] * np.conj(yf * v[None, :]))
    dvm = vf[:, None] * np.conj(yf * vnorm[None, :]) + np.conj(i_f)[:, None] * cf_vn
    return dva, dvm


def send_flows(net: Network, yf, v) -> np.ndarray:
    """Complex sending-end branch power ``V_f conj(I_f)``."""
    return v[net.from_bus] * np.conj(yf @ v)


def acpf_solve(net: Network, p_d, q_d, p_g, x, v_gen=1.0, v0=None, tol=1e-8,
               max_iter=30) -> AcState:
    """Solve the AC power flow for reactances ``x``.

    The slack bus holds angle 0, PV buses hold their voltage magnitude, and the
    slack generator's ``p_g`` entry is ignored (it balances losses).
    """
    x = np.asarray(x, dtype=float)
    ybus, yf = make_ybus(net, x)
    types = bus_types(net)
    s_spec = bus_injection_spec(net, p_d, q_d, p_g)

    vm = voltage_setpoints(net, v_gen)
    va = np.zeros(net.n_bus)
    if v0 is not None:
        v0 = np.asarray(v0)
        va = np.angle(v0).copy()
        va -= va[types.slack]
        vm[types.pq] = np.abs(v0)[types.pq]
    v = vm * np.exp(1j * va)

    pvpq = types.non_slack
    pq = types.pq
    npvpq = len(pvpq)

    def f_of(v):
        mis = power_mismatch(ybus, v, s_spec)
        return np.r_[mis.real[pvpq], mis.imag[pq]]

    fvec = f_of(v)
    it = 0
    while np.max(np.abs(fvec), initial=0.0) >= tol:
        if it >= max_iter:
            raise AcPowerFlowError(
                f"Newton-Raphson did not converge in {max_iter} iterations "
                f"(max mismatch {np.abs(fvec).max():.3e} p.u.)",
                iterations=it, max_mismatch=float(np.abs(fvec).max()))
        dva, dvm = dsbus_dv(ybus, v)
        jac = np.block([
            [dva.real[np.ix_(pvpq, pvpq)], dvm.real[np.ix_(pvpq, pq)]],
            [dva.imag[np.ix_(pq, pvpq)], dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, -fvec)
        except np.linalg.LinAlgError:
            raise AcPowerFlowError("singular power-flow Jacobian", iterations=it) from None
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        v = vm * np.exp(1j * va)
        fvec = f_of(v)
        it += 1
        if not np.all(np.isfinite(fvec)):
            raise AcPowerFlowError("Newton-Raphson diverged", iterations=it)

    return state_from_voltage(net, x, v, s_spec, types, ybus=ybus, yf=yf, iterations=it)


def state_from_voltage(net, x, v, s_spec, types=None, ybus=None, yf=None, iterations=0):
    """Assemble an :class:`AcState`; mismatches are zeroed where not enforced."""
    if ybus is None:
        ybus, yf = make_ybus(net, x)
    types = types or bus_types(net)
    mis = power_mismatch(ybus, v, s_spec)
    p_mis = np.zeros(net.n_bus)
    q_mis = np.zeros(net.n_bus)
    p_mis[types.non_slack] = mis.real[types.non_slack]
    q_mis[types.pq] = mis.imag[types.pq]
    return AcState(v_mag=np.abs(v), v_ang=np.angle(v), f_send=send_flows(net, yf, v).real,
                   p_mismatch=p_mis, q_mismatch=q_mis, iterations=iterations)


def flow_mismatch(net: Network, f_send, f_target):
    """Per-line ``|f_send - f_target| / f_rating`` in percent, and its mean."""
    per_line = 100.0 * np.abs(np.asarray(f_send) - np.asarray(f_target)) / net.f_rating
    return per_line, float(per_line.mean())
