"""Independent AC checks built branch by branch (no bus admittance matrix)."""

import numpy as np


def branch_powers(net, x, v):
    """Complex power entering each branch at its from and to ends (pi model with tap)."""
    s_from = np.zeros(net.n_branch, dtype=complex)
    s_to = np.zeros(net.n_branch, dtype=complex)
    for k in range(net.n_branch):
        i, j = net.from_bus[k], net.to_bus[k]
        ys = 1.0 / complex(net.r[k], x[k])
        half_b = 0.5j * net.b_charging[k]
        t = net.tap[k]
        vi, vj = v[i], v[j]
        i_from = (ys + half_b) / t**2 * vi - ys / t * vj
        i_to = -ys / t * vi + (ys + half_b) * vj
        s_from[k] = vi * np.conj(i_from)
        s_to[k] = vj * np.conj(i_to)
    return s_from, s_to


def bus_balance(net, x, v, p_d, q_d, p_g):
    """Max |mismatch| over P at non-slack buses and Q at PQ buses."""
    from flowctrl.netmodel import BusKind

    s_from, s_to = branch_powers(net, x, v)
    inj = np.zeros(net.n_bus, dtype=complex)
    np.add.at(inj, net.from_bus, s_from)
    np.add.at(inj, net.to_bus, s_to)
    p_spec = -np.asarray(p_d, dtype=float)
    for g, pg in zip(net.generators, p_g):
        p_spec[g.bus] += pg
    worst = 0.0
    for b in net.buses:
        if b.kind != BusKind.SLACK:
            worst = max(worst, abs(inj[b.id].real - p_spec[b.id]))
        if b.kind == BusKind.PQ:
            worst = max(worst, abs(inj[b.id].imag + q_d[b.id]))
    return worst


def two_bus_closed_form(x, p_load):
    """Lossless line, slack at 1 p.u., unity-power-factor load: (angle, magnitude).

    Receiving-end Q balance gives |V| = cos(delta); P balance gives
    |V| sin(-delta) = p x, hence sin(2 delta) = -2 p x.
    """
    delta = -0.5 * np.arcsin(2 * p_load * x)
    return delta, np.cos(delta)
