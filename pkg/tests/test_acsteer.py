import math

import numpy as np
import pytest
from ac_oracles import branch_powers, bus_balance, two_bus_closed_form
from netgen import make_network, random_network

from flowctrl.acpf import (
    AcPowerFlowError,
    ImpedanceError,
    acpf_solve,
    bus_injection_spec,
    bus_types,
    dsbus_dv,
    flow_mismatch,
    make_ybus,
    power_mismatch,
)
from flowctrl.acsteer import (
    SteerConfig,
    SteeringModel,
    average_curve,
    baseline_mismatch,
    steering_objective,
    steer_reactance,
    sweep_csv,
    trend_violations,
    w_sweep,
    x_star_json,
)
from flowctrl.optcore import check_jacobian, fd_jacobian
from flowctrl.sitesize import SitingProblem, dc_setpoints, solve_siting


def two_bus(x=0.5, load=0.0, r=0.0):
    return make_network(2, [(0, 1)], x=[x], r=[r], loads=[0.0, load])


class TestAcpf:
    def test_flat_lossless(self):
        net = two_bus(x=0.1)
        st = acpf_solve(net, [0, 0], [0, 0], [0.0], net.x_nominal)
        np.testing.assert_allclose(st.v_mag, 1.0)
        np.testing.assert_allclose(st.v_ang, 0.0)
        np.testing.assert_allclose(st.f_send, 0.0, atol=1e-14)

    def test_two_bus_closed_form(self):
        net = two_bus(x=0.5, load=0.3)
        st = acpf_solve(net, [0, 0.3], [0, 0], [0.0], net.x_nominal)
        delta, vm = two_bus_closed_form(0.5, 0.3)
        assert st.v_ang[1] == pytest.approx(delta, abs=1e-9)
        assert st.v_mag[1] == pytest.approx(vm, abs=1e-9)
        assert st.f_send[0] == pytest.approx(0.3, abs=1e-9)

    def test_case39_baseline(self, case39):
        _, mean = baseline_mismatch(case39)
        assert abs(mean - 1.14) <= 0.3

    def test_slack_and_pv_fixed(self, case39):
        st = acpf_solve(case39, case39.p_demand, case39.q_demand, case39.p_setpoint, case39.x_nominal)
        t = bus_types(case39)
        assert st.v_ang[t.slack] == 0.0
        np.testing.assert_allclose(st.v_mag[t.pv], 1.0)
        assert st.max_mismatch < 1e-8

    def test_global_balance(self, case39):
        st = acpf_solve(case39, case39.p_demand, case39.q_demand, case39.p_setpoint, case39.x_nominal)
        s_from, s_to = branch_powers(case39, case39.x_nominal, st.voltage)
        losses = float((s_from + s_to).real.sum())
        ybus, _ = make_ybus(case39, case39.x_nominal)
        slack_gen = (st.voltage * np.conj(ybus @ st.voltage)).real[case39.slack] \
            + case39.p_demand[case39.slack]
        others = sum(pg for g, pg in zip(case39.generators, case39.p_setpoint) if g.bus != case39.slack)
        assert abs(slack_gen + others - case39.p_demand.sum() - losses) < 1e-7

    def test_independent_balance(self, case39):
        st = acpf_solve(case39, case39.p_demand, case39.q_demand, case39.p_setpoint, case39.x_nominal)
        assert bus_balance(case39, case39.x_nominal, st.voltage, case39.p_demand,
                           case39.q_demand, case39.p_setpoint) < 1e-8
        s_from, _ = branch_powers(case39, case39.x_nominal, st.voltage)
        np.testing.assert_allclose(st.f_send, s_from.real, atol=1e-12)

    def test_deterministic(self, case39):
        a = acpf_solve(case39, case39.p_demand, case39.q_demand, case39.p_setpoint, case39.x_nominal)
        b = acpf_solve(case39, case39.p_demand, case39.q_demand, case39.p_setpoint, case39.x_nominal)
        assert a.iterations == b.iterations
        assert a.f_send.tobytes() == b.f_send.tobytes()

    def test_divergence_reported(self):
        net = two_bus(x=0.5, load=5.0)
        with pytest.raises(AcPowerFlowError) as info:
            acpf_solve(net, [0, 5.0], [0, 0], [0.0], net.x_nominal)
        assert info.value.iterations > 0 or "singular" in str(info.value) or "diverged" in str(info.value)

    def test_zero_impedance_guard(self):
        net = two_bus()
        with pytest.raises(ImpedanceError):
            acpf_solve(net, [0, 0], [0, 0], [0.0], [0.0])


def _pf_jacobian_check(net, v):
    ybus, _ = make_ybus(net, net.x_nominal)
    t = bus_types(net)
    s_spec = bus_injection_spec(net, net.p_demand, net.q_demand, net.p_setpoint)
    pvpq, pq = t.non_slack, t.pq

    def fun(z):
        va = np.angle(v).copy()
        vm = np.abs(v).copy()
        va[pvpq] = z[: len(pvpq)]
        vm[pq] = z[len(pvpq):]
        mis = power_mismatch(ybus, vm * np.exp(1j * va), s_spec)
        return np.r_[mis.real[pvpq], mis.imag[pq]]

    dva, dvm = dsbus_dv(ybus, v)
    jac = np.block([[dva.real[np.ix_(pvpq, pvpq)], dvm.real[np.ix_(pvpq, pq)]],
                    [dva.imag[np.ix_(pq, pvpq)], dvm.imag[np.ix_(pq, pq)]]])
    z = np.r_[np.angle(v)[pvpq], np.abs(v)[pq]]
    num = fd_jacobian(fun, z)
    return np.abs(jac - num).max() / max(1.0, np.abs(num).max())


class TestJacobians:
    def test_power_flow_jacobian_flat_start(self, case39):
        assert _pf_jacobian_check(case39, np.ones(case39.n_bus, dtype=complex)) < 1e-5

    def test_power_flow_jacobian_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            net = random_network(rng, 3, 8, extra_max=3, ac=True)
            assert _pf_jacobian_check(net, np.ones(net.n_bus, dtype=complex)) < 1e-5

    def test_steering_jacobian(self, case39, case39_dataset):
        sc = case39_dataset[0]
        st = acpf_solve(case39, sc.p_demand, sc.q_demand, sc.p_gen, case39.x_nominal)
        m = SteeringModel(case39, sc.p_demand, sc.q_demand, sc.p_gen, sc.f_target,
                          case39.x_nominal, w=0.5, mu=1e4)
        m.v_template = st.voltage
        rng = np.random.default_rng(1)
        z = m.pack(case39.x_nominal, st.voltage) * (1 + 0.01 * rng.standard_normal(m.size))
        z[: case39.n_branch] = np.abs(z[: case39.n_branch])
        assert check_jacobian(m.problem(), z) < 1e-4


@pytest.fixture(scope="module")
def steering_setup(case39, case39_dataset):
    chosen = [case39_dataset[k] for k in (0, len(case39_dataset) // 2, len(case39_dataset) - 1)]
    flows = np.array([s.f_target for s in chosen])
    plan = solve_siting(SitingProblem(case39, flows, case39.n_branch))
    return chosen, dc_setpoints(case39, flows, plan)


class TestSteer:
    def test_prior_already_optimal(self, case39, case39_dataset):
        sc = case39_dataset[0]
        st = acpf_solve(case39, sc.p_demand, sc.q_demand, sc.p_gen, case39.x_nominal)
        for w in (1e-2, 1.0):
            res = steer_reactance(case39, sc.p_demand, sc.q_demand, sc.p_gen, st.f_send,
                           SteerConfig(w=w, x_prior=case39.x_nominal))
            np.testing.assert_allclose(res.x_star, case39.x_nominal, atol=1e-10)
            assert res.mean_mismatch < 1e-8

    def test_large_w_stays_at_prior(self, case39, steering_setup):
        chosen, x_dc = steering_setup
        for sc, xd in zip(chosen, x_dc):
            res = steer_reactance(case39, sc.p_demand, sc.q_demand, sc.p_gen, sc.f_target,
                           SteerConfig(w=1e6, x_prior=xd))
            assert res.converged
            assert np.abs(res.x_star - xd).max() < 1e-3

    def test_balance_and_objective(self, case39, steering_setup):
        chosen, x_dc = steering_setup
        for sc, xd in zip(chosen, x_dc):
            res = steer_reactance(case39, sc.p_demand, sc.q_demand, sc.p_gen, sc.f_target,
                           SteerConfig(w=1e-2, x_prior=xd))
            assert res.converged and res.x_star.min() >= 0
            assert bus_balance(case39, res.x_star, res.voltage, sc.p_demand, sc.q_demand,
                               sc.p_gen) < 1e-5
            prior_cost = steering_objective(case39, sc.p_demand, sc.q_demand, sc.p_gen, sc.f_target,
                                      xd, xd, 1e-2)
            assert res.objective <= prior_cost + 1e-9
            assert len(res.mismatch_per_line) == case39.n_branch
            assert res.mean_mismatch == pytest.approx(res.mismatch_per_line.mean())

    def test_infinite_w_is_prior(self, case39, steering_setup):
        chosen, x_dc = steering_setup
        sc = chosen[0]
        res = steer_reactance(case39, sc.p_demand, sc.q_demand, sc.p_gen, sc.f_target,
                       SteerConfig(w=math.inf, x_prior=x_dc[0]))
        st = acpf_solve(case39, sc.p_demand, sc.q_demand, sc.p_gen, x_dc[0])
        assert res.mean_mismatch == pytest.approx(flow_mismatch(case39, st.f_send, sc.f_target)[1])

    def test_negative_w_rejected(self):
        with pytest.raises(ValueError):
            SteerConfig(w=-1.0, x_prior=np.ones(2))

    def test_sweep_sentinel_reproduces_dc_column(self, case39, steering_setup):
        chosen, x_dc = steering_setup
        rows = w_sweep(case39, chosen[:2], x_dc[:2], [math.inf])
        by = {(r.scenario, r.label): r.mean_mismatch for r in rows}
        for sc in chosen[:2]:
            assert by[(sc.index, "steered")] == by[(sc.index, "dc")]
        curve = average_curve(rows)
        assert [c[0] for c in curve] == ["nominal", "dc", "steered"]
        text = sweep_csv(rows, "h")
        assert text.splitlines()[1] == "scenario,setpoint,w,mean_mismatch_pct,converged"
        assert "%" in text.splitlines()[0]
        assert len(text.splitlines()) == 2 + len(rows) + len(curve)
        assert '"setpoint": "dc"' in x_star_json(rows)


def test_flow_mismatch_arithmetic():
    net = make_network(2, [(0, 1)], rate=2.0)
    per, mean = flow_mismatch(net, [0.5], [0.7])
    assert mean == pytest.approx(10.0)
    assert flow_mismatch(net, [0.3], [0.3])[1] == 0.0


def test_trend_violations():
    curve = [("steered", 1.0, 2.0, 1), ("steered", 0.1, 2.1, 1), ("steered", 0.01, 2.5, 1)]
    bad = trend_violations(curve, noise=0.2)
    assert len(bad) == 1 and bad[0][:2] == (0.1, 0.01)
