import json

import numpy as np
import pytest
from netgen import balanced_injection, make_network, random_network, triangle

from flowctrl.dcflow import nominal_flows, solve_dcpf
from flowctrl.optcore import INFEASIBLE, lp_solve
from flowctrl.sitesize import (
    DeskScaleError,
    InfeasibleAtFullBudget,
    SitingPlan,
    SitingProblem,
    _plan_from_x,
    adjustment_profile,
    brute_force_siting,
    build_siting_milp,
    check_desk_scale,
    check_plan,
    dc_setpoints,
    gamma_csv,
    kmin_csv,
    kmin_search,
    plan_json,
    screen_scenarios,
    solve_siting,
    sweep_csv,
)

TRI_TARGET = np.array([[0.5, -0.5, -0.5]])


def random_instance(rng, e_max=10):
    """Small meshed network plus 1-3 realizable target flows near nominal."""
    while True:
        net = random_network(rng, 3, 7, extra_max=4, e_max=e_max)
        if net.n_cycles and net.n_branch <= e_max:
            break
    flows = []
    for _ in range(int(rng.integers(1, 4))):
        x = net.x_nominal * rng.uniform(0.6, 1.6, net.n_branch)
        flows.append(solve_dcpf(net, x, balanced_injection(rng, net)).flows)
    return net, np.array(flows)


class TestBuild:
    def test_variable_count(self, case39, case39_dataset):
        flows = np.array([s.f_target for s in case39_dataset[:5]])
        mip = build_siting_milp(case39, flows, 46)
        assert mip.lp.n == 3 * 46 + 5 * (46 + 39) == 563
        assert mip.integer_mask.sum() == 46

    def test_k0_pins_nominal(self):
        net = triangle()
        f0 = nominal_flows(net, np.array([1.0, -1.0, 0.0]))
        plan = solve_siting(SitingProblem(net, f0[None, :], 0))
        assert plan.feasible and plan.objective == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(plan.x_lo, net.x_nominal)
        np.testing.assert_allclose(plan.x_hi, net.x_nominal)

    def test_budget_out_of_range(self):
        with pytest.raises(ValueError):
            SitingProblem(triangle(), TRI_TARGET, 4)


class TestTriangle:
    def test_k1(self):
        plan = solve_siting(SitingProblem(triangle(), TRI_TARGET, 1))
        best, _ = brute_force_siting(triangle(), TRI_TARGET, K=1)
        assert plan.feasible
        assert plan.objective == pytest.approx(1.0, abs=1e-9)
        assert best == pytest.approx(1.0, abs=1e-9)
        assert check_plan(triangle(), TRI_TARGET, plan) == []

    def test_k0_infeasible(self):
        assert solve_siting(SitingProblem(triangle(), TRI_TARGET, 0)).status == INFEASIBLE

    def test_circulating_never_feasible(self):
        for k in range(4):
            assert not solve_siting(SitingProblem(triangle(), [[1.0, 1.0, 1.0]], k)).feasible

    def test_kmin(self):
        res = kmin_search(triangle(), TRI_TARGET)
        assert res.k_min == 1
        assert res.objective_kmin >= res.objective_full - 1e-9

    def test_gamma_of_enumerated_plan(self):
        net = triangle()
        mip = build_siting_milp(net, TRI_TARGET, 1, fixed_d=[1, 0, 0])
        res = lp_solve(mip.lp)
        plan = _plan_from_x(net, 1, 1, res.x, res.obj, 0)
        assert plan.x_hi[0] == pytest.approx(2.0)
        prof = adjustment_profile(plan, net.x_nominal)
        assert prof.gamma_up[0] == pytest.approx(1.0)
        assert prof.gamma_down[0] == pytest.approx(0.0)
        assert prof.gamma_up[1] == 0.0 and prof.gamma_down[2] == 0.0

    def test_bnb_engine_agrees(self):
        a = solve_siting(SitingProblem(triangle(), TRI_TARGET, 1), engine="bnb")
        assert a.objective == pytest.approx(1.0, abs=1e-9)


def test_adjustment_formula():
    x0 = np.array([1.0, 2.0])
    plan = SitingPlan("optimal", 2, 1.0, d=np.array([1.0, 1.0]), x_lo=np.array([0.5, 2.0]),
                      x_hi=np.array([1.0, 3.0]))
    prof = adjustment_profile(plan, x0)
    np.testing.assert_allclose(prof.gamma_down, [-0.5, 0.0])
    np.testing.assert_allclose(prof.gamma_up, [0.0, 0.5])


def test_nominal_only_kmin_zero(rng):
    net = random_network(rng, 4, 7, extra_max=4)
    f0 = nominal_flows(net, balanced_injection(rng, net))
    res = kmin_search(net, np.array([f0, 2 * f0]))
    assert res.k_min == 0 and res.objective_kmin == pytest.approx(0.0, abs=1e-9)


class TestRandomSmall:
    def test_brute_force_and_invariants(self):
        rng = np.random.default_rng(0)
        for _ in range(8):
            net, flows = random_instance(rng, e_max=8)
            best, _ = brute_force_siting(net, flows)
            plan = solve_siting(SitingProblem(net, flows, net.n_branch, exempt_bridges=False))
            if np.isinf(best):
                assert not plan.feasible
                continue
            assert plan.objective == pytest.approx(best, abs=1e-6)
            assert check_plan(net, flows, plan) == []

    def test_objective_nonincreasing_in_k(self):
        rng = np.random.default_rng(1)
        net, flows = random_instance(rng, e_max=9)
        objs = []
        for k in range(net.n_branch + 1):
            plan = solve_siting(SitingProblem(net, flows, k))
            objs.append(plan.objective if plan.feasible else np.inf)
        assert all(b <= a + 1e-9 for a, b in zip(objs, objs[1:]))

    def test_bridge_exemption(self):
        rng = np.random.default_rng(2)
        for _ in range(8):
            net, flows = random_instance(rng)
            a = solve_siting(SitingProblem(net, flows, net.n_branch, exempt_bridges=True))
            b = solve_siting(SitingProblem(net, flows, net.n_branch, exempt_bridges=False))
            assert a.status == b.status
            if a.feasible:
                assert a.objective == pytest.approx(b.objective, abs=1e-6)


class TestCase39:
    def test_plan_and_setpoints(self, case39, case39_dataset):
        flows = np.array([s.f_target for s in case39_dataset[:5]])
        plan = solve_siting(SitingProblem(case39, flows, case39.n_branch))
        assert check_plan(case39, flows, plan) == []
        assert not plan.d[list(case39.bridges)].any()
        x = dc_setpoints(case39, flows, plan)
        a = case39.incidence.astype(float)
        for f, xs in zip(flows, x):
            assert np.all(xs >= plan.x_lo - 1e-9) and np.all(xs <= plan.x_hi + 1e-9)
            # the branch law holds for some angles: residual of the least-squares fit
            theta = np.linalg.lstsq(a, f * xs, rcond=None)[0]
            assert np.abs(f * xs - a @ theta).max() < 1e-7

    def test_screen_keeps_realizable(self, case39, case39_dataset):
        keep, dropped = screen_scenarios(case39, case39_dataset[:10])
        assert len(keep) + len(dropped) == 10

    def test_kmin_infeasible_at_full_budget(self):
        with pytest.raises(InfeasibleAtFullBudget):
            kmin_search(triangle(), [[1.0, 1.0, 1.0]])


def test_desk_cap():
    check_desk_scale(200)
    check_desk_scale(201, allow_large=True)
    with pytest.raises(DeskScaleError, match="allow"):
        check_desk_scale(201)


class TestReports:
    def test_plan_json_round_trip(self):
        plan = solve_siting(SitingProblem(triangle(), TRI_TARGET, 1))
        again = SitingPlan.from_json(json.loads(plan_json(plan)))
        np.testing.assert_array_equal(again.d, plan.d)
        assert again.objective == plan.objective

    def test_csv_headers(self):
        net = triangle()
        plan = solve_siting(SitingProblem(net, TRI_TARGET, 1))
        for text in (sweep_csv([(1, 1, "optimal", 1.0, True)], "abc"),
                     kmin_csv([(1, 1, 1.0, 1.0)], "abc"),
                     gamma_csv(net, plan, "abc", s_prime=1)):
            first = text.splitlines()[0]
            assert first.startswith("# config_hash=abc") and "units" in first
        rows = gamma_csv(net, plan, "abc").splitlines()[2:]
        assert len(rows) == 3
