import json

import numpy as np
import pytest
from netgen import triangle

from flowctrl.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from flowctrl.dcflow import nominal_flows
from flowctrl.netmodel import case39 as load_case39
from flowctrl.scenario import Scenario, ScenarioSet, write_dataset


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_validate_case39(capsys):
    code, out, _ = run(capsys, "validate", "case39")
    assert code == EXIT_OK
    assert "N=39 E=46 C=8" in out
    assert "bridges (11)" in out
    assert "radial: false" in out


def test_validate_triangle_json(tmp_path, capsys):
    path = tmp_path / "tri.json"
    path.write_text(json.dumps(triangle().to_dict()))
    code, out, _ = run(capsys, "validate", path)
    assert code == EXIT_OK
    assert "C=1" in out and "bridges (0): []" in out


@pytest.mark.parametrize("text", ["mpc.bus = [1 2", "{not json", ""])
def test_validate_corrupt(tmp_path, capsys, text):
    suffix = ".json" if text.startswith("{") else ".m"
    path = tmp_path / f"bad{suffix}"
    path.write_text(text)
    code, _, err = run(capsys, "validate", path)
    assert code != EXIT_OK and err


def test_validate_missing_file(tmp_path, capsys):
    assert run(capsys, "validate", tmp_path / "nope.m")[0] == EXIT_DATA


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["generate", "--bogus"])
    assert info.value.code == EXIT_USAGE


def test_generate_zero_scenarios(tmp_path, capsys):
    assert run(capsys, "generate", "--out", tmp_path, "--scenarios", 0)[0] == EXIT_USAGE


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    dirs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        assert main(["generate", "--out", str(out), "--scenarios", "30", "--seed", "3", "--jobs", "1"]) == 0
        dirs.append(out)
    return dirs


def test_generate_deterministic(generated):
    a, b = generated
    for rel in ("dataset.jsonl", "config.json", "reports/difficulty.csv", "reports/filter_counts.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_generate_counts_reconcile(generated):
    counts = json.loads((generated[0] / "reports" / "filter_counts.json").read_text())
    assert counts["requested"] == 30
    assert counts["kept"] <= 30
    assert counts["kept"] + counts["dispatch_infeasible"] + counts["solver_fault"] + counts["non_realizable"] == 30
    lines = (generated[0] / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 1 + counts["kept"]
    header = (generated[0] / "reports" / "difficulty.csv").read_text().splitlines()[0]
    assert "config_hash=" in header and "p.u." in header


def test_sitesize_missing_dataset(tmp_path, capsys):
    assert run(capsys, "sitesize", "--out", tmp_path, "--sprime", 1)[0] == EXIT_DATA


def test_sitesize_desk_cap(tmp_path, capsys):
    code, _, err = run(capsys, "sitesize", "--out", tmp_path, "--sprime", 500)
    assert code == EXIT_USAGE and "--allow-large" in err


def test_sitesize_nominal_k0(tmp_path, capsys):
    net = load_case39()
    p = net.injection(net.p_setpoint, net.p_demand)
    p[net.slack] -= p.sum()
    pg = net.p_setpoint.copy()
    pg[list(net.gen_bus).index(net.slack)] -= net.injection(net.p_setpoint, net.p_demand).sum()
    f = nominal_flows(net, p)
    sc = Scenario(1, np.ones(net.n_bus), np.ones(net.n_bus), net.p_demand, net.q_demand, pg, f, f, 0.0, 0)
    write_dataset(tmp_path / "dataset.jsonl", ScenarioSet([sc], 0))
    code, out, _ = run(capsys, "sitesize", "--out", tmp_path, "--sprime", 1, "--k", 0)
    assert code == EXIT_OK
    rows = (tmp_path / "reports" / "sitesize_sweep.csv").read_text().splitlines()
    assert "config_hash=" in rows[0]
    s_prime, k, status, obj = rows[2].split(",")[:4]
    assert (s_prime, k, status) == ("1", "0", "optimal")
    assert float(obj) == pytest.approx(0.0, abs=1e-9)


def test_sitesize_kmin_rows(generated, capsys):
    out = generated[1]
    code, _, _ = run(capsys, "sitesize", "--out", out, "--sprime", "1,2")
    assert code == EXIT_OK
    rows = (out / "reports" / "kmin.csv").read_text().splitlines()[2:]
    kmins = [int(r.split(",")[1]) for r in rows]
    assert len(kmins) == 2 and kmins[0] <= kmins[1]
    assert (out / "plans" / f"plan_sprime2_k{kmins[1]}.json").exists()
    assert (out / "reports" / "gamma.csv").read_text().startswith("# config_hash=")


def test_steer_empty_selection(generated, capsys):
    assert run(capsys, "steer", "--out", generated[0], "--scenarios", 0)[0] == EXIT_USAGE


def test_steer_inf_grid(generated, capsys):
    out = generated[0]
    code, stdout, _ = run(capsys, "steer", "--out", out, "--scenarios", 2, "--w-grid", "inf", "--jobs", 1)
    assert code == EXIT_OK
    lines = (out / "reports" / "steer_sweep.csv").read_text().splitlines()
    assert "%" in lines[0]
    body = [ln.split(",") for ln in lines[2:]]
    per = [r for r in body if r[0] != "average"]
    assert len(per) == 2 * 3
    dc = {r[0]: r[3] for r in per if r[1] == "dc"}
    steered = {r[0]: r[3] for r in per if r[1] == "steered"}
    assert dc == steered
    assert len([r for r in body if r[0] == "average"]) == 3
    assert "converged scenarios: 2/2" in stdout
