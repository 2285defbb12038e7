"""Command-line front end.

A study lives in one directory::

    <out>/config.json     exact configuration used
    <out>/dataset.jsonl   scenario dataset
    <out>/plans/          siting plans (JSON)
    <out>/reports/        CSV and JSON reports

Exit codes: 0 success, 1 usage, 2 data fault, 3 solver fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from flowctrl import acsteer, scenario, sitesize
from flowctrl.acpf import AcPowerFlowError
from flowctrl.netmodel import CaseFormatError, Network, NetworkError, load_case
from flowctrl.optcore import QPIterationError

log = logging.getLogger("flowctrl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3
STEER_MIN_CONVERGED = 0.9


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class SolverError(Exception):
    pass


@dataclass
class StudyConfig:
    case: str = "case39"
    seed: int = 0
    scenarios: int = scenario.PRESETS["full"]
    sprime: list = field(default_factory=lambda: [5, 20, 50])
    k: int | None = None
    w_grid: list = field(default_factory=lambda: list(acsteer.DEFAULT_W_GRID))
    steer_count: int = 50
    steer_stride: int | None = None
    allow_large: bool = False

    def to_json(self) -> dict:
        d = asdict(self)
        d["w_grid"] = [_w_str(w) for w in self.w_grid]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "StudyConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "w_grid" in kw:
            kw["w_grid"] = [float(w) for w in kw["w_grid"]]
        return cls(**kw)

    def hash(self, *keys) -> str:
        d = self.to_json()
        return scenario.config_hash({k: d[k] for k in keys} if keys else d)


def _w_str(w) -> str:
    return "inf" if math.isinf(w) else repr(float(w))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _w_list(text: str) -> list:
    out = []
    for v in text.split(","):
        v = v.strip().lower()
        if not v:
            continue
        try:
            w = math.inf if v in ("inf", "infinity") else float(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad weight {v!r}") from None
        if not w >= 0:
            raise argparse.ArgumentTypeError("weights must be nonnegative")
        out.append(w)
    if not out:
        raise argparse.ArgumentTypeError("empty w grid")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowctrl", description="Power-flow controllability studies with variable line reactance.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="print a network summary")
    v.add_argument("case", help="MATPOWER .m file, native .json file, or the bundled name 'case39'")

    def study_flags(sp, out_required=True):
        sp.add_argument("--out", required=out_required, type=Path, help="study directory")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")

    g = sub.add_parser("generate", help="generate the scenario dataset")
    study_flags(g)
    g.add_argument("--case", default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--scenarios", type=int, default=None,
                   help=f"number of demand draws; presets {scenario.PRESETS}")

    s = sub.add_parser("sitesize", help="siting/sizing sweeps over S'")
    study_flags(s)
    s.add_argument("--sprime", type=_int_list, default=None, help="comma-separated S' values")
    s.add_argument("--k", type=int, default=None, help="solve at this budget only (no K_min search)")
    s.add_argument("--allow-large", action="store_true", help=f"permit S' > {sitesize.DESK_MAX_SPRIME}")

    t = sub.add_parser("steer", help="AC steering sweep over the regularization weight")
    study_flags(t)
    t.add_argument("--w-grid", type=_w_list, default=None, help="comma-separated weights; 'inf' = prior")
    t.add_argument("--scenarios", type=int, default=None, help="number of scenarios to steer")
    t.add_argument("--stride", type=int, default=None, help="selection stride (default: spread evenly)")
    t.add_argument("--allow-large", action="store_true")
    return p


# ---------------------------------------------------------------------------
# study directory helpers
# ---------------------------------------------------------------------------

def _load_config(out: Path) -> StudyConfig:
    path = out / "config.json"
    if not path.exists():
        return StudyConfig()
    return StudyConfig.from_json(json.loads(path.read_text()))


def _save_config(out: Path, cfg: StudyConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _load_net(case: str) -> Network:
    try:
        return load_case(case)
    except FileNotFoundError as exc:
        raise DataError(f"case file not found: {case}") from exc
    except (CaseFormatError, NetworkError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _load_dataset(out: Path, net: Network) -> scenario.ScenarioSet:
    path = out / "dataset.jsonl"
    if not path.exists():
        raise DataError(f"{path} not found; run 'flowctrl generate --out {out}' first")
    try:
        return scenario.read_dataset(path, net)
    except (ValueError, KeyError, scenario.ScenarioValidationError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _jobs(args) -> int:
    return args.jobs if args.jobs else acsteer.default_jobs()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    net = _load_net(args.case)
    bridges = sorted(net.bridges)
    print(f"name: {net.name}")
    print(f"N={net.n_bus} E={net.n_branch} C={net.n_cycles}")
    print(f"slack bus: {net.slack}")
    print(f"bridges ({len(bridges)}): {bridges}")
    print(f"radial: {str(net.n_cycles == 0).lower()}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_config(args.out)
    if args.case is not None:
        cfg.case = args.case
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scenarios is not None:
        cfg.scenarios = args.scenarios
    if cfg.scenarios < 1:
        raise UsageError("--scenarios must be at least 1")
    net = _load_net(cfg.case)
    try:
        ds = scenario.build_dataset(net, cfg.scenarios, cfg.seed, jobs=_jobs(args))
    except scenario.EmptyDatasetError as exc:
        raise DataError(str(exc)) from exc
    _save_config(args.out, cfg)
    scenario.write_dataset(args.out / "dataset.jsonl", ds)
    chash = cfg.hash("case", "seed", "scenarios")
    _write(args.out / "reports" / "difficulty.csv", scenario.difficulty_csv(ds, chash))
    _write(args.out / "reports" / "filter_counts.json",
           json.dumps({"config_hash": chash, **ds.counts}, indent=2, sort_keys=True) + "\n")
    c = ds.counts
    print(f"requested={c['requested']} dispatch_infeasible={c['dispatch_infeasible']} "
          f"solver_fault={c['solver_fault']} non_realizable={c['non_realizable']} kept={c['kept']}")
    return EXIT_OK


def _screened_prefix(net, ds, count, cache):
    """First ``count`` scenarios (by difficulty) that are realizable within the reactance range."""
    kept = cache.setdefault("kept", [])
    pos = cache.setdefault("pos", 0)
    while len(kept) < count and pos < len(ds):
        ok, dropped = sitesize.screen_scenarios(net, [ds[pos]])
        kept.extend(ok)
        cache.setdefault("dropped", []).extend(sc.index for sc in dropped)
        pos += 1
    cache["pos"] = pos
    if len(kept) < count:
        raise DataError(f"only {len(kept)} usable scenarios available, S'={count} requested")
    return kept[:count]


def cmd_sitesize(args) -> int:
    cfg = _load_config(args.out)
    if args.sprime is not None:
        cfg.sprime = args.sprime
    cfg.k = args.k
    cfg.allow_large = args.allow_large
    if any(sp < 1 for sp in cfg.sprime):
        raise UsageError("S' values must be at least 1")
    try:
        for sp in cfg.sprime:
            sitesize.check_desk_scale(sp, cfg.allow_large)
    except sitesize.DeskScaleError as exc:
        raise UsageError(str(exc)) from None
    net = _load_net(cfg.case)
    if cfg.k is not None and not 0 <= cfg.k <= net.n_branch:
        raise UsageError(f"--k must lie in [0, {net.n_branch}]")
    ds = _load_dataset(args.out, net)
    _save_config(args.out, cfg)
    chash = cfg.hash("case", "seed", "scenarios", "sprime", "k")

    cache: dict = {}
    sweep_rows, kmin_rows, gamma_parts = [], [], []
    for sp in sorted(cfg.sprime):
        chosen = _screened_prefix(net, ds, sp, cache)
        flows = np.array([sc.f_target for sc in chosen])
        if cfg.k is not None:
            plan = sitesize.solve_siting(sitesize.SitingProblem(net, flows, cfg.k))
            sweep_rows.append((sp, cfg.k, plan.status, plan.objective, True))
            print(f"S'={sp} K={cfg.k} status={plan.status} objective={plan.objective:.6g}")
        else:
            try:
                res = sitesize.kmin_search(net, flows)
            except sitesize.InfeasibleAtFullBudget as exc:
                raise DataError(str(exc)) from exc
            plan = res.plan
            sweep_rows.extend((sp, *row) for row in sorted(res.table, key=lambda r: -r[0]))
            kmin_rows.append((sp, res.k_min, res.objective_kmin, res.objective_full))
            print(f"S'={sp} K_min={res.k_min} objective_kmin={res.objective_kmin:.6g} "
                  f"objective_full={res.objective_full:.6g}")
        _write(args.out / "plans" / f"plan_sprime{sp}_k{plan.K}.json", sitesize.plan_json(plan) + "\n")
        if plan.feasible:
            text = sitesize.gamma_csv(net, plan, chash, s_prime=sp)
            gamma_parts.append(text if not gamma_parts else "".join(text.splitlines(True)[2:]))

    if cache.get("dropped"):
        log.warning("scenarios dropped as unrealizable within the reactance range: %s", cache["dropped"])
    reports = args.out / "reports"
    _write(reports / "sitesize_sweep.csv", sitesize.sweep_csv(sweep_rows, chash))
    if kmin_rows:
        _write(reports / "kmin.csv", sitesize.kmin_csv(kmin_rows, chash))
    if gamma_parts:
        _write(reports / "gamma.csv", "".join(gamma_parts))
    return EXIT_OK


def cmd_steer(args) -> int:
    cfg = _load_config(args.out)
    if args.w_grid is not None:
        cfg.w_grid = args.w_grid
    if args.scenarios is not None:
        cfg.steer_count = args.scenarios
    if args.stride is not None:
        cfg.steer_stride = args.stride
    cfg.allow_large = args.allow_large or cfg.allow_large
    if cfg.steer_count < 1:
        raise UsageError("empty scenario selection: --scenarios must be at least 1")
    try:
        sitesize.check_desk_scale(cfg.steer_count, cfg.allow_large)
    except sitesize.DeskScaleError as exc:
        raise UsageError(f"the steering set needs a full-budget siting plan: {exc}") from None
    net = _load_net(cfg.case)
    ds = _load_dataset(args.out, net)
    usable, dropped = sitesize.screen_scenarios(net, list(ds))
    stride = cfg.steer_stride or max(1, len(usable) // cfg.steer_count)
    try:
        chosen = scenario.select_every(usable, stride, cfg.steer_count)
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    _save_config(args.out, cfg)
    chash = cfg.hash("case", "seed", "scenarios", "w_grid", "steer_count", "steer_stride")

    flows = np.array([sc.f_target for sc in chosen])
    plan = sitesize.solve_siting(sitesize.SitingProblem(net, flows, net.n_branch))
    if not plan.feasible:
        raise SolverError(f"full-budget siting plan for the steering set is {plan.status}")
    _write(args.out / "plans" / "steer_plan_full_budget.json", sitesize.plan_json(plan) + "\n")
    x_dc = sitesize.dc_setpoints(net, flows, plan)

    rows = acsteer.w_sweep(net, chosen, x_dc, cfg.w_grid, jobs=_jobs(args))
    reports = args.out / "reports"
    _write(reports / "steer_sweep.csv", acsteer.sweep_csv(rows, chash))
    _write(reports / "x_star.json", acsteer.x_star_json(rows) + "\n")

    per_scen: dict = {}
    for r in rows:
        per_scen[r.scenario] = per_scen.get(r.scenario, True) and r.converged
    ok = sum(per_scen.values())
    for label, w, mean, n in acsteer.average_curve(rows):
        print(f"{label:8s} w={_w_str(w) if w is not None else '-':>8s} mean_mismatch={mean:.4f}% (n={n})")
    bad = acsteer.trend_violations(acsteer.average_curve(rows))
    for w_a, w_b, rise in bad:
        log.warning("averaged curve rises by %.3f pp between w=%g and w=%g", rise, w_a, w_b)
    print(f"converged scenarios: {ok}/{len(per_scen)}")
    if ok < STEER_MIN_CONVERGED * len(per_scen):
        raise SolverError(f"only {ok} of {len(per_scen)} scenarios converged")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "generate": cmd_generate,
            "sitesize": cmd_sitesize, "steer": cmd_steer}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"flowctrl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"flowctrl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, AcPowerFlowError, QPIterationError) as exc:
        print(f"flowctrl: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
