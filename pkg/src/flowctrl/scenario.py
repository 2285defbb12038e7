"""Desired-flow scenario generation.

Demands are scaled entrywise by random factors, dispatched with the
flow-relaxed OPF (balance, generator and line limits only; no branch law),
filtered for infeasibility and realizability, and sorted by how far each
target flow sits from the nominal-reactance DC flow.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from flowctrl.dcflow import check_realizability, nominal_flows
from flowctrl.netmodel import Network
from flowctrl.optcore import INFEASIBLE, QPIterationError, QuadraticProgram, qp_solve

log = logging.getLogger(__name__)

U_P_RANGE = (0.2, 2.0)
U_Q_RANGE = (0.9, 1.1)
MIN_GEN_COST = 1e-6
BALANCE_TOL = 1e-7
PRESETS = {"full": 5000, "desk": 200, "small": 50}


class EmptyDatasetError(RuntimeError):
    pass


class ScenarioValidationError(ValueError):
    pass


@dataclass
class DemandDraw:
    u_p: np.ndarray
    u_q: np.ndarray
    p_demand: np.ndarray
    q_demand: np.ndarray


@dataclass
class Dispatch:
    status: str
    p_gen: np.ndarray | None = None
    f: np.ndarray | None = None
    cost: float = np.nan


@dataclass
class Scenario:
    index: int
    u_p: np.ndarray
    u_q: np.ndarray
    p_demand: np.ndarray
    q_demand: np.ndarray
    p_gen: np.ndarray
    f_target: np.ndarray
    f_nominal_dc: np.ndarray
    difficulty: float
    draw: int = -1

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        arrays = {"u_p", "u_q", "p_demand", "q_demand", "p_gen", "f_target", "f_nominal_dc"}
        kw = {k: (np.asarray(v, dtype=float) if k in arrays else v) for k, v in d.items()}
        return cls(**kw)


@dataclass
class ScenarioSet:
    scenarios: list
    seed: int
    config: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenarios)

    def __getitem__(self, k):
        return self.scenarios[k]

    def __iter__(self):
        return iter(self.scenarios)

    @property
    def difficulties(self) -> np.ndarray:
        return np.array([s.difficulty for s in self.scenarios])

    def prefix(self, count: int) -> "ScenarioSet":
        return ScenarioSet(self.scenarios[:count], self.seed, dict(self.config), dict(self.counts))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def generate_demands(net: Network, S: int, seed: int, force_unit: bool = False) -> list:
    """``S`` demand draws; per scenario the p-factors (bus order) then the q-factors."""
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = make_rng(seed)
    n = net.n_bus
    draws = []
    for _ in range(S):
        if force_unit:
            u_p, u_q = np.ones(n), np.ones(n)
        else:
            u_p = rng.uniform(*U_P_RANGE, size=n)
            u_q = rng.uniform(*U_Q_RANGE, size=n)
        draws.append(DemandDraw(u_p, u_q, net.p_demand * u_p, net.q_demand * u_q))
    return draws


def dispatch_program(net: Network, p_demand) -> QuadraticProgram:
    """Variables ``[p_gen (G), f (E)]``; quadratic generation cost, free flow pattern."""
    g, e = len(net.generators), net.n_branch
    q = np.r_[np.maximum(net.gen_cost, MIN_GEN_COST), np.zeros(e)]
    a_eq = np.hstack([-net.gen_matrix, net.incidence.T.astype(float)])
    b_eq = -np.asarray(p_demand, dtype=float)
    lo = np.r_[net.p_min, -net.f_rating]
    hi = np.r_[net.p_max, net.f_rating]
    return QuadraticProgram(q, np.zeros(g + e), a_eq, b_eq, lo=lo, hi=hi)


def solve_dispatch(net: Network, p_demand) -> Dispatch:
    p_demand = np.asarray(p_demand, dtype=float)
    total = p_demand.sum()
    if total > net.p_max.sum() + 1e-9 or total < net.p_min.sum() - 1e-9:
        return Dispatch(INFEASIBLE)
    qp = dispatch_program(net, p_demand)
    try:
        res = qp_solve(qp)
    except QPIterationError as exc:
        log.warning("dispatch solve hit iteration limit: %s", exc)
        return Dispatch("solver_fault")
    if not res.ok:
        return Dispatch(res.status)
    g = len(net.generators)
    p_gen = np.clip(res.x[:g], net.p_min, net.p_max)
    f = np.clip(res.x[g:], -net.f_rating, net.f_rating)
    return Dispatch("optimal", p_gen, f, res.obj)


def _solve_dispatch_star(args):
    return solve_dispatch(*args)


def dispatch_all(net: Network, draws, jobs: int = 1) -> list:
    work = [(net, d.p_demand) for d in draws]
    if jobs <= 1 or len(work) < 2:
        return [solve_dispatch(*w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_solve_dispatch_star, work, chunksize=max(1, len(work) // (4 * jobs))))


def assemble(net: Network, draws, dispatches, seed: int = 0, config=None) -> ScenarioSet:
    """Filter dispatched draws and sort the survivors by difficulty."""
    counts = {"requested": len(draws), "dispatch_infeasible": 0, "solver_fault": 0,
              "non_realizable": 0, "kept": 0}
    kept = []
    for k, (draw, disp) in enumerate(zip(draws, dispatches)):
        if disp.status != "optimal":
            key = "dispatch_infeasible" if disp.status == INFEASIBLE else "solver_fault"
            counts[key] += 1
            continue
        if not check_realizability(net, disp.f):
            counts["non_realizable"] += 1
            continue
        p = net.injection(disp.p_gen, draw.p_demand)
        p[net.slack] -= p.sum()  # clip noise only
        f0 = nominal_flows(net, p)
        diff = disp.f - f0
        kept.append(Scenario(index=-1, u_p=draw.u_p, u_q=draw.u_q, p_demand=draw.p_demand,
                             q_demand=draw.q_demand, p_gen=disp.p_gen, f_target=disp.f,
                             f_nominal_dc=f0, difficulty=float(diff @ diff), draw=k))
    counts["kept"] = len(kept)
    if not kept:
        raise EmptyDatasetError(f"every scenario was filtered out: {counts}")
    kept.sort(key=lambda s: (s.difficulty, s.draw))
    for i, s in enumerate(kept):
        s.index = i + 1
    return ScenarioSet(kept, seed, dict(config or {}), counts)


def build_dataset(net: Network, S: int, seed: int, jobs: int = 1,
                  force_unit: bool = False) -> ScenarioSet:
    draws = generate_demands(net, S, seed, force_unit=force_unit)
    dispatches = dispatch_all(net, draws, jobs=jobs)
    config = {"S": S, "u_p": list(U_P_RANGE), "u_q": list(U_Q_RANGE), "force_unit": force_unit}
    out = assemble(net, draws, dispatches, seed=seed, config=config)
    log.info("scenario filter counts: %s", out.counts)
    return out


def select_every(scenarios, stride: int, count: int) -> list:
    """Scenarios at 1-based positions 1, 1 + stride, ..., 1 + stride * (count - 1)."""
    items = list(scenarios)
    if stride < 1 or count < 1:
        raise ValueError("stride and count must be positive")
    if stride * (count - 1) >= len(items):
        raise IndexError(f"cannot select {count} scenarios with stride {stride} "
                         f"from a set of {len(items)}")
    return [items[stride * k] for k in range(count)]


def validate_scenario(net: Network, sc: Scenario, tol: float = BALANCE_TOL) -> None:
    a = net.incidence.astype(float)
    resid = a.T @ sc.f_target - net.injection(sc.p_gen, sc.p_demand)
    if np.abs(resid).max() > tol:
        raise ScenarioValidationError(f"scenario {sc.index}: balance residual {np.abs(resid).max():.3e}")
    if np.any(np.abs(sc.f_target) > net.f_rating + tol):
        raise ScenarioValidationError(f"scenario {sc.index}: line limit violated")
    if np.any(sc.p_gen < net.p_min - tol) or np.any(sc.p_gen > net.p_max + tol):
        raise ScenarioValidationError(f"scenario {sc.index}: generator limit violated")
    if not check_realizability(net, sc.f_target):
        raise ScenarioValidationError(f"scenario {sc.index}: target flow not realizable")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_dataset(path, dataset: ScenarioSet) -> None:
    path = Path(path)
    with path.open("w") as fh:
        header = {"kind": "header", "seed": dataset.seed, "config": dataset.config,
                  "counts": dataset.counts}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sc in dataset.scenarios:
            fh.write(json.dumps(sc.to_json(), sort_keys=True) + "\n")


def read_dataset(path, net: Network | None = None) -> ScenarioSet:
    """Load a JSON-lines dataset; with ``net`` every scenario is re-validated."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("kind") != "header":
        raise ValueError(f"{path}: missing header line")
    scenarios = [Scenario.from_json(json.loads(line)) for line in lines[1:] if line.strip()]
    ds = ScenarioSet(scenarios, header["seed"], header.get("config", {}), header.get("counts", {}))
    if net is not None:
        for sc in ds:
            validate_scenario(net, sc)
    return ds


def difficulty_csv(dataset: ScenarioSet, chash: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={chash} units: difficulty in p.u.^2\n")
    buf.write("index,draw,difficulty_pu2\n")
    for sc in dataset:
        buf.write(f"{sc.index},{sc.draw},{sc.difficulty:.12g}\n")
    return buf.getvalue()
