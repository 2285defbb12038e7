"""Network data model, case ingestion and graph algebra.

A :class:`Network` is an immutable container of buses, directed branches and
generators in per unit.  Branch orientation (``from`` -> ``to``) fixes the sign
convention of every incidence row, cycle indicator and flow in the package.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np


DEFAULT_RATE_CAP = 99.0


class CaseFormatError(ValueError):
    """Raised when a case file cannot be parsed."""

    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        prefix = f"[{', '.join(loc)}] " if loc else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class NetworkError(ValueError):
    """Raised when network data violates a structural invariant."""


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "PV"
    PQ = "PQ"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for kind in cls:
                if kind.value.lower() == value.lower():
                    return kind
        return None


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_demand: float = 0.0
    q_demand: float = 0.0
    v_setpoint: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x_nominal: float
    b_charging: float = 0.0
    tap: float = 1.0
    f_rating: float = DEFAULT_RATE_CAP

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"branch {self.from_bus}->{self.to_bus} is a self loop")
        if not self.x_nominal > 0:
            raise NetworkError(f"branch {self.from_bus}->{self.to_bus}: x must be > 0")
        if not self.f_rating > 0:
            raise NetworkError(f"branch {self.from_bus}->{self.to_bus}: rating must be > 0")
        if not self.tap > 0:
            raise NetworkError(f"branch {self.from_bus}->{self.to_bus}: tap must be > 0")


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    cost_quadratic: float = 0.0
    p_setpoint: float = 0.0  # case dispatch, p.u.

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise NetworkError(f"generator at bus {self.bus}: p_min > p_max")
        if self.cost_quadratic < 0:
            raise NetworkError(f"generator at bus {self.bus}: negative quadratic cost")


@dataclass(frozen=True)
class Network:
    buses: tuple
    branches: tuple
    generators: tuple
    base_mva: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        n = len(self.buses)
        if n == 0:
            raise NetworkError("network has no buses")
        if [b.id for b in self.buses] != list(range(n)):
            raise NetworkError("bus ids must be contiguous 0..N-1 in order")
        slacks = [b.id for b in self.buses if b.kind == BusKind.SLACK]
        if len(slacks) != 1:
            raise NetworkError(f"expected exactly one slack bus, found {len(slacks)}")
        for br in self.branches:
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise NetworkError(f"branch {br.from_bus}->{br.to_bus} references unknown bus")
        for g in self.generators:
            if not 0 <= g.bus < n:
                raise NetworkError(f"generator references unknown bus {g.bus}")
        if not _connected(n, self.from_bus, self.to_bus):
            raise NetworkError("network is not connected")

    # sizes
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_cycles(self) -> int:
        return self.n_branch - self.n_bus + 1

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == BusKind.SLACK)

    # vectorized views
    @cached_property
    def from_bus(self) -> np.ndarray:
        return np.array([br.from_bus for br in self.branches], dtype=int)

    @cached_property
    def to_bus(self) -> np.ndarray:
        return np.array([br.to_bus for br in self.branches], dtype=int)

    @cached_property
    def x_nominal(self) -> np.ndarray:
        return np.array([br.x_nominal for br in self.branches], dtype=float)

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([br.r for br in self.branches], dtype=float)

    @cached_property
    def b_charging(self) -> np.ndarray:
        return np.array([br.b_charging for br in self.branches], dtype=float)

    @cached_property
    def tap(self) -> np.ndarray:
        return np.array([br.tap for br in self.branches], dtype=float)

    @cached_property
    def f_rating(self) -> np.ndarray:
        return np.array([br.f_rating for br in self.branches], dtype=float)

    @cached_property
    def p_demand(self) -> np.ndarray:
        return np.array([b.p_demand for b in self.buses], dtype=float)

    @cached_property
    def q_demand(self) -> np.ndarray:
        return np.array([b.q_demand for b in self.buses], dtype=float)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([g.bus for g in self.generators], dtype=int)

    @cached_property
    def p_min(self) -> np.ndarray:
        return np.array([g.p_min for g in self.generators], dtype=float)

    @cached_property
    def p_setpoint(self) -> np.ndarray:
        return np.array([g.p_setpoint for g in self.generators], dtype=float)

    @cached_property
    def p_max(self) -> np.ndarray:
        return np.array([g.p_max for g in self.generators], dtype=float)

    @cached_property
    def gen_cost(self) -> np.ndarray:
        return np.array([g.cost_quadratic for g in self.generators], dtype=float)

    @cached_property
    def gen_matrix(self) -> np.ndarray:
        """N x G map from generator outputs to bus injections."""
        m = np.zeros((self.n_bus, len(self.generators)))
        m[self.gen_bus, np.arange(len(self.generators))] = 1.0
        return m

    def injection(self, p_gen, p_demand) -> np.ndarray:
        return self.gen_matrix @ np.asarray(p_gen, dtype=float) - np.asarray(p_demand, dtype=float)

    @cached_property
    def incidence(self) -> np.ndarray:
        return build_incidence(self)

    @cached_property
    def cycles(self) -> np.ndarray:
        return cycle_basis(self)

    @cached_property
    def bridges(self) -> frozenset:
        return find_bridges(self)

    def adjacency(self):
        """Per-bus list of ``(neighbor, edge)`` sorted by neighbor then edge index."""
        adj = [[] for _ in range(self.n_bus)]
        for e, (m, n) in enumerate(zip(self.from_bus, self.to_bus)):
            adj[m].append((int(n), e))
            adj[n].append((int(m), e))
        for lst in adj:
            lst.sort()
        return adj

    def to_dict(self) -> dict:
        return {
            "base_mva": self.base_mva,
            "buses": [
                {"id": b.id, "kind": b.kind.value, "pd": b.p_demand, "qd": b.q_demand,
                 "vset": b.v_setpoint}
                for b in self.buses
            ],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x_nominal,
                 "b": br.b_charging, "tap": br.tap, "rate": br.f_rating}
                for br in self.branches
            ],
            "generators": [
                {"bus": g.bus, "pmin": g.p_min, "pmax": g.p_max, "c2": g.cost_quadratic,
                 "pg": g.p_setpoint}
                for g in self.generators
            ],
        }


def _connected(n, frm, to) -> bool:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    comps = n
    for a, b in zip(frm, to):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[ra] = rb
            comps -= 1
    return comps == 1


# ---------------------------------------------------------------------------
# graph algebra
# ---------------------------------------------------------------------------

def build_incidence(net: Network) -> np.ndarray:
    """Signed E x N edge-node incidence matrix (+1 at from-bus, -1 at to-bus)."""
    a = np.zeros((net.n_branch, net.n_bus), dtype=np.int64)
    rows = np.arange(net.n_branch)
    a[rows, net.from_bus] = 1
    a[rows, net.to_bus] = -1
    return a


def spanning_tree(net: Network):
    """BFS tree from the slack bus; returns ``(parent, parent_edge, tree_mask)``."""
    adj = net.adjacency()
    parent = [-1] * net.n_bus
    parent_edge = [-1] * net.n_bus
    seen = [False] * net.n_bus
    tree = np.zeros(net.n_branch, dtype=bool)
    root = net.slack
    seen[root] = True
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, e in adj[u]:
            if not seen[v]:
                seen[v] = True
                parent[v] = u
                parent_edge[v] = e
                tree[e] = True
                queue.append(v)
    return parent, parent_edge, tree


def cycle_basis(net: Network) -> np.ndarray:
    """Fundamental cycle indicators (E x C), one column per non-tree edge.

    Column for chord ``e = (m, n)`` traverses ``e`` forwards then the tree path
    from ``n`` back to ``m``; entries are +1 where the edge is traversed along its
    orientation and -1 against it.
    """
    parent, parent_edge, tree = spanning_tree(net)
    depth = [0] * net.n_bus
    order = sorted(range(net.n_bus), key=lambda k: _depth(parent, k))
    for k in order:
        if parent[k] >= 0:
            depth[k] = depth[parent[k]] + 1

    chords = [e for e in range(net.n_branch) if not tree[e]]
    basis = np.zeros((net.n_branch, len(chords)), dtype=np.int64)
    frm, to = net.from_bus, net.to_bus
    for j, e in enumerate(chords):
        basis[e, j] = 1
        # tree path to(e) -> from(e): climb both ends to their common ancestor
        u, v = int(to[e]), int(frm[e])
        while u != v:
            if depth[u] >= depth[v]:
                pe = parent_edge[u]
                basis[pe, j] += 1 if frm[pe] == u else -1  # traversed child -> parent
                u = parent[u]
            else:
                pe = parent_edge[v]
                basis[pe, j] += 1 if to[pe] == v else -1  # traversed parent -> child
                v = parent[v]
    return basis


def _depth(parent, k):
    d = 0
    while parent[k] >= 0:
        k = parent[k]
        d += 1
    return d


def find_bridges(net: Network) -> frozenset:
    """Edges whose removal disconnects the graph (iterative Tarjan low-link)."""
    adj = net.adjacency()
    n = net.n_bus
    disc = [-1] * n
    low = [0] * n
    bridges = set()
    timer = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            u, in_edge, it = stack[-1]
            advanced = False
            for v, e in it:
                if e == in_edge:
                    continue
                if disc[v] < 0:
                    disc[v] = low[v] = timer
                    timer += 1
                    stack.append((v, e, iter(adj[v])))
                    advanced = True
                    break
                low[u] = min(low[u], disc[v])
            if advanced:
                continue
            stack.pop()
            if stack:
                p = stack[-1][0]
                low[p] = min(low[p], low[u])
                if low[u] > disc[p]:
                    bridges.add(in_edge)
    return frozenset(bridges)


def is_radial(net: Network) -> bool:
    return net.n_branch == net.n_bus - 1


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[]+);")

_MIN_COLS = {"bus": 9, "gen": 10, "branch": 11, "gencost": 4}


def _parse_matpower_text(text: str) -> dict:
    tables: dict = {}
    scalars: dict = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i].split("%", 1)[0]
        m = _MATRIX_RE.search(raw)
        if m:
            name = m.group(1)
            rows = []
            rest = raw[m.end():]
            lineno = i + 1
            while True:
                done = "]" in rest
                body = rest.split("]", 1)[0]
                for chunk in body.split(";"):
                    tokens = chunk.replace(",", " ").split()
                    if not tokens:
                        continue
                    try:
                        rows.append(([float(t) for t in tokens], lineno))
                    except ValueError as exc:
                        raise CaseFormatError(f"non-numeric entry in {name}: {exc}",
                                              line=lineno, field=name) from None
                if done:
                    break
                i += 1
                if i >= len(lines):
                    raise CaseFormatError(f"unterminated matrix {name}", line=lineno, field=name)
                rest = lines[i].split("%", 1)[0]
                lineno = i + 1
            tables[name] = rows
        else:
            s = _SCALAR_RE.search(raw)
            if s:
                scalars[s.group(1)] = s.group(2).strip().strip("'\"")
        i += 1
    return {"tables": tables, "scalars": scalars}


def _rows(tables, name):
    if name not in tables:
        raise CaseFormatError(f"missing table mpc.{name}", field=name)
    rows = tables[name]
    need = _MIN_COLS[name]
    for vals, lineno in rows:
        if len(vals) < need:
            raise CaseFormatError(f"{name} row has {len(vals)} columns, need >= {need}",
                                  line=lineno, field=name)
    return rows


def parse_matpower(text: str, rate_cap: float = DEFAULT_RATE_CAP, name: str = "") -> Network:
    parsed = _parse_matpower_text(text)
    tables, scalars = parsed["tables"], parsed["scalars"]
    try:
        base = float(scalars.get("baseMVA", "100"))
    except ValueError:
        raise CaseFormatError("baseMVA is not numeric", field="baseMVA") from None

    bus_rows = _rows(tables, "bus")
    index = {}
    kinds = []
    for vals, lineno in bus_rows:
        bid = int(vals[0])
        if bid in index:
            raise CaseFormatError(f"duplicate bus id {bid}", line=lineno, field="bus_i")
        btype = int(vals[1])
        if btype not in (1, 2, 3):
            raise CaseFormatError(f"unsupported bus type {btype}", line=lineno, field="type")
        index[bid] = len(index)
        kinds.append(btype)
    if kinds.count(3) != 1:
        raise NetworkError(f"expected exactly one slack (type 3) bus, found {kinds.count(3)}")

    vset = [1.0] * len(index)
    generators = []
    gen_rows = [r for r in _rows(tables, "gen")]
    cost_rows = tables.get("gencost", [])
    active = []
    for k, (vals, lineno) in enumerate(gen_rows):
        if int(vals[0]) not in index:
            raise CaseFormatError(f"generator at unknown bus {int(vals[0])}", line=lineno, field="bus")
        if vals[7] <= 0:
            continue
        active.append(k)
        b = index[int(vals[0])]
        vset[b] = vals[5]
        c2 = 0.0
        if k < len(cost_rows):
            cvals, clineno = cost_rows[k]
            if len(cvals) < 5:
                raise CaseFormatError("gencost row too short", line=clineno, field="gencost")
            if int(cvals[0]) != 2:
                raise CaseFormatError("only polynomial gencost (model 2) is supported",
                                      line=clineno, field="model")
            ncost = int(cvals[3])
            # coefficients listed highest order first; quadratic term only when ncost >= 3
            if ncost >= 3:
                c2 = cvals[4 + ncost - 3]
        generators.append(Generator(bus=b, p_min=vals[9] / base, p_max=vals[8] / base,
                                    cost_quadratic=c2 * base * base, p_setpoint=vals[1] / base))

    buses = []
    for (vals, _), btype in zip(bus_rows, kinds):
        b = index[int(vals[0])]
        kind = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}[btype]
        buses.append(Bus(id=b, kind=kind, p_demand=vals[2] / base, q_demand=vals[3] / base,
                         v_setpoint=vset[b]))

    branches = []
    for vals, lineno in _rows(tables, "branch"):
        if vals[10] <= 0:
            continue
        f, t = int(vals[0]), int(vals[1])
        if f not in index or t not in index:
            raise CaseFormatError(f"branch {f}-{t} references unknown bus", line=lineno, field="fbus")
        rate = vals[5] / base if vals[5] > 0 else rate_cap
        tap = vals[8] if vals[8] != 0 else 1.0
        try:
            branches.append(Branch(index[f], index[t], r=vals[2], x_nominal=vals[3],
                                   b_charging=vals[4], tap=tap, f_rating=rate))
        except NetworkError as exc:
            raise CaseFormatError(str(exc), line=lineno, field="branch") from None
    return Network(buses, branches, generators, base_mva=base, name=name)


def parse_json(data: dict, name: str = "") -> Network:
    """Native JSON network; all quantities are already in per unit."""
    try:
        raw_buses = sorted(data["buses"], key=lambda b: b["id"])
        index = {int(b["id"]): k for k, b in enumerate(raw_buses)}
        buses = [
            Bus(id=index[int(b["id"])], kind=BusKind(b.get("kind", "PQ")),
                p_demand=float(b.get("pd", 0.0)), q_demand=float(b.get("qd", 0.0)),
                v_setpoint=float(b.get("vset", 1.0)))
            for b in raw_buses
        ]
        branches = [
            Branch(index[int(br["from"])], index[int(br["to"])], r=float(br.get("r", 0.0)),
                   x_nominal=float(br["x"]), b_charging=float(br.get("b", 0.0)),
                   tap=float(br.get("tap", 1.0)) or 1.0,
                   f_rating=float(br.get("rate", DEFAULT_RATE_CAP)) or DEFAULT_RATE_CAP)
            for br in data["branches"]
        ]
        generators = [
            Generator(bus=index[int(g["bus"])], p_min=float(g.get("pmin", 0.0)),
                      p_max=float(g["pmax"]), cost_quadratic=float(g.get("c2", 0.0)),
                      p_setpoint=float(g.get("pg", 0.0)))
            for g in data.get("generators", [])
        ]
    except KeyError as exc:
        raise CaseFormatError(f"missing key {exc}", field=str(exc).strip("'")) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise CaseFormatError(str(exc)) from None
    return Network(buses, branches, generators, base_mva=float(data.get("base_mva", 100.0)),
                   name=name)


def load_case(path, rate_cap: float = DEFAULT_RATE_CAP) -> Network:
    """Read a MATPOWER ``.m`` case or native ``.json`` network.

    The name ``case39`` (without a path) resolves to the bundled IEEE 39-bus case.
    """
    path = Path(path)
    if not path.exists() and path.stem == "case39" and len(path.parts) == 1:
        text = resources.files("flowctrl.data").joinpath("case39.m").read_text()
        return parse_matpower(text, rate_cap=rate_cap, name="case39")
    if not path.exists():
        raise FileNotFoundError(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseFormatError(exc.msg, line=exc.lineno) from None
        return parse_json(data, name=path.stem)
    return parse_matpower(text, rate_cap=rate_cap, name=path.stem)


def case39() -> Network:
    return load_case("case39")
