"""Random network construction for property tests."""

import numpy as np

from flowctrl.netmodel import Branch, Bus, BusKind, Generator, Network


def make_network(n, edges, x=None, slack=0, rate=10.0, r=None, gens=None, loads=None):
    """Network from an edge list; bus ``slack`` hosts the slack generator."""
    x = np.ones(len(edges)) if x is None else np.asarray(x, dtype=float)
    r = np.zeros(len(edges)) if r is None else np.asarray(r, dtype=float)
    loads = np.zeros(n) if loads is None else np.asarray(loads, dtype=float)
    gens = gens or [(slack, 0.0, 10.0, 1.0)]
    gen_buses = {g[0] for g in gens}
    buses = []
    for k in range(n):
        kind = BusKind.SLACK if k == slack else (BusKind.PV if k in gen_buses else BusKind.PQ)
        buses.append(Bus(k, kind, p_demand=float(loads[k]), q_demand=0.0))
    branches = [Branch(int(a), int(b), r=float(r[i]), x_nominal=float(x[i]), b_charging=0.0,
                       tap=1.0, f_rating=rate) for i, (a, b) in enumerate(edges)]
    generators = [Generator(int(b), float(lo), float(hi), float(c)) for b, lo, hi, c in gens]
    return Network(buses, branches, generators, base_mva=100.0)


def triangle(x=(1.0, 1.0, 1.0)):
    return make_network(3, [(0, 1), (1, 2), (2, 0)], x=x)


def random_edges(rng, n, extra, parallel=False):
    """Random spanning tree on ``n`` buses plus ``extra`` additional edges, random orientation."""
    order = rng.permutation(n)
    edges = []
    for k in range(1, n):
        a, b = int(order[k]), int(order[rng.integers(k)])
        edges.append((a, b) if rng.random() < 0.5 else (b, a))
    seen = {frozenset(e) for e in edges}
    tries = 0
    while extra > 0 and tries < 100:
        tries += 1
        a, b = (int(v) for v in rng.choice(n, size=2, replace=False))
        if not parallel and frozenset((a, b)) in seen:
            continue
        seen.add(frozenset((a, b)))
        edges.append((a, b))
        extra -= 1
    rng.shuffle(edges)
    return [tuple(e) for e in edges]


def random_network(rng, n_min=3, n_max=8, extra_max=4, e_max=None, ac=False):
    n = int(rng.integers(n_min, n_max + 1))
    extra = int(rng.integers(0, extra_max + 1))
    if e_max is not None:
        extra = min(extra, e_max - (n - 1))
    edges = random_edges(rng, n, extra)
    x = rng.uniform(0.05, 0.5, len(edges))
    r = rng.uniform(0.0, 0.3, len(edges)) * x if ac else None
    slack = int(rng.integers(n))
    loads = np.zeros(n)
    if ac:
        loads = rng.uniform(0.0, 0.3, n)
        loads[slack] = 0.0
    return make_network(n, edges, x=x, slack=slack, r=r, loads=loads)


def balanced_injection(rng, net, scale=1.0):
    p = rng.normal(size=net.n_bus) * scale
    return p - p.mean()
