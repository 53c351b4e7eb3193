"""Independent reference implementations used only by the tests.

Kept deliberately naive: explicit enumeration, fsum/mpmath arithmetic,
reachability by repeated relaxation, hull membership by a separate LP.
"""

import itertools
import math

import mpmath
import numpy as np
from scipy.optimize import linprog


def reach(n, edges, nodes):
    """``r[u]`` = set of nodes reachable from ``u`` (including ``u``)."""
    out = {u: {u} for u in nodes}
    changed = True
    while changed:
        changed = False
        for u, v in edges:
            for w in nodes:
                if u in out[w] and v not in out[w]:
                    out[w].add(v)
                    changed = True
    return out


def sources_by_reachability(n, edges, nodes):
    """Source components: classes of mutual reachability no outside node reaches."""
    r = reach(n, edges, nodes)
    comps = []
    seen = set()
    for u in sorted(nodes):
        if u in seen:
            continue
        comp = frozenset(v for v in nodes if v in r[u] and u in r[v])
        seen |= comp
        comps.append(comp)
    return [c for c in comps if not any(c & r[w] for w in nodes if w not in c)]


def naive_reduced_graphs(n, edges, f, m, largest_first=False):
    """Yield ``(faulty, edge_set, alive)`` for every reduced graph, by brute force."""
    budget = m * f
    sizes = range(f, -1, -1) if largest_first else range(f + 1)
    for k in sizes:
        for faulty in itertools.combinations(range(n), k):
            alive = [i for i in range(n) if i not in faulty]
            kept = [(u, v) for u, v in edges if u in alive and v in alive]
            per_node = []
            for v in alive:
                inc = [e for e in kept if e[1] == v]
                choices = []
                for r in range(min(budget, len(inc)) + 1):
                    choices.extend(itertools.combinations(inc, r))
                per_node.append(choices)
            for removal in itertools.product(*per_node):
                gone = set().union(*map(set, removal)) if removal else set()
                yield faulty, frozenset(e for e in kept if e not in gone), alive


def naive_topology(n, edges, f, m, stop_on_failure=False):
    """``(holds, chi, gamma)`` by enumerating every reduced graph."""
    holds, chi, gamma = True, 0, n
    for faulty, es, alive in naive_reduced_graphs(n, edges, f, m, stop_on_failure):
        chi += 1
        srcs = sources_by_reachability(n, es, alive)
        if len(srcs) != 1:
            holds = False
            if stop_on_failure:
                return holds, None, None
        gamma = min(gamma, min(len(s) for s in srcs))
    return holds, chi, gamma


def kl_fsum(p, q):
    return math.fsum(a * math.log(a / b) for a, b in zip(p, q))


def kl_mp(p, q, dps=40):
    with mpmath.workdps(dps):
        return float(mpmath.fsum(mpmath.mpf(a) * mpmath.log(mpmath.mpf(a) / mpmath.mpf(b)) for a, b in zip(p, q)))


def c0_scan(tables):
    """Largest ``|log l(w|a) - log l(w|b)|`` by scanning every agent, signal and pair."""
    best = 0.0
    for t in tables:
        t = np.asarray(t)
        for w in range(t.shape[0]):
            for a in range(t.shape[1]):
                for b in range(t.shape[1]):
                    best = max(best, abs(math.log(t[w, a]) - math.log(t[w, b])))
    return best


def in_hull(points, x, tol=1e-9):
    """Hull membership as an LP feasibility problem in barycentric weights."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 1 and pts.shape[1] != np.size(x):
        pts = pts.T
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k, d = pts.shape
    # minimise total slack s+ + s- subject to sum w p + s+ - s- = x, sum w = 1
    a_eq = np.zeros((d + 1, k + 2 * d))
    a_eq[:d, :k] = pts.T
    a_eq[:d, k:k + d] = np.eye(d)
    a_eq[:d, k + d:] = -np.eye(d)
    a_eq[d, :k] = 1.0
    b_eq = np.append(x, 1.0)
    c = np.concatenate([np.zeros(k), np.ones(2 * d)])
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=[(0, None)] * (k + 2 * d), method="highs")
    return res.status == 0 and res.fun <= tol
