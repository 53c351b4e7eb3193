"""Directed networks, reduced graphs and the topology/identifiability checks.

Agents are labelled ``0..n-1`` internally.  The JSON graph format uses
1-based labels; :func:`load_graph` and :meth:`Digraph.to_dict` convert.

A *reduced graph* removes a candidate faulty set ``F`` (``|F| <= f``) and then
up to ``m*f`` further incoming links at every remaining node.  Brute-force
enumeration is exponential, so :func:`check_topology` works with
*isolatable sets* instead: a set ``S`` of non-faulty nodes is isolatable
under ``F`` when every member has at most ``m*f`` in-neighbours in
``V \\ F \\ S``.  Some reduced graph has two source components iff two
disjoint isolatable sets exist for the same ``F``, and the smallest source
component over all reduced graphs is the smallest isolatable set.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import networkx as nx
import numpy as np

DEFAULT_ENUMERATION_CAP = 10**7
DEFAULT_KL_TOLERANCE = 1e-12


class ResourceLimitError(RuntimeError):
    """Raised when an exhaustive enumeration would exceed its cap."""

    def __init__(self, count: int, cap: int, what: str, formula: str):
        self.count = count
        self.cap = cap
        super().__init__(
            f"{what}: {count} items exceeds cap {cap} ({formula}); "
            "use sampling mode for a one-sided check"
        )


class AssumptionError(ValueError):
    """A precondition on the network topology does not hold."""


@dataclass(frozen=True)
class Digraph:
    """Directed graph given by per-node incoming-neighbour sets."""

    n: int
    incoming: tuple[frozenset[int], ...]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        if len(self.incoming) != self.n:
            raise ValueError("incoming must have one entry per node")
        for i, nbrs in enumerate(self.incoming):
            for j in nbrs:
                if not 0 <= j < self.n:
                    raise ValueError(f"edge ({j}, {i}) has endpoint out of range")
                if j == i:
                    raise ValueError(f"self-loop at node {i}")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "Digraph":
        inc: list[set[int]] = [set() for _ in range(n)]
        for u, v in edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) has endpoint out of range")
            inc[v].add(u)
        return cls(n, tuple(frozenset(s) for s in inc))

    @classmethod
    def complete(cls, n: int) -> "Digraph":
        return cls(n, tuple(frozenset(j for j in range(n) if j != i) for i in range(n)))

    @classmethod
    def cycle(cls, n: int) -> "Digraph":
        return cls.from_edges(n, [(i, (i + 1) % n) for i in range(n)] if n > 1 else [])

    @classmethod
    def from_dict(cls, data: dict) -> "Digraph":
        """Build from ``{"n": ..., "edges": [[from, to], ...]}`` (1-based)."""
        if "complete" in data:
            return cls.complete(int(data["complete"]))
        if "cycle" in data:
            return cls.cycle(int(data["cycle"]))
        n = int(data["n"])
        return cls.from_edges(n, [(int(u) - 1, int(v) - 1) for u, v in data.get("edges", [])])

    def to_dict(self) -> dict:
        return {"n": self.n, "edges": [[u + 1, v + 1] for u, v in sorted(self.edges)]}

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        return frozenset((j, i) for i in range(self.n) for j in self.incoming[i])

    def outgoing(self, j: int) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if j in self.incoming[i])

    def in_masks(self) -> list[int]:
        return [sum(1 << j for j in nbrs) for nbrs in self.incoming]

    def is_strongly_connected(self) -> bool:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return nx.is_strongly_connected(g)


def load_graph(path: str | Path) -> Digraph:
    with open(path) as fh:
        return Digraph.from_dict(json.load(fh))


@dataclass(frozen=True)
class ReducedGraph:
    """A reduced graph: ``base`` minus ``faulty`` minus ``removed[i]`` links into ``i``."""

    base: Digraph
    faulty: frozenset[int]
    removed: tuple[frozenset[int], ...]

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.base.n) if i not in self.faulty)

    def effective_incoming(self, i: int) -> frozenset[int]:
        if i in self.faulty:
            return frozenset()
        return self.base.incoming[i] - self.faulty - self.removed[i]

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        return frozenset((j, i) for i in self.nodes for j in self.effective_incoming(i))

    def key(self) -> tuple[frozenset[int], frozenset[tuple[int, int]]]:
        return self.faulty, self.edges

    def to_dict(self) -> dict:
        return {
            "faulty": sorted(i + 1 for i in self.faulty),
            "removed": [[j + 1, i + 1] for i in self.nodes for j in sorted(self.removed[i])],
            "edges": [[u + 1, v + 1] for u, v in sorted(self.edges)],
        }


@dataclass(frozen=True)
class SourceAnalysis:
    sccs: tuple[frozenset[int], ...]
    sources: tuple[frozenset[int], ...]


@dataclass
class TopologyReport:
    assumption_holds: bool
    chi: int
    gamma: int
    witness: ReducedGraph | None = None
    n: int = 0

    def nu(self, phi: int) -> int:
        """``chi * (n - phi)`` for an execution with ``phi`` faulty agents."""
        return self.chi * (self.n - phi)

    def to_dict(self) -> dict:
        return {
            "assumption_holds": self.assumption_holds,
            "chi": self.chi,
            "gamma": self.gamma,
            "witness": None if self.witness is None else self.witness.to_dict(),
        }


@dataclass
class IdentifiabilityReport:
    """Worst-case KL sums over the source components that can occur.

    ``entries`` holds one row per (faulty set, minimal source set, true
    hypothesis) with the smallest KL sum over wrong hypotheses.
    """

    holds: bool
    min_kl_sum: float
    entries: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"holds": self.holds, "min_kl_sum": self.min_kl_sum, "entries": self.entries}


def _faulty_sets(n: int, f: int) -> Iterator[tuple[int, ...]]:
    for size in range(min(f, n) + 1):
        yield from itertools.combinations(range(n), size)


def reduced_graph_count(g: Digraph, f: int, m: int) -> int:
    """Exact number of distinct labelled reduced graphs."""
    budget = m * f
    total = 0
    for fs in _faulty_sets(g.n, f):
        fset = set(fs)
        prod = 1
        for i in range(g.n):
            if i in fset:
                continue
            d = len(g.incoming[i] - fset)
            prod *= sum(math.comb(d, k) for k in range(min(budget, d) + 1))
        total += prod
    return total


def enumerate_reduced_graphs(
    g: Digraph, f: int, m: int, cap: int = DEFAULT_ENUMERATION_CAP
) -> Iterator[ReducedGraph]:
    """Yield every distinct m-dimensional reduced graph of ``g``.

    Distinct removal choices under a fixed faulty set give distinct edge
    sets, and distinct faulty sets give distinct labelled graphs, so the
    stream is duplicate-free without bookkeeping.

    Raises:
        ResourceLimitError: if the exact count exceeds ``cap``.
    """
    if f < 0 or m < 1:
        raise ValueError("need f >= 0 and m >= 1")
    count = reduced_graph_count(g, f, m)
    if count > cap:
        raise ResourceLimitError(
            count, cap, "reduced-graph enumeration",
            "sum over F of prod over i of sum_{k<=mf} C(|I_i \\ F|, k)",
        )
    return _enumerate(g, f, m)


def _enumerate(g: Digraph, f: int, m: int) -> Iterator[ReducedGraph]:
    budget = m * f
    for fs in _faulty_sets(g.n, f):
        fset = frozenset(fs)
        choices = []
        for i in range(g.n):
            if i in fset:
                choices.append([frozenset()])
                continue
            avail = sorted(g.incoming[i] - fset)
            opts = []
            for k in range(min(budget, len(avail)) + 1):
                opts.extend(frozenset(c) for c in itertools.combinations(avail, k))
            choices.append(opts)
        for removed in itertools.product(*choices):
            yield ReducedGraph(g, fset, tuple(removed))


def sample_reduced_graph(g: Digraph, f: int, m: int, rng: np.random.Generator) -> ReducedGraph:
    """Draw one reduced graph, favouring maximal removals."""
    size = int(rng.integers(0, min(f, g.n - 1) + 1))
    fset = frozenset(int(x) for x in rng.choice(g.n, size=size, replace=False))
    removed = []
    for i in range(g.n):
        if i in fset:
            removed.append(frozenset())
            continue
        avail = sorted(g.incoming[i] - fset)
        k = min(m * f, len(avail))
        if k and rng.random() < 0.2:
            k = int(rng.integers(0, k + 1))
        removed.append(frozenset(int(x) for x in rng.choice(avail, size=k, replace=False)) if k else frozenset())
    return ReducedGraph(g, fset, tuple(removed))


def source_components(h: ReducedGraph) -> SourceAnalysis:
    dg = nx.DiGraph()
    dg.add_nodes_from(h.nodes)
    dg.add_edges_from(h.edges)
    sccs = [frozenset(c) for c in nx.strongly_connected_components(dg)]
    sccs.sort(key=min)
    owner = {v: k for k, c in enumerate(sccs) for v in c}
    has_in = [False] * len(sccs)
    for u, v in dg.edges:
        if owner[u] != owner[v]:
            has_in[owner[v]] = True
    return SourceAnalysis(tuple(sccs), tuple(c for c, hit in zip(sccs, has_in) if not hit))


def _isolatable_masks(in_masks: Sequence[int], n: int, fmask: int, budget: int) -> list[bool]:
    """``iso[S]`` for every subset ``S`` of the non-faulty nodes (indexed by full mask)."""
    full = (1 << n) - 1
    alive = full & ~fmask
    iso = [False] * (1 << n)
    sub = alive
    while sub:
        outside = alive & ~sub
        ok = True
        rest = sub
        while rest:
            low = rest & -rest
            i = low.bit_length() - 1
            if (in_masks[i] & outside).bit_count() > budget:
                ok = False
                break
            rest ^= low
        iso[sub] = ok
        sub = (sub - 1) & alive
    return iso


def _minimal_isolatable(g: Digraph, f: int, m: int, cap: int) -> Iterator[tuple[int, list[bool]]]:
    work = sum(math.comb(g.n, k) * 2 ** (g.n - k) for k in range(min(f, g.n) + 1))
    if work > cap:
        raise ResourceLimitError(
            work, cap, "isolatable-set scan", "sum_{k<=f} C(n,k) * 2^(n-k)"
        )
    in_masks = g.in_masks()
    for fs in _faulty_sets(g.n, f):
        fmask = sum(1 << i for i in fs)
        if fmask == (1 << g.n) - 1:
            continue
        iso = _isolatable_masks(in_masks, g.n, fmask, m * f)
        yield fmask, iso, _any_subset(iso, g.n, fmask)


def _any_subset(iso: list[bool], n: int, fmask: int) -> list[bool]:
    """``out[S]``: some nonempty isolatable subset of ``S`` exists."""
    out = iso[:]
    for b in range(n):
        bit = 1 << b
        if fmask & bit:
            continue
        for s in range(1 << n):
            if s & bit and not out[s] and out[s ^ bit]:
                out[s] = True
    return out


def _isolating_graph(g: Digraph, fmask: int, parts: Sequence[int]) -> ReducedGraph:
    fset = frozenset(i for i in range(g.n) if fmask >> i & 1)
    alive = [i for i in range(g.n) if i not in fset]
    removed = [frozenset()] * g.n
    for part in parts:
        for i in alive:
            if part >> i & 1:
                removed[i] = frozenset(
                    j for j in g.incoming[i] if j not in fset and not part >> j & 1
                )
    return ReducedGraph(g, fset, tuple(removed))


def check_topology(
    g: Digraph, f: int, m: int, cap: int = DEFAULT_ENUMERATION_CAP
) -> TopologyReport:
    """Decide whether every m-dimensional reduced graph has a unique source.

    Exact; cost is ``sum_{k<=f} C(n,k) 2^(n-k)`` subset checks, independent
    of how many reduced graphs there are.
    """
    if f < 0 or m < 1:
        raise ValueError("need f >= 0 and m >= 1")
    n = g.n
    gamma = n
    witness = None
    for fmask, iso, any_iso in _minimal_isolatable(g, f, m, cap):
        alive = ((1 << n) - 1) & ~fmask
        sub = alive
        while sub:
            if iso[sub]:
                gamma = min(gamma, sub.bit_count())
                if witness is None and any_iso[alive & ~sub]:
                    other = _smallest_isolatable_within(iso, alive & ~sub)
                    witness = _isolating_graph(g, fmask, [sub, other])
            sub = (sub - 1) & alive
    return TopologyReport(
        assumption_holds=witness is None,
        chi=reduced_graph_count(g, f, m),
        gamma=gamma,
        witness=witness,
        n=n,
    )


def _smallest_isolatable_within(iso: list[bool], mask: int) -> int:
    best = 0
    sub = mask
    while sub:
        if iso[sub] and (best == 0 or sub.bit_count() < best.bit_count()):
            best = sub
        sub = (sub - 1) & mask
    return best


def sample_topology(
    g: Digraph, f: int, m: int, samples: int, seed: int = 0
) -> tuple[bool, ReducedGraph | None]:
    """One-sided randomized check: ``(refuted, witness)``.

    A ``False`` result certifies nothing; it only means no sampled reduced
    graph had more than one source component.
    """
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        h = sample_reduced_graph(g, f, m, rng)
        if len(source_components(h).sources) != 1:
            return True, h
    return False, None


def _kl_matrix(model) -> np.ndarray:
    """``kl[i, a, b] = D(l_i(.|a) || l_i(.|b))``."""
    from .signals import kl_divergence

    k = model.m
    out = np.zeros((model.n, k, k))
    for i in range(model.n):
        for a in range(k):
            for b in range(k):
                if a != b:
                    out[i, a, b] = kl_divergence(model, i, a, b)
    return out


def _source_kl_sums(g: Digraph, f: int, m: int, model, cap: int):
    """Yield ``(faulty mask, source mask, kl_sum[a, b])`` for minimal isolatable sets."""
    if model.n != g.n:
        raise ValueError(f"model has {model.n} agents but graph has {g.n}")
    report = check_topology(g, f, m, cap)
    if not report.assumption_holds:
        raise AssumptionError(
            "some reduced graph has more than one source component: "
            + json.dumps(report.witness.to_dict())
        )
    kl = _kl_matrix(model)
    seen = set()
    for fmask, iso, any_iso in _minimal_isolatable(g, f, m, cap):
        alive = ((1 << g.n) - 1) & ~fmask
        sub = alive
        while sub:
            if iso[sub] and sub not in seen:
                # supersets of an isolatable set only add nonnegative KL terms
                minimal = not any(
                    any_iso[sub ^ (1 << i)] for i in range(g.n) if sub >> i & 1
                )
                if minimal:
                    seen.add(sub)
                    members = [i for i in range(g.n) if sub >> i & 1]
                    yield fmask, sub, kl[members].sum(axis=0)
            sub = (sub - 1) & alive


def check_identifiability(
    g: Digraph,
    f: int,
    m: int,
    model,
    theta_star: int | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
    tol: float = DEFAULT_KL_TOLERANCE,
) -> IdentifiabilityReport:
    """Check that every possible source component can tell ``theta_star`` apart.

    With ``theta_star=None`` the check runs for every choice of true
    hypothesis.

    Raises:
        AssumptionError: if some reduced graph lacks a unique source.
    """
    stars = range(model.m) if theta_star is None else [theta_star]
    entries = []
    worst = math.inf
    for fmask, sub, sums in _source_kl_sums(g, f, m, model, cap):
        for a in stars:
            row = [(sums[a, b], b) for b in range(model.m) if b != a]
            value, b = min(row)
            worst = min(worst, value)
            entries.append({
                "faulty": [i + 1 for i in range(g.n) if fmask >> i & 1],
                "source": [i + 1 for i in range(g.n) if sub >> i & 1],
                "theta_star": model.labels[a],
                "worst_theta": model.labels[b],
                "kl_sum": float(value),
            })
    return IdentifiabilityReport(holds=bool(worst > tol), min_kl_sum=float(worst), entries=entries)


def min_source_kl(g: Digraph, f: int, m: int, model, cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """Minimum over reachable source components and ordered pairs of the KL sum."""
    worst = math.inf
    for _, _, sums in _source_kl_sums(g, f, m, model, cap):
        off = sums + np.diag(np.full(model.m, np.inf))
        worst = min(worst, float(off.min()))
    return worst
