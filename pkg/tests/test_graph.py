import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from byzlearn.graph import (
    AssumptionError,
    Digraph,
    ReducedGraph,
    ResourceLimitError,
    check_identifiability,
    check_topology,
    enumerate_reduced_graphs,
    load_graph,
    min_source_kl,
    reduced_graph_count,
    sample_reduced_graph,
    sample_topology,
    source_components,
)
from byzlearn.signals import SignalModel
from oracles import naive_reduced_graphs, naive_topology, sources_by_reachability

ALL_PAIRS_4 = [(u, v) for u in range(4) for v in range(4) if u != v]


def complete_edges(n):
    return [(u, v) for u in range(n) for v in range(n) if u != v]


def bare(g):
    return ReducedGraph(g, frozenset(), tuple(frozenset() for _ in range(g.n)))


class TestDigraph:
    def test_rejects_self_loop(self):
        with pytest.raises(ValueError):
            Digraph.from_edges(3, [(1, 1)])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Digraph.from_edges(3, [(0, 3)])

    def test_json_round_trip(self, tmp_path):
        g = Digraph.from_edges(4, [(0, 1), (1, 2), (3, 0)])
        p = tmp_path / "g.json"
        p.write_text(json.dumps(g.to_dict()))
        assert load_graph(p) == g
        assert g.to_dict()["edges"] == [[1, 2], [2, 3], [4, 1]]

    def test_shorthand_specs(self):
        assert Digraph.from_dict({"complete": 4}) == Digraph.complete(4)
        assert Digraph.from_dict({"cycle": 3}).edges == {(0, 1), (1, 2), (2, 0)}

    def test_outgoing_and_connectivity(self):
        g = Digraph.cycle(3)
        assert g.outgoing(0) == (1,)
        assert g.is_strongly_connected()
        assert not Digraph.from_edges(3, [(0, 1), (1, 2)]).is_strongly_connected()


class TestEnumeration:
    def test_cycle_f0_is_itself(self):
        g = Digraph.cycle(3)
        for m in (1, 2, 5):
            graphs = list(enumerate_reduced_graphs(g, 0, m))
            assert len(graphs) == 1
            assert graphs[0].edges == g.edges and not graphs[0].faulty

    def test_single_node(self):
        graphs = list(enumerate_reduced_graphs(Digraph(1, (frozenset(),)), 0, 1))
        assert len(graphs) == 1 and graphs[0].edges == frozenset()

    def test_k4_matches_naive(self):
        g = Digraph.complete(4)
        ours = {h.key() for h in enumerate_reduced_graphs(g, 1, 1)}
        naive = {(frozenset(F), es) for F, es, _ in naive_reduced_graphs(4, complete_edges(4), 1, 1)}
        assert ours == naive
        assert len(ours) == 364 == reduced_graph_count(g, 1, 1)

    def test_no_duplicates_and_invariants(self):
        g = Digraph.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (2, 0)])
        graphs = list(enumerate_reduced_graphs(g, 1, 1))
        assert len({h.key() for h in graphs}) == len(graphs) == reduced_graph_count(g, 1, 1)
        for h in graphs:
            assert len(h.faulty) <= 1
            assert h.edges <= g.edges
            for i in h.nodes:
                assert len(h.removed[i]) <= 1

    def test_cap_reports_count(self):
        g = Digraph.complete(6)
        with pytest.raises(ResourceLimitError) as err:
            list(enumerate_reduced_graphs(g, 1, 2, cap=1000))
        assert err.value.count == reduced_graph_count(g, 1, 2) == 17_743_522

    def test_sampled_graph_is_valid(self):
        g = Digraph.complete(5)
        rng = np.random.default_rng(3)
        keys = {h.key() for h in enumerate_reduced_graphs(g, 1, 1)}
        for _ in range(50):
            assert sample_reduced_graph(g, 1, 1, rng).key() in keys


class TestSourceComponents:
    def test_cycle(self):
        sa = source_components(bare(Digraph.cycle(3)))
        assert sa.sccs == (frozenset({0, 1, 2}),)
        assert sa.sources == (frozenset({0, 1, 2}),)

    def test_two_disjoint_two_cycles(self):
        g = Digraph.from_edges(4, [(0, 1), (1, 0), (2, 3), (3, 2)])
        assert set(source_components(bare(g)).sources) == {frozenset({0, 1}), frozenset({2, 3})}

    def test_path(self):
        g = Digraph.from_edges(3, [(0, 1), (1, 2)])
        assert source_components(bare(g)).sources == (frozenset({0}),)

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_all_small_digraphs_match_reachability(self, n):
        pairs = complete_edges(n)
        for bits in range(1 << len(pairs)):
            es = [p for k, p in enumerate(pairs) if bits >> k & 1]
            sa = source_components(bare(Digraph.from_edges(n, es)))
            assert set(sa.sources) == set(sources_by_reachability(n, es, list(range(n))))
            assert sorted(v for c in sa.sccs for v in c) == list(range(n))

    @settings(max_examples=150, deadline=None)
    @given(st.sets(st.sampled_from(ALL_PAIRS_4)))
    def test_four_node_digraphs_match_reachability(self, es):
        sa = source_components(bare(Digraph.from_edges(4, es)))
        assert set(sa.sources) == set(sources_by_reachability(4, es, list(range(4))))


class TestCheckTopology:
    def test_k4_f1_m1_passes(self):
        r = check_topology(Digraph.complete(4), 1, 1)
        assert (r.assumption_holds, r.chi, r.gamma) == (True, 364, 2)
        assert r.witness is None

    def test_k5_f1_m2_fails_with_two_cycles(self):
        r = check_topology(Digraph.complete(5), 1, 2)
        assert not r.assumption_holds
        w = r.witness
        assert len(w.faulty) == 1
        sources = source_components(w).sources
        assert len(sources) == 2 and all(len(s) == 2 for s in sources)
        assert all(len(w.removed[i]) <= 2 for i in w.nodes)

    def test_k6_f1_m2_passes(self):
        r = check_topology(Digraph.complete(6), 1, 2)
        assert r.assumption_holds and r.gamma == 3 and r.chi == 17_743_522

    def test_cycle_f0(self):
        r = check_topology(Digraph.cycle(3), 0, 1)
        assert (r.assumption_holds, r.chi, r.gamma) == (True, 1, 3)
        assert r.to_dict() == {"assumption_holds": True, "chi": 1, "gamma": 3, "witness": None}

    def test_nu(self):
        r = check_topology(Digraph.complete(4), 1, 1)
        assert r.nu(1) == 364 * 3

    @settings(max_examples=60, deadline=None)
    @given(st.sets(st.sampled_from(ALL_PAIRS_4)), st.integers(0, 1), st.integers(1, 2))
    def test_matches_naive_oracle(self, es, f, m):
        ours = check_topology(Digraph.from_edges(4, es), f, m)
        holds, chi, gamma = naive_topology(4, list(es), f, m)
        assert ours.assumption_holds == holds
        assert ours.chi == chi
        if holds:
            assert ours.gamma == gamma

    @settings(max_examples=40, deadline=None)
    @given(st.sets(st.sampled_from(ALL_PAIRS_4)))
    def test_f0_is_unique_source_of_g(self, es):
        g = Digraph.from_edges(4, es)
        r = check_topology(g, 0, 1)
        assert r.chi == 1
        assert r.assumption_holds == (len(sources_by_reachability(4, es, list(range(4)))) == 1)
        if g.is_strongly_connected():
            assert r.assumption_holds and r.gamma == 4

    @settings(max_examples=40, deadline=None)
    @given(st.sets(st.sampled_from(complete_edges(5))), st.integers(1, 2))
    def test_monotone_in_f(self, es, m):
        g = Digraph.from_edges(5, es)
        results = [check_topology(g, f, m).assumption_holds for f in range(3)]
        for a, b in zip(results, results[1:]):
            assert a or not b

    def test_cap_applies(self):
        with pytest.raises(ResourceLimitError):
            check_topology(Digraph.complete(12), 2, 1, cap=100)

    def test_sampling_refutes_k5(self):
        refuted, witness = sample_topology(Digraph.complete(5), 1, 2, samples=20000, seed=1)
        # the one-sided check may miss; when it refutes the witness must be genuine
        if refuted:
            assert len(source_components(witness).sources) > 1

    def test_sampling_never_refutes_valid(self):
        refuted, _ = sample_topology(Digraph.complete(4), 1, 1, samples=500, seed=0)
        assert not refuted


def _binary(ps):
    return [[p, [1 - x for x in p]] for p in ps]


class TestIdentifiability:
    def test_informative_agents(self):
        model = SignalModel(["a", "b"], _binary([[0.3, 0.6]] * 4))
        r = check_identifiability(Digraph.complete(4), 1, 1, model, 0)
        assert r.holds and r.min_kl_sum > 0

    def test_uninformative(self):
        model = SignalModel(["a", "b", "c"], _binary([[0.3, 0.3, 0.6]] * 4))
        r = check_identifiability(Digraph.complete(4), 1, 1, model, 0)
        assert not r.holds
        worst = min(r.entries, key=lambda e: e["kl_sum"])
        assert worst["worst_theta"] == "b" and worst["kl_sum"] == 0.0

    def test_only_agent_one_informative(self):
        ps = [[0.2, 0.7]] + [[0.5, 0.5]] * 3
        model = SignalModel(["a", "b"], _binary(ps))
        r = check_identifiability(Digraph.complete(4), 1, 1, model, 0)
        assert not r.holds
        assert any(e["faulty"] == [1] and e["kl_sum"] == 0.0 for e in r.entries)

    def test_requires_topology(self):
        model = SignalModel(["a", "b"], _binary([[0.3, 0.6]] * 5))
        with pytest.raises(AssumptionError):
            check_identifiability(Digraph.complete(5), 1, 2, model, 0)

    def test_min_source_kl_matches_enumeration(self):
        # heterogeneous informativeness so the minimum sits on a specific source
        ps = [[0.2, 0.5, 0.8], [0.5, 0.5, 0.4], [0.4, 0.6, 0.6], [0.3, 0.3, 0.7]]
        model = SignalModel(["a", "b", "c"], _binary(ps))
        g = Digraph.complete(4)
        assert check_topology(g, 1, 1).assumption_holds
        from oracles import kl_fsum

        brute = np.inf
        for F, es, alive in naive_reduced_graphs(4, sorted(g.edges), 1, 1):
            (src,) = sources_by_reachability(4, es, alive)
            for a, b in itertools.permutations(range(3), 2):
                s = sum(kl_fsum(model.tables[j][:, a], model.tables[j][:, b]) for j in src)
                brute = min(brute, s)
        assert min_source_kl(g, 1, 1, model) == pytest.approx(brute, abs=1e-12)
