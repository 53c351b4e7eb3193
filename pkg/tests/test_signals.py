import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from byzlearn.graph import AssumptionError, Digraph
from byzlearn.signals import (
    CumulativeLogLikelihood,
    HypothesisSet,
    ModelError,
    SignalModel,
    c0,
    c1,
    cumulative_from_history,
    expected_log_ratio,
    kl_divergence,
    load_model,
    sample_signal,
    sample_signals,
)
from oracles import c0_scan, kl_fsum, kl_mp

# frozen from oracles.kl_mp at 40 digits
KL_HALF_QUARTER = 0.14384103622589045
KL_NINE_TENTHS = 1.7577796618689758


def two_column(p, q):
    return SignalModel(["t1", "t2"], [np.column_stack([p, q])])


probs = st.lists(st.floats(0.05, 1.0), min_size=2, max_size=5).map(lambda v: np.array(v) / sum(v))


class TestModel:
    def test_needs_two_hypotheses(self):
        with pytest.raises(ModelError):
            HypothesisSet(("only",))

    def test_distinct_labels(self):
        with pytest.raises(ModelError):
            HypothesisSet(("a", "a"))

    def test_rejects_unnormalized(self):
        with pytest.raises(ModelError, match="sum"):
            SignalModel(["a", "b"], [[[0.5, 0.5], [0.6, 0.5]]])

    def test_rejects_tiny_entries(self):
        with pytest.raises(ModelError, match="support"):
            SignalModel(["a", "b"], [[[1 - 1e-12, 0.5], [1e-12, 0.5]]])

    def test_tables_are_read_only(self):
        model = two_column([0.5, 0.5], [0.25, 0.75])
        with pytest.raises(ValueError):
            model.tables[0][0, 0] = 0.1

    def test_json_round_trip(self, tmp_path):
        import json

        model = SignalModel(["x", "y", "z"], [[[0.2, 0.3, 0.5], [0.8, 0.7, 0.5]]] * 2)
        p = tmp_path / "m.json"
        p.write_text(json.dumps(model.to_dict()))
        back = load_model(p)
        assert back.labels == model.labels
        assert all(np.array_equal(a, b) for a, b in zip(back.tables, model.tables))

    def test_signal_count_mismatch(self):
        with pytest.raises(ModelError, match="declares"):
            SignalModel.from_dict({"hypotheses": ["a", "b"],
                                   "agents": [{"signals": 3, "likelihoods": [[0.5, 0.5], [0.5, 0.5]]}]})


class TestKL:
    def test_identical_columns(self):
        assert kl_divergence(two_column([0.3, 0.7], [0.3, 0.7]), 0, 0, 1) == 0.0

    @pytest.mark.parametrize("p,q,expected", [
        ([0.5, 0.5], [0.25, 0.75], KL_HALF_QUARTER),
        ([0.9, 0.1], [0.1, 0.9], KL_NINE_TENTHS),
    ])
    def test_examples(self, p, q, expected):
        assert kl_divergence(two_column(p, q), 0, 0, 1) == pytest.approx(expected, abs=1e-12)
        assert kl_mp(p, q) == pytest.approx(expected, abs=1e-15)

    def test_closed_forms(self):
        assert KL_HALF_QUARTER == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-15)
        assert KL_NINE_TENTHS == pytest.approx(0.8 * math.log(9), abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda k: st.tuples(
        st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k),
        st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k))))
    def test_nonnegative_and_matches_fsum(self, pq):
        p = np.array(pq[0]) / sum(pq[0])
        q = np.array(pq[1]) / sum(pq[1])
        model = two_column(p, q)
        d = kl_divergence(model, 0, 0, 1)
        assert d >= -1e-15
        assert d == pytest.approx(kl_fsum(p, q), abs=1e-12)

    def test_expected_log_ratio_is_minus_kl(self):
        model = SignalModel(["a", "b", "c"], [[[0.2, 0.5, 0.6], [0.3, 0.25, 0.1], [0.5, 0.25, 0.3]]])
        for th in (1, 2):
            assert expected_log_ratio(model, 0, th, 0) == pytest.approx(-kl_divergence(model, 0, 0, th))
            assert expected_log_ratio(model, 0, th, 0) <= 0


class TestSampling:
    def test_near_point_mass(self):
        model = two_column([0.999999, 1e-6], [0.5, 0.5])
        draws = sample_signals(model, 0, 0, np.random.default_rng(0), 10_000)
        assert np.mean(draws == 0) >= 0.999

    def test_uniform_four(self):
        model = SignalModel(["a", "b"], [np.full((4, 2), 0.25)])
        draws = sample_signals(model, 0, 1, np.random.default_rng(1), 100_000)
        freq = np.bincount(draws, minlength=4) / draws.size
        assert np.all(np.abs(freq - 0.25) <= 0.02)

    def test_deterministic(self):
        model = two_column([0.3, 0.7], [0.6, 0.4])
        a = [sample_signal(model, 0, 0, rng) for rng in [np.random.default_rng(5)] for _ in range(50)]
        b = [sample_signal(model, 0, 0, rng) for rng in [np.random.default_rng(5)] for _ in range(50)]
        assert a == b

    def test_block_equals_sequential(self):
        model = SignalModel(["a", "b"], [[[0.2, 0.5], [0.3, 0.25], [0.5, 0.25]]])
        rng1, rng2 = np.random.default_rng(9), np.random.default_rng(9)
        block = sample_signals(model, 0, 0, rng1, 200)
        seq = [sample_signal(model, 0, 0, rng2) for _ in range(200)]
        assert block.tolist() == seq


class TestConstants:
    def test_c0_identical_columns(self):
        assert c0(two_column([0.3, 0.7], [0.3, 0.7])) == 0.0

    def test_c0_two_agents_ratio_nine(self):
        model = SignalModel(["a", "b"], [[[0.9, 0.1], [0.1, 0.9]], [[0.6, 0.5], [0.4, 0.5]]])
        assert c0(model) == pytest.approx(math.log(9), abs=1e-12)
        assert c0_scan(model.tables) == pytest.approx(math.log(9), abs=1e-12)

    def test_c0_half_quarter_is_ln2(self):
        # per-signal ratios are 0.5/0.25 and 0.5/0.75
        model = two_column([0.5, 0.5], [0.25, 0.75])
        assert c0(model) == pytest.approx(c0_scan(model.tables), abs=1e-15)
        assert c0(model) == pytest.approx(math.log(2), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 0.99), min_size=3, max_size=3), st.lists(st.floats(0.01, 0.99), min_size=3, max_size=3))
    def test_c0_matches_scan(self, ps, qs):
        tables = [np.array([[p, q], [1 - p, 1 - q]]) for p, q in zip(ps, qs)]
        assert c0(SignalModel(["a", "b"], tables)) == pytest.approx(c0_scan(tables), abs=1e-12)

    def test_c1_f0_is_network_sum(self):
        ps = [[0.3, 0.5, 0.7], [0.6, 0.4, 0.2], [0.5, 0.25, 0.75]]
        model = SignalModel(["a", "b", "c"], [[p, [1 - x for x in p]] for p in ps])
        expected = min(
            sum(kl_fsum(model.tables[i][:, a], model.tables[i][:, b]) for i in range(3))
            for a in range(3) for b in range(3) if a != b
        )
        assert c1(model, Digraph.cycle(3), 0, 1) == pytest.approx(expected, abs=1e-12)

    def test_c1_zero_pair(self):
        model = SignalModel(["a", "b"], [[[0.4, 0.4], [0.6, 0.6]]] * 3)
        assert c1(model, Digraph.complete(3), 0, 1) == 0.0

    def test_c1_positive_despite_uninformative_agent(self):
        # agent 4 cannot tell a from b, but every source on K4 (f=1, m=1) has >= 2 agents
        ps = [[0.2, 0.6], [0.3, 0.7], [0.4, 0.8], [0.5, 0.5]]
        model = SignalModel(["a", "b"], [[p, [1 - x for x in p]] for p in ps])
        value = c1(model, Digraph.complete(4), 1, 1)
        kls = [kl_fsum(model.tables[i][:, 0], model.tables[i][:, 1]) for i in range(3)]
        kls_rev = [kl_fsum(model.tables[i][:, 1], model.tables[i][:, 0]) for i in range(3)]
        # smallest 2-set of informative agents, or an informative agent paired with agent 4
        assert value == pytest.approx(min(min(kls), min(kls_rev)), abs=1e-12)
        assert value > 0

    def test_c1_requires_topology(self):
        model = SignalModel(["a", "b"], [[[0.4, 0.5], [0.6, 0.5]]] * 5)
        with pytest.raises(AssumptionError):
            c1(model, Digraph.complete(5), 1, 2)


class TestCumulative:
    def test_incremental_matches_batch(self):
        model = SignalModel(["a", "b", "c"], [[[0.2, 0.5, 0.6], [0.3, 0.25, 0.1], [0.5, 0.25, 0.3]]])
        sig = sample_signals(model, 0, 0, np.random.default_rng(2), 1000)
        cum = CumulativeLogLikelihood.zeros(3)
        for s in sig:
            cum = cum.update(model, 0, int(s))
        assert cum.t == 1000
        assert np.allclose(cum.values, cumulative_from_history(model, 0, sig), atol=1e-10)
        assert cum.log_ratio(0, 1) == pytest.approx(cum.values[0] - cum.values[1])

    def test_update_is_pure(self):
        model = two_column([0.3, 0.7], [0.6, 0.4])
        cum = CumulativeLogLikelihood.zeros(2)
        cum.update(model, 0, 1)
        assert cum.t == 0 and np.all(cum.values == 0)
