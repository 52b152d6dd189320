from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from bionas import analysis as An
from bionas.models import MLP, SmallConvNet
from bionas.rules import FeedbackRule
from bionas.supernet import Genotype
from bionas.tensor import RngStream
from fixtures import DESK_GENOTYPE_DICT

G = Genotype.from_dict(DESK_GENOTYPE_DICT)


def feed(batches):
    t = An.GradVarianceTracker()
    for b in batches:
        t.on_batch(b)
    return t.on_epoch_end(0)


class TestGradVariance:
    def test_constant_gradient(self):
        g = [np.arange(6.0).reshape(2, 3), np.ones(4)]
        assert feed([g] * 7) == 0.0

    def test_two_point(self):
        # values g and -g: per-parameter variance g^2, averaged over parameters
        g = np.array([1.0, 2.0, 3.0])
        assert feed([[g], [-g]]) == pytest.approx(np.mean(g ** 2), rel=1e-15)

    @given(st.integers(2, 30), st.integers(1, 40), st.integers(0, 10_000))
    def test_matches_two_pass(self, nb, d, seed):
        rng = np.random.default_rng(seed)
        batches = [[rng.normal(size=d) * 3 + 100, rng.normal(size=(2, 2))] for _ in range(nb)]
        assert abs(feed(batches) - An.two_pass_variance(batches)) <= 1e-10

    def test_order_invariant(self):
        rng = np.random.default_rng(4)
        batches = [[rng.normal(size=10)] for _ in range(20)]
        assert feed(batches) == pytest.approx(feed(batches[::-1]), rel=1e-12)

    def test_epoch_reset_and_csv(self, tmp_path):
        t = An.GradVarianceTracker()
        for e, scale in enumerate((1.0, 2.0)):
            t.on_batch([np.full(3, scale)])
            t.on_batch([np.full(3, -scale)])
            t.on_epoch_end(e)
        t.write_csv(tmp_path / "gv.csv")
        assert An.read_gradvar_csv(tmp_path / "gv.csv") == [(0, 1.0), (1, 4.0)]
        assert (tmp_path / "gv.csv").read_text().startswith("# variance")

    def test_empty_epoch_is_nan(self):
        assert np.isnan(An.GradVarianceTracker().on_epoch_end(0))

    def test_shape_change_rejected(self):
        t = An.GradVarianceTracker()
        t.on_batch([np.zeros(3)])
        with pytest.raises(ValueError):
            t.on_batch([np.zeros(4)])


class TestWeightStats:
    def test_gaussian_kurtosis(self):
        w = RngStream(0, 1).normal(size=1_000_000) * 0.3
        ws = An.weight_stats(w)
        assert abs(ws.excess_kurtosis) <= 0.05
        assert ws.dev_gaussian < ws.dev_student_t

    def test_student_t_kurtosis(self):
        # t with 10 degrees of freedom has excess kurtosis 6 / (10 - 4) = 1
        w = stats.t.rvs(df=10, size=1_000_000, random_state=np.random.default_rng(1)) * 0.2
        assert An.weight_stats(w).excess_kurtosis == pytest.approx(1.0, abs=0.1)

    def test_constant(self):
        ws = An.weight_stats(np.full(50, 0.3))
        assert ws.variance == 0.0 and np.count_nonzero(ws.mass) == 1 and ws.mass.sum() == 1.0

    @given(st.floats(0.05, 5.0), st.integers(0, 1000))
    def test_mass_sums_to_one(self, scale, seed):
        ws = An.weight_stats(np.random.default_rng(seed).normal(size=500) * scale)
        assert ws.mass.sum() + ws.tail_mass == pytest.approx(1.0, abs=1e-12)

    def test_pooled_weights_counts_kernels_only(self):
        m = SmallConvNet(3, 4, 6, 3)
        assert An.pooled_weights(m).size == 3 * 4 * 9 + 4 * 6 * 9 + 6 * 3

    def test_write(self, tmp_path):
        ws = An.weight_distribution(SmallConvNet(3, 4, 6, 3))
        An.write_weight_stats(ws, tmp_path / "h.csv", tmp_path / "s.json")
        assert len((tmp_path / "h.csv").read_text().splitlines()) == 81
        assert "excess_kurtosis" in (tmp_path / "s.json").read_text()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            An.weight_stats(np.zeros(0))


def rules_of(g):
    return [p.rule for _, p in g.normal + g.reduce]


class TestReassign:
    @pytest.mark.parametrize("seed", range(10))
    def test_shuffle_preserves_multiset_and_topology(self, seed):
        g2 = An.reassign_rules(G, RngStream(seed, (17, 0)), "shuffle")
        assert Counter(rules_of(g2)) == Counter(rules_of(G))
        assert An.same_topology(g2, G)
        for _, p in g2.normal + g2.reduce:
            assert p.rule in An._admissible(p.op, "strict")

    def test_resample_identity_for_single_rule_ops(self):
        g = Genotype.from_dict({"version": 1, "normal": [[0, "max_pool_3x3", "none"], [1, "avg_pool_3x3", "none"]],
                                "reduce": [[0, "avg_pool_3x3", "none"], [1, "max_pool_3x3", "none"]]})
        assert An.reassign_rules(g, RngStream(0, 0), "resample") == g

    def test_resample_uniform(self):
        rng = RngStream(0, (17, 0))
        counts = Counter(An.reassign_rules(G, rng, "resample").normal[0][1].rule for _ in range(1000))
        # sep_conv_3x3 admits four rules in the strict space
        assert set(counts) == {FeedbackRule.FA, FeedbackRule.USF, FeedbackRule.BRSF, FeedbackRule.FRSF}
        sigma = np.sqrt(1000 * 0.25 * 0.75)
        assert all(abs(c - 250) <= 3 * sigma for c in counts.values())

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            An.reassign_rules(G, RngStream(0, 0), "swap")

    def test_single_rule_variant(self):
        g = An.single_rule_variant(G, "fa")
        assert An.same_topology(g, G)
        assert {p.rule for _, p in g.normal + g.reduce} == {FeedbackRule.FA, FeedbackRule.NONE}


@pytest.mark.parametrize("seed", range(3))
def test_mixed_update_decomposition(seed):
    m = MLP([6, 8, 8, 8, 3], ["usf", "fa", "frsf", "brsf"], seed=seed)
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(5, 6)), rng.integers(0, 3, size=5)
    assert An.mixed_update_decomposition(m, x, y) <= 1e-12


def test_summarize():
    s = An.summarize([0.5, 0.7, 0.9])
    assert s["mean"] == pytest.approx(0.7) and s["spread"] == pytest.approx(0.4) and s["n"] == 3


def test_audit_mode_records_gap():
    t = An.GradVarianceTracker(audit=True)
    rng = np.random.default_rng(0)
    for _ in range(3):
        for _ in range(5):
            t.on_batch([rng.normal(size=7) + 1e3])
        t.on_epoch_end(0)
    assert 0.0 <= t.audit_error <= 1e-10 and t._batches == []
