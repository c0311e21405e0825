import numpy as np
import pytest

from cspn import circuit as cc
from cspn import data as dio
from cspn import leaves as lv
from cspn import learn as ln


def blobs(rng, n=200, gap=6.0, d=2):
    """Two boxes of half-width 1 whose centers differ by ``gap`` in every coordinate."""
    z = rng.integers(0, 2, n)
    x = rng.uniform(-1, 1, size=(n, d)) + gap * z[:, None]
    return x, z


def same_partition(a, b):
    return len(set(zip(a.tolist(), b.tolist()))) == len(set(a.tolist())) == len(set(b.tolist()))


def root_partition(c):
    root = c.nodes[c.root]
    if root.kind != cc.PRODUCT:
        return None
    return sorted(list(c.nodes[ch].scope) for ch in root.children)


def train_cll(c, data):
    return np.sum(cc.log_density(c, data.y, data.x))


class TestParams:
    @pytest.mark.parametrize("kw", [{"K": 1}, {"min_instances": 3}, {"alpha": 0.0}, {"alpha": 1.0}, {"cluster_method": "em"}, {"min_frac": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ln.LearnParams(**kw)


class TestSplitInstances:
    def test_blobs_recovered_every_seed(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x, z = blobs(rng)
            assign = ln.split_instances(x, 2, "kmeans", seed)
            assert same_partition(assign.labels, z)

    def test_identical_rows_give_one_cluster(self):
        x = np.ones((20, 3))
        assert ln.split_instances(x, 2, "kmeans", 0).num_clusters == 1
        assert ln.split_instances(x, 2, "random_split", 0).num_clusters == 1

    def test_random_split_deterministic_and_balanced(self):
        x = np.random.default_rng(0).normal(size=(101, 3))
        a = ln.split_instances(x, 2, "random_split", 5)
        b = ln.split_instances(x, 2, "random_split", 5)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert abs(a.sizes[0] - a.sizes[1]) <= 1

    def test_random_split_k3(self):
        x = np.random.default_rng(1).normal(size=(90, 2))
        assert ln.split_instances(x, 3, "random_split", 0).num_clusters == 3

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            ln.split_instances(np.zeros((1, 2)), 2)

    def test_balanced_split(self):
        a = ln.balanced_split(11, 2, np.random.default_rng(0))
        assert sorted(a.sizes.tolist()) == [5, 6]


class TestFitGating:
    def test_separable_accuracy(self):
        x, z = blobs(np.random.default_rng(0), n=400, gap=8.0)
        gate = ln.fit_gating(x, z)
        assert np.mean(np.argmax(gate.weights(x), axis=1) == z) >= 0.99

    def test_uninformative_features_give_proportions(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20000, 3))
        z = (rng.random(20000) < 0.3).astype(int)
        w = ln.fit_gating(x, z).weights(rng.normal(size=(50, 3)))
        np.testing.assert_allclose(w[:, 1], np.mean(z), atol=0.05)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_two_clusters_match_logistic_irwls(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(500, 2)) * [1.0, 10.0] + [3.0, -20.0]
        z = (rng.random(500) < 1 / (1 + np.exp(-(0.8 * x[:, 0] - 0.05 * x[:, 1] - 3.0)))).astype(int)
        # centered softmax rows (-b/2, b/2) carry half the logistic penalty, so double the ridge
        gate = ln.fit_gating(x, z, ridge=2e-6)
        leaf = lv.fit_irwls("bernoulli", z.astype(float), x, lv.FitControl(ridge=1e-6))
        np.testing.assert_allclose(gate.params[1] - gate.params[0], leaf.coeffs, atol=1e-4)

    def test_needs_two_clusters(self):
        with pytest.raises(ValueError):
            ln.fit_gating(np.zeros((5, 1)), np.zeros(5, dtype=int))


class TestLearnCspn:
    def test_single_target_is_leaf(self):
        data = dio.make_synthetic("poisson_glm", seed=0, n=300)
        c = ln.learn_cspn(data)
        assert len(c.nodes) == 1 and c.nodes[c.root].kind == cc.LEAF
        assert c.nodes[c.root].leaf.family == "poisson"

    def test_few_rows_factorize(self):
        data = dio.make_synthetic("block_factorized", seed=0, n=100, groups=((0, 1, 2),))
        c = ln.learn_cspn(data)
        root = c.nodes[c.root]
        assert root.kind == cc.PRODUCT and len(root.children) == 3
        assert all(c.nodes[ch].kind == cc.LEAF for ch in root.children)

    @pytest.mark.slow
    def test_block_structure_recovered(self):
        hits = 0
        for seed in range(10):
            data = dio.make_synthetic("block_factorized", seed=seed, n=1000)
            hits += root_partition(ln.learn_cspn(data, ln.LearnParams(seed=seed))) == data.metadata["partition"]
        assert hits >= 8

    @pytest.mark.parametrize("gen,kw", [
        ("two_blob_gating", {}),
        ("block_factorized", {"binary": True}),
        ("dependent_pair", {}),
        ("ci_pair", {}),
    ])
    @pytest.mark.parametrize("method", ["kmeans", "random_split"])
    def test_valid_and_beats_factorized(self, gen, kw, method):
        data = dio.make_synthetic(gen, seed=3, n=600, **kw)
        c = ln.learn_cspn(data, ln.LearnParams(min_instances=64, cluster_method=method, seed=1))
        assert cc.validate(c) == []
        assert c.nodes[c.root].scope == tuple(range(len(data.y_columns)))
        assert train_cll(c, data) >= train_cll(ln.factorized_baseline(data), data) - 1e-9

    def test_training_cll_dominates_factorized_on_ten_datasets(self):
        gens = ["two_blob_gating", "block_factorized", "dependent_pair", "ci_pair", "two_blob_gating"]
        for i in range(10):
            data = dio.make_synthetic(gens[i % 5], seed=100 + i, n=400)
            c = ln.learn_cspn(data, ln.LearnParams(min_instances=32, seed=i))
            assert train_cll(c, data) >= train_cll(ln.factorized_baseline(data), data) - 1e-9

    def test_mixed_families(self):
        rng = np.random.default_rng(4)
        n = 500
        x = rng.normal(size=(n, 2))
        y = np.column_stack([
            rng.random(n) < 1 / (1 + np.exp(-x[:, 0])),
            rng.poisson(np.exp(0.3 * x[:, 1])),
            x[:, 0] + rng.normal(size=n),
            rng.integers(0, 3, n),
        ]).astype(float)
        schema = dio.Schema.parse("a,binary,Y\nb,count,Y\nc,continuous,Y\nd,categorical(3),Y\nx0,continuous,X\nx1,continuous,X\n")
        data = dio.Dataset(np.column_stack([y, x]), schema)
        c = ln.learn_cspn(data, ln.LearnParams(min_instances=64))
        assert cc.validate(c) == []
        fams = {n.leaf.family for n in c.nodes.values() if n.kind == cc.LEAF}
        assert fams == {"bernoulli", "poisson", "gaussian", "categorical"}

    def test_identical_x_terminates_with_forced_splits(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=300)
        y = np.column_stack([a, a + 0.1 * rng.normal(size=300)])
        data = dio.Dataset(np.column_stack([y, np.ones(300)]), dio.Schema.parse("a,continuous,Y\nb,continuous,Y\nx,continuous,X\n"))
        stats = ln.LearnStats()
        c = ln.learn_cspn(data, ln.LearnParams(min_instances=16), stats)
        assert cc.validate(c) == []
        assert stats.forced_splits > 0

    def test_no_evidence_columns(self):
        rng = np.random.default_rng(6)
        a = rng.integers(0, 2, 400)
        y = np.column_stack([a, a ^ (rng.random(400) < 0.1), rng.integers(0, 2, 400)]).astype(float)
        data = dio.Dataset(y, dio.Schema.uniform(["a", "b", "c"], "binary", ["Y"] * 3))
        c = ln.learn_cspn(data, ln.LearnParams(min_instances=64))
        assert c.num_x == 0 and cc.validate(c) == []
        assert root_partition(c) == [[0, 1], [2]]

    def test_stopping_rules(self):
        data = dio.make_synthetic("two_blob_gating", seed=7, n=600)
        depth0 = ln.learn_cspn(data, ln.LearnParams(max_depth=0))
        assert ln.learn_cspn(data, ln.LearnParams(min_frac=0.99)).nodes.keys() == depth0.nodes.keys()
        assert all(depth0.nodes[ch].kind == cc.LEAF for ch in depth0.nodes[depth0.root].children)

    def test_stats_and_determinism(self):
        data = dio.make_synthetic("dependent_pair", seed=8, n=600)
        s1, s2 = ln.LearnStats(), ln.LearnStats()
        a = ln.learn_cspn(data, ln.LearnParams(min_instances=64, seed=3), s1)
        b = ln.learn_cspn(data, ln.LearnParams(min_instances=64, seed=3, threads=4), s2)
        assert cc.dumps(a) == cc.dumps(b)
        assert s1.ci_tests == s2.ci_tests > 0
        assert s1.gating_splits + s1.rejected_gatings >= 1

    def test_leaf_error_carries_path(self, monkeypatch):
        def boom(*a, **k):
            raise FloatingPointError("diverged")

        monkeypatch.setattr(lv, "fit_irwls", boom)
        data = dio.make_synthetic("ci_pair", seed=0, n=50)
        with pytest.raises(ln.LeafFitError, match=r"y0 at node path \[0\]"):
            ln.learn_cspn(data)
