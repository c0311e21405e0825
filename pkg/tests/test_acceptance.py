"""Acceptance criteria 1-8, each at its stated tolerance and runtime budget.

Every test records one ``criterion N: PASS|FAIL|N/A ...`` line; the lines are
printed in a block at the end of the pytest run.
"""

import time

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from cspn import abcspn as ab
from cspn import circuit as cc
from cspn import citest as ci
from cspn import data as dio
from cspn import learn as ln
from cspn import optimize as op

from _helpers import all_binary, brute_force_marginal, random_circuit
from conftest import ACCEPTANCE_KEY

FAMILIES = ("bernoulli", "poisson", "gaussian", "categorical")


@pytest.fixture
def record(request):
    def _record(number, ok, detail):
        status = "N/A" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {number}: {status}  {detail}"
        getattr(request.config, ACCEPTANCE_KEY).append(line)
        print(line)
        return ok

    return _record


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_criterion_1_exact_inference(record):
    worst_marg = worst_norm = 0.0
    with Timer() as t:
        for k in range(50):
            rng = np.random.default_rng(k)
            num_y = int(rng.integers(2, 13))
            c = random_circuit(rng, num_y, 2, max_depth=4)
            assert cc.validate(c) == []
            x = rng.normal(size=2)
            ys = all_binary(num_y)
            worst_norm = max(worst_norm, abs(np.exp(logsumexp(cc.log_density(c, ys, x))) - 1))
            for _ in range(3):
                y = rng.integers(0, 2, num_y).astype(float)
                y[rng.random(num_y) < 0.5] = np.nan
                want = brute_force_marginal(c, cc.log_density, y, x)
                worst_marg = max(worst_marg, abs(cc.log_marginal(c, y, x) - want))
    ok = worst_marg <= 1e-9 and worst_norm <= 1e-6 and t.seconds < 60
    record(1, ok, f"max |log_marginal - enumeration| = {worst_marg:.2e}, max |sum p - 1| = {worst_norm:.2e}, {t.seconds:.1f}s")
    assert ok


def _finite_difference(circuit, pv, y, x, h=1e-5):
    out = np.empty_like(pv.values)
    for i in range(pv.values.size):
        up, down = pv.values.copy(), pv.values.copy()
        up[i] += h
        down[i] -= h
        out[i] = (op.mean_cll(pv.to_circuit(circuit, up), y, x) - op.mean_cll(pv.to_circuit(circuit, down), y, x)) / (2 * h)
    return out


def test_criterion_2_gradients(record):
    worst = 0.0
    families, gates = set(), set()
    with Timer() as t:
        for k in range(50):
            rng = np.random.default_rng(5000 + k)
            fams = tuple(rng.permutation(FAMILIES))
            c = random_circuit(rng, int(rng.integers(2, 5)), int(rng.integers(1, 3)), families=fams, max_depth=3,
                               gate_kind=("softmax", "constant")[k % 2])
            families |= {str(n.leaf.family) for n in c.nodes.values() if n.kind == cc.LEAF}
            gates |= {n.gate.kind for n in c.nodes.values() if n.kind == cc.GATING}
            x = rng.normal(size=(20, c.num_x))
            y = cc.sample(c, x, rng)
            pv = op.ParamVector.from_circuit(c)
            _, got = op.cll_and_grad(c, y, x, pv)
            want = _finite_difference(c, pv, y, x)
            # relative error, with an absolute floor for components that are zero up to rounding
            worst = max(worst, np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-3)))
    ok = worst <= 1e-4 and families == set(FAMILIES) and gates == {"softmax", "constant"} and t.seconds < 120
    record(2, ok, f"max relative gradient error {worst:.2e} over {sorted(families)} / {sorted(gates)}, {t.seconds:.1f}s")
    assert ok


def test_criterion_3_ci_calibration(record):
    with Timer() as t:
        ps = np.empty(1000)
        for r in range(1000):
            d = dio.make_synthetic("ci_pair", seed=r, n=400)
            ps[r] = ci.rcot(d.y[:, 0], d.y[:, 1], d.x, seed=r).p_value
        rate = np.mean(ps <= 0.05)
        ks = stats.kstest(ps, "uniform").statistic
        hits = 0
        for r in range(200):
            d = dio.make_synthetic("dependent_pair", seed=10_000 + r, n=400)
            hits += ci.rcot(d.y[:, 0], d.y[:, 1], d.x, seed=r).p_value <= 0.05
        power = hits / 200
    ok = 0.02 <= rate <= 0.09 and ks < 0.08 and power >= 0.9 and t.seconds < 600
    record(3, ok, f"null rejection {rate:.3f}, KS {ks:.3f}, power {power:.3f}, {t.seconds:.1f}s")
    assert ok


def test_criterion_4_structure_recovery(record):
    with Timer() as t:
        hits = 0
        for seed in range(10):
            data = dio.make_synthetic("block_factorized", seed=seed, n=1000)
            c = ln.learn_cspn(data, ln.LearnParams(seed=seed))
            root = c.nodes[c.root]
            got = sorted(list(c.nodes[ch].scope) for ch in root.children) if root.kind == cc.PRODUCT else None
            hits += got == data.metadata["partition"]
    ok = hits >= 8 and t.seconds < 300
    record(4, ok, f"root partition recovered on {hits}/10 seeds, {t.seconds:.1f}s")
    assert ok


def benchmark_cll(name, fraction, root=None, mask_seed=0):
    """Learn + train on the train split (validation for epoch selection), mean test CLL."""
    mask = dio.EvidenceMask(fraction, seed=mask_seed)
    train, valid, test = (dio.load_benchmark(name, s, mask, root) for s in ("train", "valid", "test"))
    c0 = ln.learn_cspn(train, ln.LearnParams(min_instances=500))
    res = op.train(c0, train, valid, op.OptControl(max_epochs=30, patience=5))
    return op.mean_cll(res.circuit, test.y, test.x)


@pytest.mark.parametrize("fraction,threshold,paper", [(0.8, -1.45, -1.256), (0.5, -3.1, -2.795)])
def test_criterion_5_nltcs(record, fraction, threshold, paper):
    label = f"5 (NLTCS, {int(fraction * 100)}% evidence)"
    try:
        with Timer() as t:
            cll = benchmark_cll("nltcs", fraction)
    except dio.DataError as e:
        record(label, False, f"NLTCS data unavailable: {e}")
        pytest.fail(f"NLTCS benchmark not available: {e}")
    ok = cll >= threshold and t.seconds < 1800
    record(label, ok, f"mean test CLL {cll:.4f} (threshold {threshold}, reference {paper}), {t.seconds:.1f}s")
    assert ok


def test_criterion_5_pipeline_runs_on_benchmark_layout(tmp_path):
    # not a criterion: the benchmark protocol end to end on a synthetic 16-column binary set
    rng = np.random.default_rng(0)
    z = rng.integers(0, 2, (3000, 1))
    rows = (rng.random((3000, 16)) < np.where(z == 1, 0.8, 0.2)).astype(int)
    for split, part in zip(("ts", "valid", "test"), np.split(rows, [2000, 2500])):
        (tmp_path / f"toy.{split}.data").write_text("".join(",".join(map(str, r)) + "\n" for r in part))
    cll = benchmark_cll("toy", 0.5, root=tmp_path)
    assert np.isfinite(cll) and cll < 0


def test_criterion_6_count_forecasting(record):
    with Timer() as t:
        data = dio.next_step_pairs(dio.ar_count_series(3000, dim=4, seed=0))
        cut = int(0.8 * data.n)  # chronological split
        train, test = data.rows(np.arange(cut)), data.rows(np.arange(cut, data.n))
        rmse = lambda pred: float(np.sqrt(np.mean((pred - test.y) ** 2)))
        cspn = ln.learn_cspn(train, ln.LearnParams(max_depth=3))
        r_cspn = rmse(cc.expectation(cspn, test.x))
        r_marginal = rmse(np.broadcast_to(train.y.mean(axis=0), test.y.shape))
        joint = dio.Dataset(np.asarray(train.y), dio.Schema(tuple(train.y_columns)))
        spn = ln.learn_cspn(joint, ln.LearnParams(max_depth=3))
        r_spn = rmse(np.broadcast_to(cc.expectation(spn, np.empty(0)), test.y.shape))
    leaves = {n.leaf.family for n in cspn.nodes.values() if n.kind == cc.LEAF}
    ok = r_cspn < r_marginal and r_cspn < r_spn and leaves == {"poisson"} and t.seconds < 600
    record(6, ok, f"test RMSE CSPN {r_cspn:.4f} < marginal mean {r_marginal:.4f}, < unconditional SPN {r_spn:.4f}, {t.seconds:.1f}s")
    assert ok


def factorized_bernoulli_ll(train_images, train_labels, images, labels, num_classes):
    """Class prior (add-one) times per-class independent pixels (Laplace smoothed)."""
    n = len(train_labels)
    prior = (np.bincount(train_labels, minlength=num_classes) + 1.0) / (n + num_classes)
    flat = train_images.reshape(n, -1)
    p = np.array([(flat[train_labels == c].sum(axis=0) + 1) / ((train_labels == c).sum() + 2) for c in range(num_classes)])
    x = images.reshape(len(labels), -1)
    pc = p[labels]
    return np.log(prior[labels]) + np.sum(x * np.log(pc) + (1 - x) * np.log1p(-pc), axis=1)


def test_criterion_7_abcspn_digits(record):
    datasets = pytest.importorskip("sklearn.datasets")
    with Timer() as t:
        digits = datasets.load_digits()
        images = (digits.images > 8).astype(float)
        labels = digits.target.astype(np.int64)

        # (a) exhaustive normalization on a 2x2-pixel crop, one pixel per block
        crop = images[:, 3:5, 3:5]
        small = ab.abcspn_train(crop, labels, ab.BlockGrid(2, 2, 2, 2), ln.LearnParams(min_instances=64), 10, "bernoulli")
        every = all_binary(4).reshape(16, 2, 2)
        total = np.exp(logsumexp([ab.abcspn_log_likelihood(small, every, np.full(16, c)) for c in range(10)]))
        norm_ok = abs(total - 1) <= 1e-8

        # (b) held-out log-likelihood against the class-conditional factorized baseline
        perm = np.random.default_rng(1).permutation(len(labels))
        test_idx, train_idx = perm[:360], perm[360:]
        params = ln.LearnParams(min_instances=256, leaf_ridge=1.0)
        model = ab.abcspn_train(images[train_idx], labels[train_idx], ab.BlockGrid(8, 8, 2, 2), params, 10, "bernoulli")
        ll = float(np.mean(ab.abcspn_log_likelihood(model, images[test_idx], labels[test_idx])))
        base = float(np.mean(factorized_bernoulli_ll(images[train_idx], labels[train_idx], images[test_idx], labels[test_idx], 10)))

        # (c) 50/50 mixture of the two classes with the most different mean intensity
        means = np.array([images[train_idx][labels[train_idx] == c].mean() for c in range(10)])
        lo, hi = int(np.argmin(means)), int(np.argmax(means))
        w = np.zeros(10)
        w[[lo, hi]] = 0.5
        between = 0
        for seed in range(10):
            m = ab.abcspn_sample(model, w, rng=seed, n=20).mean()
            between += means[lo] < m < means[hi]
    ok = norm_ok and ll > base and between >= 9 and t.seconds < 900
    record(7, ok, f"2x2 normalization |sum - 1| = {abs(total - 1):.1e}; held-out mean LL {ll:.3f} vs factorized {base:.3f}; "
                  f"mixture of classes {lo},{hi} between class means on {between}/10 seeds; {t.seconds:.1f}s")
    assert ok


def test_criterion_8_out_of_scope(record):
    record(8, None, "not applicable: neural-feature results and image-model baselines are out of scope at desk scale")
