import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize
from scipy.special import logsumexp

from cspn import leaves as lv

from _helpers import random_leaf

LN2PI_HALF = 0.5 * np.log(2 * np.pi)


class TestLogDensity:
    def test_bernoulli_symmetric_logit(self):
        leaf = lv.GlmLeaf("bernoulli", [0.0])
        assert lv.leaf_log_density(leaf, 1, []) == pytest.approx(np.log(0.5), abs=1e-15)

    def test_poisson_zero_count(self):
        leaf = lv.GlmLeaf("poisson", [np.log(2.0)])
        assert lv.leaf_log_density(leaf, 0, []) == pytest.approx(-2.0, abs=1e-15)

    def test_gaussian_standard_mode(self):
        leaf = lv.GlmLeaf("gaussian", [0.0], dispersion=1.0)
        assert lv.leaf_log_density(leaf, 0.0, []) == pytest.approx(-0.918938533204673, abs=1e-12)
        assert lv.leaf_log_density(leaf, 0.0, []) == pytest.approx(-LN2PI_HALF, abs=1e-15)

    def test_categorical(self):
        leaf = lv.GlmLeaf("categorical", [[0.0], [np.log(2.0)], [np.log(3.0)]])
        assert lv.leaf_log_density(leaf, 2, []) == pytest.approx(np.log(0.5))

    def test_vectorized_rows(self):
        leaf = lv.GlmLeaf("bernoulli", [1.0, -0.5])
        x = np.array([[0.0], [1.0], [2.0]])
        got = lv.leaf_log_density(leaf, np.array([1.0, 0.0, 1.0]), x)
        eta = x[:, 0] - 0.5
        want = np.array([-np.log1p(np.exp(-eta[0])), -np.log1p(np.exp(eta[1])), -np.log1p(np.exp(-eta[2]))])
        np.testing.assert_allclose(got, want, rtol=1e-14)

    @pytest.mark.parametrize(
        "family,value",
        [("bernoulli", 2), ("bernoulli", 0.5), ("poisson", -1), ("poisson", 1.5), ("categorical", 3), ("gaussian", np.inf)],
    )
    def test_out_of_support(self, family, value):
        leaf = random_leaf(np.random.default_rng(0), family, 0)
        with pytest.raises(lv.DomainError):
            lv.leaf_log_density(leaf, value, [])

    def test_wrong_link_rejected(self):
        with pytest.raises(ValueError):
            lv.GlmLeaf("poisson", [0.0], link="identity")


class TestNormalization:
    @given(eta=st.floats(-30, 30))
    def test_bernoulli(self, eta):
        leaf = lv.GlmLeaf("bernoulli", [eta])
        total = np.exp(lv.leaf_log_density(leaf, np.array([0.0, 1.0]), []))
        assert total.sum() == pytest.approx(1.0, abs=1e-12)

    @given(mu=st.floats(1e-3, 20.0))
    def test_poisson_truncated_sum(self, mu):
        leaf = lv.GlmLeaf("poisson", [np.log(mu)])
        ys = np.arange(0, 201, dtype=float)
        assert np.exp(logsumexp(lv.leaf_log_density(leaf, ys, []))) == pytest.approx(1.0, abs=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(mu=st.floats(-5, 5), var=st.floats(1e-3, 10))
    def test_gaussian_integral(self, mu, var):
        leaf = lv.GlmLeaf("gaussian", [mu], dispersion=var)
        sd = np.sqrt(var)
        total, _ = integrate.quad(lambda t: np.exp(lv.leaf_log_density(leaf, t, [])), mu - 40 * sd, mu + 40 * sd, points=[mu], epsabs=1e-12, epsrel=1e-12, limit=200)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_categorical_sum(self):
        leaf = random_leaf(np.random.default_rng(1), "categorical", 2, num_classes=4)
        x = np.array([0.3, -1.2])
        assert np.exp(lv.leaf_log_density(leaf, np.arange(4.0), x)).sum() == pytest.approx(1.0, abs=1e-12)


class TestModeAndSample:
    def test_bernoulli_tie_goes_low(self):
        assert lv.leaf_mode(lv.GlmLeaf("bernoulli", [0.0]), []) == 0.0

    def test_gaussian_mode_is_mean(self):
        leaf = lv.GlmLeaf("gaussian", [2.0, 0.5], dispersion=3.0)
        assert lv.leaf_mode(leaf, [1.5]) == pytest.approx(3.5)

    def test_poisson_integer_mean_tie(self):
        assert lv.leaf_mode(lv.GlmLeaf("poisson", [np.log(2.0)]), []) == 1.0
        assert lv.leaf_mode(lv.GlmLeaf("poisson", [np.log(2.5)]), []) == 2.0
        assert lv.leaf_mode(lv.GlmLeaf("poisson", [np.log(0.4)]), []) == 0.0

    def test_categorical_mode(self):
        leaf = lv.GlmLeaf("categorical", [[0.0], [1.0], [1.0]])
        assert lv.leaf_mode(leaf, []) == 1.0

    def test_degenerate_bernoulli_sample(self):
        leaf = lv.GlmLeaf("bernoulli", [800.0])
        draws = lv.leaf_sample(leaf, np.zeros((1000, 0)), np.random.default_rng(0))
        assert np.all(draws == 1.0)

    @pytest.mark.parametrize("family", ["bernoulli", "poisson", "gaussian", "categorical"])
    def test_sample_mean_matches(self, family):
        rng = np.random.default_rng(3)
        leaf = random_leaf(rng, family, 1)
        x = np.full((40000, 1), 0.7)
        draws = lv.leaf_sample(leaf, x, rng)
        mu = lv.mean(leaf, x[:1])[0]
        assert abs(draws.mean() - mu) < 0.05 * max(1.0, abs(mu))


class TestFitIrwls:
    def test_gaussian_intercept_only(self):
        leaf = lv.fit_irwls("gaussian", [1.0, 2.0, 3.0], np.empty((3, 0)))
        assert leaf.coeffs[-1] == pytest.approx(2.0, abs=1e-5)
        assert leaf.dispersion == pytest.approx(2.0 / 3.0, abs=1e-6)

    def test_gaussian_needs_two_rows(self):
        with pytest.raises(ValueError):
            lv.fit_irwls("gaussian", [1.0], np.empty((1, 0)))

    def test_gaussian_dispersion_floor(self):
        leaf = lv.fit_irwls("gaussian", [0.5] * 10, np.empty((10, 0)))
        assert leaf.dispersion == lv.DISPERSION_FLOOR

    def test_poisson_recovers_generator(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5000, 2))
        truth = np.array([0.5, -0.3, 0.2])
        y = rng.poisson(np.exp(lv.design(x) @ truth))
        leaf = lv.fit_irwls("poisson", y, x)
        np.testing.assert_allclose(leaf.coeffs, truth, atol=0.05)

    def test_bernoulli_separable_is_finite(self):
        x = np.array([[-1.0], [1.0]])
        y = np.array([0.0, 1.0])
        leaf = lv.fit_irwls("bernoulli", y, x, lv.FitControl(max_iters=200, ridge=1e-6))
        assert np.all(np.isfinite(leaf.coeffs))
        assert np.all(lv.leaf_log_density(leaf, y, x) > np.log(0.99))

        # oracle: generic convex optimizer on the same penalized objective
        def objective(b):
            return -np.sum(lv.leaf_log_density(lv.GlmLeaf("bernoulli", b), y, x)) + 0.5e-6 * b @ b

        ref = optimize.minimize(objective, np.zeros(2), method="BFGS", options={"gtol": 1e-12, "maxiter": 10000})
        assert objective(leaf.coeffs) <= ref.fun + 1e-6

    def test_constant_bernoulli_handled_by_ridge(self):
        leaf = lv.fit_irwls("bernoulli", np.ones(20), np.empty((20, 0)))
        assert np.isfinite(leaf.coeffs).all() and leaf.coeffs[-1] > 5

    @pytest.mark.parametrize("family", ["bernoulli", "poisson", "gaussian"])
    def test_objective_non_increasing(self, family):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(300, 3))
        truth = random_leaf(rng, family, 3)
        y = lv.leaf_sample(truth, x, rng)
        res = lv.irwls(family, y, x, lv.FitControl())
        assert res.converged
        assert np.all(np.diff(res.objective) <= 0)

    @pytest.mark.parametrize("family", ["bernoulli", "poisson", "gaussian", "categorical"])
    def test_permutation_invariant(self, family):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(200, 2))
        y = lv.leaf_sample(random_leaf(rng, family, 2), x, rng)
        perm = rng.permutation(200)
        a = lv.fit_irwls(family, y, x, num_classes=3 if family == "categorical" else None)
        b = lv.fit_irwls(family, y[perm], x[perm], num_classes=3 if family == "categorical" else None)
        np.testing.assert_allclose(a.coeffs, b.coeffs, rtol=1e-9, atol=1e-10)
        assert a.dispersion == pytest.approx(b.dispersion, rel=1e-10)

    def test_categorical_matches_frequencies(self):
        y = np.array([0] * 20 + [1] * 30 + [2] * 50, dtype=float)
        leaf = lv.fit_irwls("categorical", y, np.empty((100, 0)))
        probs = np.exp(lv.leaf_log_density(leaf, np.arange(3.0), []))
        np.testing.assert_allclose(probs, [0.2, 0.3, 0.5], atol=1e-5)

    def test_collinear_features(self):
        rng = np.random.default_rng(2)
        x1 = rng.normal(size=100)
        x = np.column_stack([x1, x1, 2 * x1])
        y = 1.0 + x1 + rng.normal(scale=0.1, size=100)
        leaf = lv.fit_irwls("gaussian", y, x)
        pred = lv.mean(leaf, x)
        assert np.sqrt(np.mean((pred - y) ** 2)) < 0.15


class TestGradient:
    def test_bernoulli_intercept(self):
        leaf = lv.GlmLeaf("bernoulli", [0.0])
        assert lv.leaf_grad(leaf, 1, [])[0] == pytest.approx(0.5)

    def test_poisson_canonical_score(self):
        leaf = lv.GlmLeaf("poisson", [0.2, -0.1, 0.3])
        x = np.array([1.5, -0.5])
        mu = np.exp(0.2 * 1.5 + 0.1 * 0.5 + 0.3)
        np.testing.assert_allclose(lv.leaf_grad(leaf, 3, x), (3 - mu) * np.array([1.5, -0.5, 1.0]), rtol=1e-14)

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        families = ["bernoulli", "poisson", "gaussian", "categorical"]
        h = 1e-5
        for case in range(100):
            family = families[case % 4]
            d = int(rng.integers(0, 4))
            leaf = random_leaf(rng, family, d)
            x = rng.normal(size=d)
            y = lv.leaf_sample(leaf, x, rng)
            got = lv.leaf_grad(leaf, y, x)
            flat = leaf.coeffs.ravel()
            want = np.empty_like(got)
            for i in range(leaf.num_params):
                def f(delta):
                    if i < flat.size:
                        c = flat.copy()
                        c[i] += delta
                        other = lv.GlmLeaf(family, c.reshape(leaf.coeffs.shape), leaf.dispersion)
                    else:
                        other = lv.GlmLeaf(family, leaf.coeffs, leaf.dispersion * np.exp(delta))
                    return lv.leaf_log_density(other, y, x)
                want[i] = (f(h) - f(-h)) / (2 * h)
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-8, err_msg=f"case {case} {family}")
