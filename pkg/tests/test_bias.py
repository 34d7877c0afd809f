import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from riskwrap import HistogramBias, KDEBias, TrainConfig, mlp, predict_with_risk, train, wrap
from riskwrap.bias import (
    FACTORIZATION,
    DensityEstimator,
    bias_percentiles,
    debias_weights,
    density_score,
    fit_density,
    percentile_ranks,
    resample_indices,
)
from riskwrap.errors import ConfigError, DegenerateDimensionWarning, ShapeError

finite = st.floats(-50, 50, allow_nan=False)


class TestFitDensity:
    def test_two_points_two_bins(self):
        est = fit_density(np.array([[0.1], [0.9]]), bins=2)
        np.testing.assert_allclose(est.probs, [[0.5, 0.5]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 5))
    def test_mass_conservation(self, seed, bins, d):
        f = np.random.default_rng(seed).normal(size=(50, d))
        est = fit_density(f, bins=bins)
        np.testing.assert_allclose(est.probs.sum(axis=1), 1.0, atol=1e-9)

    def test_degenerate_dimension_dropped(self):
        f = np.column_stack([np.linspace(0, 1, 20), np.full(20, 3.0)])
        with pytest.warns(DegenerateDimensionWarning):
            est = fit_density(f)
        assert est.dropped == [1]
        assert np.all(density_score(est, f) > 0)

    def test_all_constant_rejected(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateDimensionWarning)
            with pytest.raises(ShapeError):
                fit_density(np.ones((5, 2)))

    def test_preconditions(self):
        with pytest.raises(ShapeError):
            fit_density(np.ones((1, 2)))
        with pytest.raises(ConfigError):
            fit_density(np.random.default_rng(0).normal(size=(5, 1)), kind="gmm")
        with pytest.raises(ConfigError):
            fit_density(np.random.default_rng(0).normal(size=(5, 1)), kind="kde", bandwidth=0.0)

    def test_scott_bandwidth_positive(self):
        f = np.random.default_rng(0).normal(size=(100, 3))
        est = fit_density(f, kind="kde")
        np.testing.assert_allclose(est.bandwidth, f.std(axis=0, ddof=1) * 100 ** -0.2)
        assert np.all(est.bandwidth > 0)

    def test_kde_reference_beats_far_point(self):
        ref = np.random.default_rng(1).normal(size=(30, 1))
        est = fit_density(ref, kind="kde")
        h = est.bandwidth[0]

        def oracle(p):
            return np.mean(np.exp(-0.5 * ((p - ref[:, 0]) / h) ** 2)) / (h * np.sqrt(2 * np.pi))

        near, far = density_score(est, np.array([[ref[0, 0]], [50.0]]))
        assert near == pytest.approx(oracle(ref[0, 0]), rel=1e-12)
        assert far == pytest.approx(oracle(50.0), rel=1e-12, abs=1e-300)
        assert near >= far

    def test_round_trip(self):
        for kind in ("histogram", "kde"):
            f = np.random.default_rng(0).normal(size=(40, 3))
            est = fit_density(f, kind=kind)
            back = DensityEstimator.from_dict(est.to_dict())
            np.testing.assert_array_equal(density_score(est, f), density_score(back, f))


class TestDensityScore:
    def test_uniform_chi_square(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, size=(10_000, 1))
        est = fit_density(x, bins=10)
        counts = est.probs[0] * len(x)
        stat = ((counts - 1000.0) ** 2 / 1000.0).sum()
        assert stat < chi2.ppf(0.999, 9)
        np.testing.assert_allclose(density_score(est, x), 0.1, atol=0.01)

    def test_densest_cell_scores_highest(self):
        x = np.random.default_rng(0).normal(size=(500, 2))
        est = fit_density(x)
        s = density_score(est, x)
        # a point in the densest cell of every dimension
        centers = [(e[np.argmax(p)] + e[np.argmax(p) + 1]) / 2 for e, p in zip(est.edges, est.probs)]
        top = density_score(est, np.array([centers]))[0]
        assert top == pytest.approx(np.prod(est.probs.max(axis=1)), rel=1e-12)
        assert np.all(top >= s)

    def test_bimodal_kde_gap(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-3, 0.5, 300), rng.normal(3, 0.5, 300)]).reshape(-1, 1)
        est = fit_density(x, kind="kde")
        modes = density_score(est, np.array([[-3.0], [3.0]]))
        gap = density_score(est, np.array([[0.0]]))
        assert np.all(modes > gap)

    def test_out_of_range_clamps(self):
        est = fit_density(np.linspace(0, 1, 11).reshape(-1, 1), bins=5)
        np.testing.assert_allclose(density_score(est, [[-10.0], [10.0]]), [est.probs[0, 0], est.probs[0, -1]])

    def test_dimension_mismatch(self):
        est = fit_density(np.random.default_rng(0).normal(size=(10, 2)))
        with pytest.raises(ShapeError):
            density_score(est, np.zeros((3, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["histogram", "kde"]))
    def test_duplicating_a_sample_never_lowers_its_score(self, seed, kind):
        f = np.random.default_rng(seed).normal(size=(30, 2))
        before = density_score(fit_density(f, kind=kind), f[:1])[0]
        after = density_score(fit_density(np.vstack([f, f[:1]]), kind=kind), f[:1])[0]
        assert after >= before * (1 - 1e-12)


class TestPercentiles:
    def test_lowest_gets_zero(self):
        np.testing.assert_allclose(percentile_ranks([0.3, 0.1, 0.5]), [50.0, 0.0, 100.0])

    def test_full_tie(self):
        np.testing.assert_allclose(percentile_ranks([2.0, 2.0, 2.0, 2.0]), 50.0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.01, 100), min_size=2, max_size=30))
    def test_invariant_under_increasing_transform(self, scores):
        s = np.array(scores)
        np.testing.assert_allclose(percentile_ranks(s), percentile_ranks(np.log(s) * 3 + 7))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(finite, min_size=2, max_size=30), st.randoms())
    def test_permutation_equivariant(self, scores, rnd):
        s = np.array(scores)
        order = list(range(len(s)))
        rnd.shuffle(order)
        np.testing.assert_allclose(percentile_ranks(s[order]), percentile_ranks(s)[order])

    def test_report_metadata_and_monotone(self):
        f = np.random.default_rng(0).normal(size=(100, 2))
        est = fit_density(f)
        rep = bias_percentiles(est, f)
        assert rep.metadata["factorization"] == FACTORIZATION
        order = np.argsort(rep.scores, kind="stable")
        assert np.all(np.diff(rep.percentiles[order]) >= 0)
        assert np.all(rep.weights > 0)

    def test_csv_export(self, tmp_path):
        f = np.random.default_rng(0).normal(size=(5, 1))
        rep = bias_percentiles(fit_density(f), f)
        rep.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "sample_index,score,percentile,weight"
        assert len(lines) == 6


class TestDebiasWeights:
    def test_uniform_scores(self):
        np.testing.assert_allclose(debias_weights(np.full(7, 0.3)), 1.0)

    def test_hand_oracle(self):
        np.testing.assert_allclose(debias_weights([0.1, 0.9], alpha=0.1), [5 / 3, 1 / 3])

    def test_alpha_must_be_positive(self):
        with pytest.raises(ConfigError):
            debias_weights([0.1], alpha=0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 10_000), min_size=2, max_size=20, unique=True))
    def test_anti_monotone(self, scores):
        s = np.array(scores) / 1000.0
        w = debias_weights(s)
        order = np.argsort(s)
        assert np.all(np.diff(w[order]) < 0)

    def test_resampling_raises_minority_fraction(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(0, 0.3, 900), rng.normal(5, 0.3, 100)]).reshape(-1, 1)
        rep = bias_percentiles(fit_density(x), x)
        idx = resample_indices(rep.weights, 10_000, seed=1)
        assert np.mean(idx >= 900) > 0.10


class TestWrappedBias:
    def _data(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 3))
        return x, x[:, :1] * 2

    def test_histogram_metric(self):
        x, y = self._data()
        g = wrap(mlp([3, 8, 1]), [HistogramBias(bins=5)])
        train(g, x, y, TrainConfig(epochs=2))
        out = predict_with_risk(g, x)
        assert out.risks["histogram_bias"].shape == (200,)
        assert np.all(out.risks["histogram_bias"] >= 0)
        assert out.metadata["conventions"]["histogram_bias"] == "density"

    def test_kde_metric_and_report(self):
        x, y = self._data()
        g = wrap(mlp([3, 8, 1]), [KDEBias()])
        train(g, x, y, TrainConfig(epochs=2))
        rep = g.metric("kde_bias").report(g, x)
        assert rep.percentiles.min() == 0.0 and rep.percentiles.max() == 100.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            wrap(mlp([3, 8, 1]), [HistogramBias(bins=0)])
        with pytest.raises(ConfigError):
            wrap(mlp([3, 8, 1]), [KDEBias(bandwidth=-1.0)])
