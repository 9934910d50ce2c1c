import warnings

import numpy as np
import pandas as pd
import pytest
import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from cluster import (
    Preprocessor,
    adjusted_rand_index,
    centroid_summary,
    choose_elbow,
    elbow_select,
    fit_pca,
    inverse_transform_pca,
    kmeans_fit,
    preprocess,
    stability,
    transform_pca,
)
from errors import (
    ColumnMismatch,
    DegenerateMatrix,
    KTooLarge,
    LengthMismatch,
    NegativeValueInLogColumn,
    RangeTooShort,
)
from synth import ClusterSpec, gen_clustered_features


@pytest.fixture
def random_matrix():
    rng = np.random.default_rng(11)
    mixing = rng.normal(size=(5, 5))
    return pd.DataFrame(rng.normal(size=(200, 5)) @ mixing, columns=[f"f{i}" for i in range(5)])


@pytest.fixture
def wide_matrix():
    rng = np.random.default_rng(23)
    mixing = rng.normal(size=(10, 10))
    return pd.DataFrame(rng.normal(size=(1000, 10)) @ mixing, columns=[f"f{i}" for i in range(10)])


@pytest.fixture
def blobs():
    return gen_clustered_features(ClusterSpec(seed=2, n=2000, k=4))


class TestPreprocess:

    @pytest.mark.unit
    def test_log_then_zscore(self):
        matrix = pd.DataFrame({"num_turns": [0.0, np.e - 1]})

        out = preprocess(matrix, ["num_turns"])

        assert out["num_turns"].tolist() == pytest.approx([-1.0, 1.0])

    @pytest.mark.unit
    def test_columns_are_standardized(self, random_matrix):
        out = preprocess(random_matrix, [])

        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(out.std(axis=0, ddof=0), 1.0)

    @pytest.mark.unit
    def test_constant_column_warns_and_zeroes(self):
        matrix = pd.DataFrame({"a": [1.0, 2.0, 3.0], "b": [5.0, 5.0, 5.0]})

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = preprocess(matrix, [])

        assert (out["b"] == 0.0).all()
        assert any("b" in str(w.message) for w in caught)

    @pytest.mark.unit
    def test_negative_in_log_column(self):
        with pytest.raises(NegativeValueInLogColumn):
            preprocess(pd.DataFrame({"num_turns": [1.0, -1.0]}), ["num_turns"])

    @pytest.mark.unit
    def test_missing_values_rejected(self):
        with pytest.raises(ValueError):
            preprocess(pd.DataFrame({"a": [1.0, np.nan]}), [])

    @pytest.mark.unit
    def test_transform_checks_columns(self, random_matrix):
        fitted = Preprocessor.fit(random_matrix, [])

        with pytest.raises(ColumnMismatch):
            fitted.transform(random_matrix[list(reversed(random_matrix.columns))])


class TestPCA:

    @pytest.mark.unit
    def test_ratios_match_covariance_eigenvalues(self, random_matrix):
        model = fit_pca(random_matrix)
        x = random_matrix.to_numpy()
        eig = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False, ddof=0)))[::-1]

        assert np.allclose(model.explained_variance_ratios, eig / eig.sum(), atol=1e-8)
        assert np.allclose(model.eigenvalues, eig, atol=1e-8)
        assert np.all(np.diff(model.eigenvalues) <= 1e-12)

    @pytest.mark.unit
    def test_loadings_orthonormal_with_sign_rule(self, random_matrix):
        model = fit_pca(random_matrix)

        assert np.allclose(model.loadings @ model.loadings.T, np.eye(5), atol=1e-10)
        pivots = np.abs(model.loadings).argmax(axis=1)
        assert (model.loadings[np.arange(5), pivots] > 0).all()

    @pytest.mark.unit
    def test_full_reconstruction(self, random_matrix):
        model = fit_pca(random_matrix)

        back = inverse_transform_pca(model, transform_pca(model, random_matrix))

        assert np.allclose(back.to_numpy(), random_matrix.to_numpy(), atol=1e-8)

    @pytest.mark.unit
    def test_component_selection(self, random_matrix):
        assert fit_pca(random_matrix, n_components=2).n_components == 2
        chosen = fit_pca(random_matrix, variance_target=0.9)
        assert chosen.explained_variance_ratios.sum() >= 0.9 - 1e-12
        assert chosen.component_names[0] == "PC1"

        with pytest.raises(ValueError):
            fit_pca(random_matrix, n_components=6)
        with pytest.raises(ValueError):
            fit_pca(random_matrix, n_components=2, variance_target=0.9)

    @pytest.mark.unit
    def test_degenerate(self):
        with pytest.raises(DegenerateMatrix):
            fit_pca(pd.DataFrame({"a": [1.0, 1.0], "b": [2.0, 2.0]}))
        with pytest.raises(DegenerateMatrix):
            fit_pca(pd.DataFrame({"a": [1.0], "b": [2.0]}))

    @pytest.mark.unit
    def test_transform_checks_columns(self, random_matrix):
        model = fit_pca(random_matrix)

        with pytest.raises(ColumnMismatch):
            transform_pca(model, random_matrix.drop(columns=["f0"]))

    @pytest.mark.unit
    def test_full_width_against_brute_force(self, wide_matrix):
        model = fit_pca(wide_matrix)
        eig = np.sort(np.linalg.eigvalsh(np.cov(wide_matrix.to_numpy(), rowvar=False, ddof=0)))[::-1]

        back = inverse_transform_pca(model, transform_pca(model, wide_matrix))

        assert np.allclose(model.explained_variance_ratios, eig / eig.sum(), rtol=0, atol=1e-8)
        assert np.abs(back.to_numpy() - wide_matrix.to_numpy()).max() < 1e-8

    @pytest.mark.unit
    def test_mean_row_maps_to_origin(self, wide_matrix):
        model = fit_pca(wide_matrix)
        mean_row = wide_matrix.mean().to_frame().T

        scores = transform_pca(model, mean_row)

        assert np.allclose(scores.to_numpy(), 0.0, atol=1e-10)

    @pytest.mark.unit
    def test_score_variances_are_eigenvalues(self, wide_matrix):
        model = fit_pca(wide_matrix)

        scores = transform_pca(model, wide_matrix)

        assert np.allclose(scores.var(ddof=0).to_numpy(), model.eigenvalues, rtol=1e-8)
        assert np.allclose(np.corrcoef(scores.to_numpy(), rowvar=False), np.eye(10), atol=1e-8)


class TestKMeans:

    @pytest.mark.unit
    def test_recovers_blobs(self, blobs):
        features, truth = blobs

        model, labels = kmeans_fit(features, 4, seed=0)

        assert adjusted_rand_index(truth, labels) > 0.99
        assert model.centroids.shape == (4, 10)
        assert (model.predict(features.to_numpy()) == labels).all()

    @pytest.mark.unit
    def test_seeded_runs_repeat(self, blobs):
        features, _ = blobs

        first = kmeans_fit(features, 4, seed=7)
        second = kmeans_fit(features, 4, seed=7)

        assert (first[1] == second[1]).all()
        assert first[0].inertia == second[0].inertia

    @pytest.mark.unit
    def test_k_too_large(self):
        points = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])

        with pytest.raises(KTooLarge):
            kmeans_fit(points, 3, seed=0)

    @pytest.mark.unit
    def test_k_below_two(self, blobs):
        with pytest.raises(ValueError):
            kmeans_fit(blobs[0], 1, seed=0)


class TestElbow:

    @pytest.mark.unit
    def test_second_difference(self):
        assert choose_elbow({2: 100.0, 3: 50.0, 4: 40.0, 5: 35.0}) == 3

    @pytest.mark.unit
    def test_ties_go_to_smaller_k(self):
        assert choose_elbow({2: 40.0, 3: 30.0, 4: 20.0, 5: 10.0}) == 3

    @pytest.mark.unit
    def test_range_too_short(self, blobs):
        with pytest.raises(RangeTooShort):
            choose_elbow({2: 1.0, 3: 0.5})
        with pytest.raises(RangeTooShort):
            elbow_select(blobs[0], k_range=range(2, 4))

    @pytest.mark.integration
    def test_picks_planted_k(self, blobs):
        result = elbow_select(blobs[0], k_range=range(2, 9), seed=0, threads=2)

        assert result.chosen_k == 4
        frame = result.to_frame()
        assert frame.loc[frame["chosen"], "k"].tolist() == [4]


class TestAgreement:

    @pytest.mark.unit
    def test_ari_values(self):
        assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
        assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5)

    @pytest.mark.unit
    def test_ari_length(self):
        with pytest.raises(LengthMismatch):
            adjusted_rand_index([0, 1], [0, 1, 1])
        with pytest.raises(LengthMismatch):
            adjusted_rand_index([0], [0])

    @pytest.mark.unit
    def test_stability_on_blobs(self, blobs):
        report = stability(blobs[0], 4, n_runs=5, threads=2)

        assert report.n_runs == 5
        assert report.mean_ari > 0.99
        assert report.inertias[report.reference_seed] == min(report.inertias)
        assert report.aris[report.reference_seed] == 1.0

    @pytest.mark.slow
    def test_stability_large(self):
        features, _ = gen_clustered_features(ClusterSpec(seed=4, n=20000, k=4))

        report = stability(features, 4, n_runs=50, threads=4)

        assert report.mean_ari >= 0.99
        assert report.sd_ari <= 0.01

    @pytest.mark.unit
    def test_centroid_summary(self):
        standardized = pd.DataFrame({"a": [1.0, 3.0, -2.0], "b": [0.0, 2.0, 4.0]})
        model, _ = kmeans_fit(standardized, 2, seed=0)

        summary = centroid_summary(model, [0, 0, 1], standardized)

        assert summary.index.name == "cluster"
        assert summary.loc[0].tolist() == [2.0, 1.0]
        assert summary.loc[1].tolist() == [-2.0, 4.0]
