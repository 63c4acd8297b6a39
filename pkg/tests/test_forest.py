"""Tests for the CART trees, the bagged forest and the ADLS1 container."""

import struct

import numpy as np
import pytest
from pydantic import ValidationError

from adls.errors import CorruptError, DimensionError, FitError, FormatError, InsufficientEnsembleError
from adls.forest import (
    MAGIC,
    RegressionForest,
    deserialize_forest,
    ensemble_variance,
    fit_forest,
    fit_tree,
    load_forest,
    predict_mean,
    predict_per_tree,
    save_forest,
    serialize_forest,
)
from adls.models import Scenario


def _linear_data(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    X = rng.uniform(-1, 1, size=(n, 3))
    return X, 3.0 * X[:, 0] - 2.0 * X[:, 1] + 0.5


class TestFitTree:
    def test_constant_target_is_single_leaf(self, rng):
        X = rng.random((50, 4))
        tree = fit_tree(X, np.full(50, 7.25))
        assert tree.n_nodes == 1
        assert np.all(tree.predict(X) == 7.25)

    def test_interpolates_training_data(self, rng):
        X = rng.random((200, 2))
        y = rng.random(200)
        tree = fit_tree(X, y)
        np.testing.assert_array_equal(tree.predict(X), y)

    def test_single_split(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        tree = fit_tree(X, np.array([1.0, 1.0, 5.0, 5.0]))
        assert tree.n_leaves == 2
        assert tree.feature[0] == 0
        assert tree.threshold[0] == 1.5
        assert tree.predict(np.array([[1.5], [1.6]])).tolist() == [1.0, 5.0]

    def test_tie_goes_to_lowest_feature(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0]])
        tree = fit_tree(X, np.array([0.0, 1.0]))
        assert tree.feature[0] == 0

    def test_duplicate_features_give_mean_leaf(self):
        X = np.zeros((4, 2))
        tree = fit_tree(X, np.array([1.0, 2.0, 3.0, 4.0]))
        assert tree.n_nodes == 1
        assert tree.value[0] == 2.5

    def test_leaf_counts_cover_samples(self, rng):
        X = rng.random((64, 3))
        tree = fit_tree(X, rng.random(64))
        assert tree.count[0] == 64
        assert tree.count[tree.feature < 0].sum() == 64

    def test_max_features_needs_rng(self, rng):
        with pytest.raises(FitError):
            fit_tree(rng.random((10, 4)), rng.random(10), max_features=2)

    def test_max_features_still_fits(self, rng):
        X = rng.random((100, 4))
        y = X[:, 2] * 10
        tree = fit_tree(X, y, np.random.default_rng(0), max_features=1)
        np.testing.assert_allclose(tree.predict(X), y)

    @pytest.mark.parametrize("X,y", [
        (np.empty((0, 2)), np.empty(0)),
        (np.ones((3, 2)), np.ones(2)),
        (np.ones((2, 2)), np.array([1.0, np.nan])),
    ])
    def test_invalid_input(self, X, y):
        with pytest.raises(FitError):
            fit_tree(X, y)


class TestForest:
    def test_constant_target_zero_error(self, rng):
        X = rng.random((100, 5))
        forest = fit_forest(X, np.full(100, 3.0), n_trees=10, seed=1)
        assert np.sqrt(np.mean((predict_mean(forest, X) - 3.0) ** 2)) == 0.0

    def test_mean_of_trees_is_predict_mean(self, rng):
        X, y = _linear_data(rng, 200)
        forest = fit_forest(X, y, n_trees=8, seed=2)
        per_tree = predict_per_tree(forest, X)
        assert per_tree.shape == (200, 8)
        np.testing.assert_array_equal(per_tree.mean(axis=1), predict_mean(forest, X))

    def test_linear_target_generalizes(self):
        rng = np.random.default_rng(11)
        X, y = _linear_data(rng, 1000)
        X_test, y_test = _linear_data(rng, 500)
        forest = fit_forest(X, y, n_trees=100, seed=3)
        pred = predict_mean(forest, X_test)
        r2 = 1 - np.sum((pred - y_test) ** 2) / np.sum((y_test - y_test.mean()) ** 2)
        assert r2 > 0.9

    def test_deterministic_per_seed(self, rng):
        X, y = _linear_data(rng, 150)
        a = predict_per_tree(fit_forest(X, y, 5, seed=9), X)
        b = predict_per_tree(fit_forest(X, y, 5, seed=9), X)
        np.testing.assert_array_equal(a, b)

    def test_threads_match_serial(self, rng):
        X, y = _linear_data(rng, 150)
        serial = fit_forest(X, y, 6, seed=4)
        threaded = fit_forest(X, y, 6, seed=4, threads=3)
        assert serialize_forest(serial) == serialize_forest(threaded)

    def test_trees_differ(self, rng):
        X, y = _linear_data(rng, 150)
        per_tree = predict_per_tree(fit_forest(X, y, 4, seed=5), X)
        assert not np.array_equal(per_tree[:, 0], per_tree[:, 1])

    def test_feature_count_mismatch(self, rng):
        X, y = _linear_data(rng, 50)
        forest = fit_forest(X, y, 2, seed=0)
        with pytest.raises(DimensionError):
            predict_per_tree(forest, X[:, :2])

    def test_needs_a_tree(self, rng):
        with pytest.raises(FitError):
            fit_forest(rng.random((5, 2)), rng.random(5), n_trees=0, seed=0)

    def test_empty_forest_rejected(self):
        with pytest.raises(ValidationError):
            RegressionForest(trees=[], n_features=2)


class TestEnsembleVariance:
    def test_zero_iff_members_agree(self):
        per_tree = np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 3.0], [0.1, 0.1, 0.1]])
        variance = ensemble_variance(per_tree)
        assert variance[0] == 0.0 and variance[2] == 0.0
        assert variance[1] == pytest.approx(2 / 3)

    def test_population_variance(self, rng):
        per_tree = rng.random((20, 7))
        np.testing.assert_allclose(ensemble_variance(per_tree), per_tree.var(axis=1))

    def test_needs_two_members(self):
        with pytest.raises(InsufficientEnsembleError):
            ensemble_variance(np.ones((4, 1)))


class TestContainer:
    @pytest.fixture
    def forest(self, rng):
        X, y = _linear_data(rng, 80)
        return fit_forest(X, y, 3, seed=6)

    def test_round_trip(self, forest, rng):
        data = serialize_forest(forest, Scenario.D_ONLY)
        assert data.startswith(MAGIC)
        loaded, scenario = deserialize_forest(data)
        assert scenario is Scenario.D_ONLY
        X = rng.uniform(-1, 1, size=(30, 3))
        np.testing.assert_array_equal(predict_per_tree(loaded, X), predict_per_tree(forest, X))

    def test_no_scenario_tag(self, forest):
        assert deserialize_forest(serialize_forest(forest))[1] is None

    def test_save_load(self, forest, tmp_path):
        path = tmp_path / "f.adls"
        save_forest(forest, path, Scenario.RGBD)
        loaded, scenario = load_forest(path)
        assert scenario is Scenario.RGBD
        assert serialize_forest(loaded, scenario) == path.read_bytes()

    def test_bad_magic(self, forest):
        with pytest.raises(FormatError):
            deserialize_forest(b"XXXXX" + serialize_forest(forest)[5:])

    def test_bad_version(self, forest):
        data = bytearray(serialize_forest(forest))
        data[5] = 99
        with pytest.raises(FormatError):
            deserialize_forest(bytes(data))

    def test_truncated(self, forest):
        data = serialize_forest(forest)
        with pytest.raises(CorruptError):
            deserialize_forest(data[:-7])

    def test_trailing_bytes(self, forest):
        with pytest.raises(CorruptError):
            deserialize_forest(serialize_forest(forest) + b"\x00")

    def test_child_pointing_back_rejected(self, forest):
        data = bytearray(serialize_forest(forest))
        # header (16 bytes), node count (4), then the root's feature (4) and threshold (8)
        struct.pack_into("<I", data, 16 + 4 + 12, 0)
        with pytest.raises(CorruptError):
            deserialize_forest(bytes(data))

    def test_child_out_of_range_rejected(self, forest):
        data = bytearray(serialize_forest(forest))
        struct.pack_into("<I", data, 16 + 4 + 12 + 4, 10**6)
        with pytest.raises(CorruptError):
            deserialize_forest(bytes(data))
