"""Cache construction and projection-head behavior."""

import dataclasses

import numpy as np
import pytest

from xmadapter import cache as cache_mod
from xmadapter import dataio
from xmadapter.cache import (
    ProjectionNet,
    build_cache,
    init_projection,
    project_queries,
    text_entry_keys,
)
from xmadapter.errors import ShapeError


@pytest.fixture
def bundle():
    return dataio.generate_synthetic(4, 6, 8, 3, 3.0, 0.1, seed=13)


@pytest.fixture
def split(bundle):
    return dataio.sample_few_shot(bundle, 3, seed=2)


class TestBuildCache:
    def test_two_class_one_shot_values(self):
        b = dataio.generate_synthetic(2, 1, 8, 2, 3.0, 0.0, seed=0)
        s = dataio.sample_few_shot(b, 1, seed=0)
        model = build_cache(b, s)
        np.testing.assert_array_equal(model.values, [[1.0, 0.0], [0.0, 1.0]])

    def test_row_count_is_nk(self, bundle, split):
        model = build_cache(bundle, split)
        assert model.num_entries == 4 * 3

    def test_one_hot_row_sum_oracle(self, bundle, split):
        model = build_cache(bundle, split)
        ones = np.ones(bundle.num_classes)
        np.testing.assert_array_equal(model.values @ ones, np.ones(12))

    def test_keys_unit_norm(self, bundle, split):
        model = build_cache(bundle, split)
        np.testing.assert_allclose(
            np.linalg.norm(model.image_keys, axis=1), 1.0, atol=1e-6
        )

    def test_class_major_ordering(self, bundle, split):
        model = build_cache(bundle, split)
        np.testing.assert_array_equal(model.entry_labels, np.repeat(np.arange(4), 3))

    def test_independent_of_bundle_row_ordering(self, bundle, split):
        model = build_cache(bundle, split)
        # Permute the training pool and remap the split indices accordingly.
        rng = np.random.default_rng(3)
        perm = rng.permutation(bundle.num_train)
        inverse = np.argsort(perm)
        shuffled = dataclasses.replace(
            bundle,
            train_features=bundle.train_features[perm],
            train_labels=bundle.train_labels[perm],
        )
        remapped = dataclasses.replace(
            split, selected_indices=inverse[split.selected_indices]
        )
        model2 = build_cache(shuffled, remapped)
        np.testing.assert_array_equal(model.image_keys, model2.image_keys)
        np.testing.assert_array_equal(model.values, model2.values)

    def test_validate_rejects_non_one_hot(self, bundle, split):
        model = build_cache(bundle, split)
        model.values[0, 0] = 0.5
        with pytest.raises(ShapeError):
            model.validate()


class TestTextEntryKeys:
    def test_same_label_entries_share_rows(self, bundle, split):
        rng = np.random.default_rng(0)
        net = init_projection(8, 5, rng)
        model = build_cache(bundle, split)
        keys = text_entry_keys(net, bundle, model)
        assert keys.shape == (12, 5)
        for i in range(model.num_entries):
            for j in range(model.num_entries):
                if model.entry_labels[i] == model.entry_labels[j]:
                    np.testing.assert_array_equal(keys[i], keys[j])

    def test_zero_net_gives_zero_matrix(self, bundle, split):
        net = ProjectionNet(weight=np.zeros((8, 5)), bias=np.zeros(5))
        model = build_cache(bundle, split)
        np.testing.assert_array_equal(
            text_entry_keys(net, bundle, model), np.zeros((12, 5))
        )

    def test_matches_per_entry_loop_oracle(self, bundle, split):
        rng = np.random.default_rng(1)
        net = init_projection(8, 5, rng)
        model = build_cache(bundle, split)
        keys = text_entry_keys(net, bundle, model)
        for i in range(model.num_entries):
            text_row = bundle.text_features[model.entry_labels[i]].astype(np.float64)
            expected = text_row @ net.weight + net.bias
            np.testing.assert_allclose(keys[i], expected, atol=1e-12)

    def test_distinct_rows_equal_class_count(self, bundle, split):
        rng = np.random.default_rng(2)
        net = init_projection(8, 5, rng)
        model = build_cache(bundle, split)
        keys = text_entry_keys(net, bundle, model)
        assert len({row.tobytes() for row in keys}) == bundle.num_classes

    def test_dim_mismatch(self, bundle, split):
        rng = np.random.default_rng(3)
        net = init_projection(9, 5, rng)
        model = build_cache(bundle, split)
        with pytest.raises(ShapeError):
            text_entry_keys(net, bundle, model)


class TestProjectQueries:
    def test_identity_weights_pass_through(self):
        net = ProjectionNet(weight=np.eye(6), bias=np.zeros(6))
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 6))
        np.testing.assert_allclose(project_queries(net, x), x, atol=1e-15)

    def test_zero_input_broadcasts_bias(self):
        rng = np.random.default_rng(5)
        net = init_projection(6, 4, rng)
        net.bias[:] = rng.normal(size=4)
        out = project_queries(net, np.zeros((3, 6)))
        for row in out:
            np.testing.assert_array_equal(row, net.bias)

    def test_matches_matmul_plus_bias_oracle(self):
        rng = np.random.default_rng(6)
        net = init_projection(6, 4, rng)
        net.bias[:] = rng.normal(size=4)
        x = rng.normal(size=(5, 6))
        expected = np.empty((5, 4))
        for i in range(5):
            for j in range(4):
                expected[i, j] = float(np.dot(x[i], net.weight[:, j])) + net.bias[j]
        np.testing.assert_allclose(project_queries(net, x), expected, atol=1e-12)

    def test_hidden_layer_forward(self):
        rng = np.random.default_rng(7)
        net = init_projection(6, 4, rng, hidden_dim=5)
        x = rng.normal(size=(3, 6))
        expected = np.tanh(x @ net.hidden_weight + net.hidden_bias) @ net.weight
        expected += net.bias
        np.testing.assert_allclose(project_queries(net, x), expected, atol=1e-12)


class TestInitProjection:
    def test_shapes_and_zero_bias(self):
        rng = np.random.default_rng(8)
        net = init_projection(10, 7, rng)
        assert net.weight.shape == (10, 7)
        np.testing.assert_array_equal(net.bias, np.zeros(7))
        assert net.hidden_weight is None

    def test_weight_scale_matches_std(self):
        rng = np.random.default_rng(9)
        net = init_projection(200, 100, rng, std=0.02)
        assert abs(float(net.weight.std()) - 0.02) < 0.002

    def test_is_finite(self):
        rng = np.random.default_rng(10)
        net = init_projection(4, 3, rng)
        assert net.is_finite()
        net.weight[0, 0] = np.nan
        assert not net.is_finite()
