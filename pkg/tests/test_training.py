"""Training-loop tests: mining weights, loss, gradients, Adam, schedule,
determinism, divergence guard, and checkpoint persistence."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import gradient_check
from xmadapter import dataio, training
from xmadapter.adapter import HyperParams, infer_logits, prepare_inference
from xmadapter.cache import CacheModel, init_projection, one_hot
from xmadapter.errors import (
    BadMagicError,
    ShapeError,
    TrainingDivergenceError,
)
from xmadapter.training import (
    AdapterParams,
    OptimizerState,
    adam_step,
    backward,
    cosine_lr,
    hard_example_weights,
    load_checkpoint,
    save_checkpoint,
    train,
    weighted_ce_loss,
)


@pytest.fixture
def small_bundle():
    return dataio.generate_synthetic(4, 4, 8, 4, 3.0, 0.2, seed=31)


@pytest.fixture
def small_split(small_bundle):
    return dataio.sample_few_shot(small_bundle, 4, seed=0)


class TestHardExampleWeights:
    def test_equal_affinities_give_exactly_half(self):
        rng = np.random.default_rng(42)
        a = rng.uniform(-1, 1, size=(5, 7))
        np.testing.assert_array_equal(hard_example_weights(a, a.copy()), 0.5)

    def test_saturation_toward_one(self):
        a = np.full((2, 6), 10.0)
        t = np.full((2, 6), -10.0)
        w = hard_example_weights(a, t)
        np.testing.assert_allclose(w, 1.0, atol=1e-4)
        assert np.all(w < 1.0)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(43)
        a = rng.uniform(-1, 1, size=(2, 6))
        t = rng.uniform(-1, 1, size=(2, 6))
        w = hard_example_weights(a, t)
        for b in range(2):
            total = 0.0
            for n in range(6):
                diff = abs(a[b, n] - t[b, n])
                total += 1.0 / (1.0 + math.exp(-diff))
            assert w[b] == pytest.approx(total / 6, abs=1e-12)

    @given(
        arrays(np.float64, (4, 9),
               elements=st.floats(-1, 1, allow_nan=False)),
        arrays(np.float64, (4, 9),
               elements=st.floats(-1, 1, allow_nan=False)),
    )
    @settings(max_examples=50, deadline=None)
    def test_bounds_property(self, a, t):
        w = hard_example_weights(a, t)
        assert np.all(w >= 0.5)
        assert np.all(w < 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hard_example_weights(np.ones((2, 3)), np.ones((3, 2)))


class TestWeightedCeLoss:
    def test_uniform_probabilities_give_log_n(self):
        logits = np.zeros((3, 5))  # softmax -> uniform over 5 classes
        weights = np.array([0.5, 0.7, 0.9])
        loss = weighted_ce_loss(logits, np.array([0, 2, 4]), weights)
        assert loss == pytest.approx(math.log(5) * weights.mean(), abs=1e-12)

    def test_one_hot_correct_probabilities_give_zero(self):
        # Raw-log mode reads the logits as probabilities directly.
        logits = np.eye(4)
        labels = np.arange(4)
        loss = weighted_ce_loss(
            logits, labels, np.full(4, 0.8), raw_log_ce=True
        )
        assert loss == 0.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(44)
        logits = rng.normal(size=(4, 3))
        labels = rng.integers(0, 3, size=4)
        weights = rng.uniform(0.5, 1.0, size=4)
        loss = weighted_ce_loss(logits, labels, weights)
        total = 0.0
        for b in range(4):
            exps = [math.exp(v) for v in logits[b]]
            p = exps[labels[b]] / sum(exps)
            total += weights[b] * (-math.log(p))
        assert loss == pytest.approx(total / 4, abs=1e-12)

    def test_class_scale_divides_by_class_count(self):
        rng = np.random.default_rng(45)
        logits = rng.normal(size=(4, 5))
        labels = rng.integers(0, 5, size=4)
        weights = np.full(4, 0.6)
        plain = weighted_ce_loss(logits, labels, weights)
        scaled = weighted_ce_loss(logits, labels, weights, class_scale=True)
        assert scaled == pytest.approx(plain / 5, abs=1e-12)

    def test_weighted_below_unweighted(self):
        rng = np.random.default_rng(46)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        weights = rng.uniform(0.5, 1.0 - 1e-9, size=6)
        weighted = weighted_ce_loss(logits, labels, weights)
        unweighted = weighted_ce_loss(logits, labels, np.ones(6))
        assert weighted <= unweighted

    def test_huge_logits_stay_finite(self):
        logits = np.array([[1e6, 0.0], [0.0, 1e6]])
        loss = weighted_ce_loss(logits, np.array([1, 1]), np.ones(2))
        assert math.isfinite(loss)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            weighted_ce_loss(np.zeros((2, 3)), np.array([0, 3]), np.ones(2))

    def test_non_finite_logits(self):
        with pytest.raises(ValueError):
            weighted_ce_loss(
                np.array([[np.inf, 0.0]]), np.array([0]), np.ones(1)
            )


class TestBackward:
    def test_gradcheck_default_config(self):
        errors, worst = gradient_check(HyperParams(d=4))
        assert worst < 1e-4, errors

    def test_gradcheck_learned_gamma(self):
        errors, worst = gradient_check(HyperParams(d=4, learn_gamma=True))
        assert worst < 1e-4, errors
        assert "gamma_logit" in errors

    def test_gradcheck_pre_aggregate(self):
        errors, worst = gradient_check(
            HyperParams(d=4, phi_order="pre_aggregate")
        )
        assert worst < 1e-4, errors

    def test_gradcheck_mask_self(self):
        errors, worst = gradient_check(HyperParams(d=4, mask_self=True))
        assert worst < 1e-4, errors

    def test_gradcheck_hidden_layer(self):
        # The tiny-norm projections of a freshly initialized two-layer head
        # give the loss surface large curvature, so the difference step
        # shrinks to keep the truncation error below the gate.
        errors, worst = gradient_check(HyperParams(d=4, hidden_dim=5), h=1e-6)
        assert worst < 1e-4, errors

    def test_gamma_one_gives_exact_zero_net_gradients(self, small_bundle,
                                                      small_split):
        hyper = HyperParams(gamma=1.0, d=4)
        rng = np.random.Generator(np.random.PCG64(0))
        params = training.init_params(small_bundle, small_split, hyper, rng)
        features, labels = dataio.gather_split(small_bundle, small_split)
        _, grads = backward(params, small_bundle, features, labels, hyper)
        for name in ("meta_weight", "meta_bias", "img2txt_weight", "img2txt_bias"):
            np.testing.assert_array_equal(grads[name], 0.0)
        assert np.any(grads["cache_keys"] != 0.0)

    def test_saturated_correct_predictions_give_zero_gradients(self):
        # Orthogonal keys, the query IS a key, and a giant residual ratio:
        # softmax saturates to an exact one-hot on the true label, so the
        # loss is exactly zero and so is every gradient.
        bundle = dataio.generate_synthetic(2, 1, 4, 1, 3.0, 0.0, seed=7)
        split = dataio.sample_few_shot(bundle, 1, seed=0)
        hyper = HyperParams(gamma=1.0, alpha=1e5, d=2)
        rng = np.random.Generator(np.random.PCG64(1))
        params = training.init_params(bundle, split, hyper, rng)
        params.cache.image_keys[:] = np.eye(4)[:2]
        features = params.cache.image_keys.copy()
        labels = np.array([0, 1])
        stats, grads = backward(params, bundle, features, labels, hyper)
        assert stats.loss == 0.0
        for grad in grads.values():
            np.testing.assert_array_equal(grad, 0.0)

    def test_stats_track_batch(self, small_bundle, small_split):
        hyper = HyperParams(d=4)
        rng = np.random.Generator(np.random.PCG64(2))
        params = training.init_params(small_bundle, small_split, hyper, rng)
        features, labels = dataio.gather_split(small_bundle, small_split)
        stats, _ = backward(params, small_bundle, features, labels, hyper)
        assert stats.size == 16
        assert 0 <= stats.correct <= 16
        assert 0.5 <= stats.weight_mean < 1.0
        assert math.isfinite(stats.loss)


class TestAdam:
    def _one_param(self, value):
        cache = CacheModel(
            image_keys=np.array([[value]]),
            values=one_hot(np.array([0]), 1),
            entry_labels=np.array([0]),
        )
        rng = np.random.default_rng(0)
        return AdapterParams(
            cache=cache,
            meta_net=init_projection(1, 1, rng),
            img2txt=init_projection(1, 1, rng),
        )

    def test_zero_gradient_leaves_fresh_params_unchanged(self):
        params = self._one_param(0.7)
        state = OptimizerState(base_lr=1e-3, learning_rate=1e-3)
        adam_step(params, {"cache_keys": np.zeros((1, 1))}, state)
        assert params.cache.image_keys[0, 0] == 0.7
        assert state.step == 1

    def test_zero_gradient_decays_existing_moments(self):
        params = self._one_param(0.7)
        state = OptimizerState(base_lr=1e-3, learning_rate=1e-3)
        adam_step(params, {"cache_keys": np.array([[2.0]])}, state)
        m_before = state.first_moments["cache_keys"][0, 0]
        adam_step(params, {"cache_keys": np.zeros((1, 1))}, state)
        assert state.first_moments["cache_keys"][0, 0] == pytest.approx(
            m_before * training.ADAM_BETA1
        )

    def test_first_step_closed_form(self):
        # One Adam step from zero moments: p1 = p0 - lr * g / (|g| + eps).
        g = 0.37
        params = self._one_param(1.5)
        state = OptimizerState(base_lr=0.01, learning_rate=0.01)
        adam_step(params, {"cache_keys": np.array([[g]])}, state)
        expected = 1.5 - 0.01 * g / (abs(g) + training.ADAM_EPS)
        assert params.cache.image_keys[0, 0] == pytest.approx(expected, abs=1e-15)

    def test_first_step_direction_is_negative_sign(self):
        for g in (0.5, -0.2, 3.0):
            params = self._one_param(0.0)
            state = OptimizerState(base_lr=0.01, learning_rate=0.01)
            adam_step(params, {"cache_keys": np.array([[g]])}, state)
            moved = params.cache.image_keys[0, 0]
            assert math.copysign(1, moved) == -math.copysign(1, g)
            assert abs(moved) == pytest.approx(0.01, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        params = self._one_param(0.0)
        state = OptimizerState(base_lr=0.01, learning_rate=0.01)
        with pytest.raises(ShapeError):
            adam_step(params, {"cache_keys": np.zeros((2, 2))}, state)


class TestCosineSchedule:
    def test_start_at_base(self):
        assert cosine_lr(1e-3, 0, 19) == 1e-3

    def test_final_epoch_is_zero(self):
        assert cosine_lr(1e-3, 19, 19) == 0.0

    def test_midpoint_is_half(self):
        assert cosine_lr(2.0, 5, 10) == pytest.approx(1.0, abs=1e-15)

    def test_monotone_decreasing(self):
        values = [cosine_lr(1.0, t, 20) for t in range(21)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_single_epoch_uses_base(self):
        assert cosine_lr(1e-3, 0, 0) == 1e-3


class TestTrainLoop:
    def test_zero_epochs_returns_initial_params(self, small_bundle, small_split):
        hyper = HyperParams(d=4)
        params, report = train(
            small_bundle, small_split, hyper, epochs=0, batch_size=4, seed=9
        )
        assert report.epochs == []
        rng = np.random.Generator(np.random.PCG64(9))
        fresh = training.init_params(small_bundle, small_split, hyper, rng)
        np.testing.assert_array_equal(
            params.cache.image_keys, fresh.cache.image_keys
        )
        np.testing.assert_array_equal(params.meta_net.weight, fresh.meta_net.weight)
        assert report.final_test_accuracy is not None

    def test_same_seed_bit_identical_report(self, small_bundle, small_split):
        hyper = HyperParams(d=4)
        _, a = train(small_bundle, small_split, hyper, epochs=3, batch_size=4, seed=5)
        _, b = train(small_bundle, small_split, hyper, epochs=3, batch_size=4, seed=5)
        assert a.to_json() == b.to_json()

    def test_different_seed_differs(self, small_bundle, small_split):
        hyper = HyperParams(d=4)
        _, a = train(small_bundle, small_split, hyper, epochs=3, batch_size=4, seed=5)
        _, b = train(small_bundle, small_split, hyper, epochs=3, batch_size=4, seed=6)
        assert a.to_json() != b.to_json()

    def test_report_structure(self, small_bundle, small_split):
        hyper = HyperParams(d=4)
        _, report = train(
            small_bundle, small_split, hyper, epochs=4, batch_size=4, seed=1
        )
        assert len(report.epochs) == 4
        assert [e.epoch for e in report.epochs] == [0, 1, 2, 3]
        assert report.epochs[0].learning_rate == 1e-3
        assert report.epochs[-1].learning_rate == 0.0
        assert report.config["batch_size"] == 4
        assert report.seed == 1

    def test_loss_decreases_on_default_bundle(self):
        # Smoke property on the default-scale synthetic bundle.
        bundle = dataio.generate_synthetic(16, 16, 64, 4, 4.0, 0.0, seed=0)
        split = dataio.sample_few_shot(bundle, 16, seed=0)
        _, report = train(bundle, split, HyperParams(), epochs=5, seed=0)
        assert report.epochs[4].weighted_loss < report.epochs[0].weighted_loss

    def test_separable_bundle_reaches_train_accuracy(self):
        # Calibrated once: separation 7 saturates by epoch 20 (frozen).
        bundle = dataio.generate_synthetic(16, 16, 64, 8, 7.0, 0.0, seed=0)
        split = dataio.sample_few_shot(bundle, 16, seed=0)
        _, report = train(bundle, split, HyperParams(), epochs=20, seed=0)
        assert report.epochs[-1].train_accuracy >= 0.95

    def test_divergence_guard_fires(self, small_bundle, small_split):
        with pytest.raises(TrainingDivergenceError) as excinfo:
            train(
                small_bundle, small_split, HyperParams(d=4),
                epochs=2, batch_size=4, seed=0, base_lr=1e8,
            )
        assert excinfo.value.epoch == 0

    def test_learned_gamma_moves(self, small_bundle, small_split):
        hyper = HyperParams(d=4, learn_gamma=True)
        params, _ = train(
            small_bundle, small_split, hyper, epochs=3, batch_size=4, seed=2
        )
        initial = math.log(0.7 / 0.3)
        assert params.gamma_logit is not None
        assert float(params.gamma_logit) != pytest.approx(initial, abs=1e-12)


class TestCheckpoints:
    def _blended(self, bundle, params, hyper):
        state = prepare_inference(
            bundle, params.cache, (params.meta_net, params.img2txt), hyper,
            gamma_logit=params.gamma_logit_value(),
        )
        return infer_logits(state, bundle.test_features.astype(np.float64)).blended

    def test_f32_round_trip_logits_close(self, small_bundle, small_split, tmp_path):
        hyper = HyperParams(d=4)
        params, _ = train(
            small_bundle, small_split, hyper, epochs=2, batch_size=4, seed=3
        )
        path = tmp_path / "model.xmck"
        save_checkpoint(params, hyper, path, dtype="f32")
        loaded, hyper2 = load_checkpoint(path)
        assert hyper2 == hyper
        np.testing.assert_allclose(
            self._blended(small_bundle, params, hyper),
            self._blended(small_bundle, loaded, hyper2),
            atol=1e-6,
        )

    def test_f64_round_trip_exact(self, small_bundle, small_split, tmp_path):
        hyper = HyperParams(d=4, learn_gamma=True)
        params, _ = train(
            small_bundle, small_split, hyper, epochs=2, batch_size=4, seed=3
        )
        path = tmp_path / "model.xmck"
        save_checkpoint(params, hyper, path, dtype="f64")
        loaded, hyper2 = load_checkpoint(path)
        np.testing.assert_array_equal(
            self._blended(small_bundle, params, hyper),
            self._blended(small_bundle, loaded, hyper2),
        )
        assert float(loaded.gamma_logit) == float(params.gamma_logit)
        np.testing.assert_array_equal(
            loaded.cache.entry_labels, params.cache.entry_labels
        )

    def test_hidden_layer_round_trip(self, small_bundle, small_split, tmp_path):
        hyper = HyperParams(d=4, hidden_dim=3)
        params, _ = train(
            small_bundle, small_split, hyper, epochs=1, batch_size=4, seed=3
        )
        path = tmp_path / "model.xmck"
        save_checkpoint(params, hyper, path, dtype="f64")
        loaded, _ = load_checkpoint(path)
        np.testing.assert_array_equal(
            loaded.meta_net.hidden_weight, params.meta_net.hidden_weight
        )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.xmck"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(BadMagicError):
            load_checkpoint(path)


class TestParameterAccounting:
    def test_documented_shape_formula(self):
        from xmadapter.evaluation import count_parameters

        counts = count_parameters(16 * 1000, 1024, 256)
        assert counts["cache"] == 16_384_000
        assert counts["projections"] == 2 * (1024 * 256 + 256)
        assert counts["total"] == 16_908_800

    def test_params_match_analytic(self, small_bundle, small_split):
        from xmadapter.evaluation import params_parameter_count

        hyper = HyperParams(d=4, learn_gamma=True)
        rng = np.random.Generator(np.random.PCG64(0))
        params = training.init_params(small_bundle, small_split, hyper, rng)
        counts = params_parameter_count(params)
        manual = sum(t.size for t in params.named_tensors().values())
        assert counts["total"] == manual
