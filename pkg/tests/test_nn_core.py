import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loadaboost.nn_core import (SCORE_EPS, AdamState, Batch, LayerSpec, ModelWeights, adam_step,
                                average_weights, bce_loss, forward, gradient, init_weights,
                                train_epochs)
from oracles import central_differences, forward_by_hand, relative_error, scalar_adam


def random_instance(rng, max_dims=(8, 5, 3), max_batch=8, binary=False):
    dims = [int(rng.integers(1, d + 1)) for d in max_dims] + [1]
    spec = LayerSpec(dims)
    w = init_weights(spec, int(rng.integers(1 << 30)))
    w = ModelWeights(w.values + rng.normal(0, 0.1, spec.n_params), spec)
    n = int(rng.integers(1, max_batch + 1))
    x = rng.integers(0, 2, (n, dims[0])) if binary else rng.normal(size=(n, dims[0]))
    return w, Batch(x, rng.integers(0, 2, n))


def preactivations_clear_of_kinks(w, x, margin=1e-3):
    h = np.asarray(x, dtype=np.float64)
    for W, b in w.layers()[:-1]:
        z = h @ W.T + b
        if np.any(np.abs(z) < margin):
            return False
        h = np.maximum(z, 0)
    return True


class TestLayerSpec:
    def test_paper_architecture_parameter_count(self):
        assert LayerSpec.for_features(2814).n_params == 56_571

    def test_smallest_network(self):
        assert LayerSpec((1, 1)).n_params == 2

    @pytest.mark.parametrize("dims", [(3,), (), (3, 0, 1)])
    def test_invalid(self, dims):
        with pytest.raises(ValueError):
            LayerSpec(dims)


class TestInitWeights:
    def test_length_for_paper_network(self):
        assert init_weights(LayerSpec.for_features(2814), 7).values.size == 56_571

    def test_single_unit_bias_is_zero(self):
        w = init_weights(LayerSpec((1, 1)), 3)
        assert w.values.size == 2
        assert w.values[1] == 0.0

    def test_deterministic(self):
        spec = LayerSpec((6, 4, 1))
        assert np.array_equal(init_weights(spec, 5).values, init_weights(spec, 5).values)
        assert not np.array_equal(init_weights(spec, 5).values, init_weights(spec, 6).values)

    def test_glorot_bounds_and_zero_biases(self):
        spec = LayerSpec((30, 20, 1))
        w = init_weights(spec, 0)
        for (W, b), fan_in, fan_out in zip(w.layers(), spec.dims[:-1], spec.dims[1:]):
            assert np.all(np.abs(W) <= math.sqrt(6 / (fan_in + fan_out)))
            assert np.all(b == 0)


class TestForward:
    def test_zero_weights_give_one_half(self):
        spec = LayerSpec((4, 3, 1))
        scores = forward(ModelWeights(np.zeros(spec.n_params), spec), np.ones((5, 4)))
        assert np.array_equal(scores, np.full(5, 0.5))

    def test_bias_only_network(self):
        w = ModelWeights(np.array([0.0, 1.3]), LayerSpec((1, 1)))
        expected = 1 / (1 + math.exp(-1.3))
        np.testing.assert_allclose(forward(w, [[0.0], [1.0], [7.0]]), expected, rtol=1e-15)

    def test_matches_hand_evaluation(self):
        rng = np.random.default_rng(11)
        spec = LayerSpec((5, 4, 3, 2, 1))
        w = ModelWeights(rng.normal(size=spec.n_params), spec)
        x = rng.normal(size=(3, 5))
        expected = forward_by_hand(list(w.values), spec.dims, x.tolist())
        np.testing.assert_allclose(forward(w, x), expected, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_weights(LayerSpec((3, 1)), 0), np.ones((2, 4)))

    def test_scores_are_clamped_away_from_0_and_1(self):
        w = ModelWeights(np.array([100.0, 0.0]), LayerSpec((1, 1)))
        s = forward(w, [[10.0], [-10.0]])
        assert s[0] == 1 - SCORE_EPS and s[1] == SCORE_EPS
        assert math.isfinite(bce_loss(s, [0, 1]))


class TestBceLoss:
    def test_half(self):
        assert bce_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_fit_is_near_zero(self):
        assert bce_loss([1.0, 0.0], [1, 0]) == pytest.approx(0.0, abs=1e-11)

    def test_two_examples(self):
        assert bce_loss([0.8, 0.3], [1, 0]) == pytest.approx(0.289909, abs=1e-6)
        assert bce_loss([0.8, 0.3], [1, 0]) == pytest.approx(
            (-math.log(0.8) - math.log(0.7)) / 2, rel=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            bce_loss([], [])


class TestGradient:
    def test_zero_input_kills_first_layer_weight_gradient(self):
        spec = LayerSpec((4, 3, 1))
        w = init_weights(spec, 1)
        w = ModelWeights(w.values + 0.2, spec)  # positive biases keep the hidden units alive
        g = gradient(w, Batch(np.zeros((3, 4)), [1, 0, 1]))
        w0, b0, b1 = spec.offsets()[0]
        assert np.all(g[w0:b0] == 0)
        assert np.any(g[b0:b1] != 0)

    def test_duplicate_rows_match_single_row(self):
        w = init_weights(LayerSpec((3, 2, 1)), 4)
        x = np.array([[1.0, 0.0, 1.0]])
        g1 = gradient(w, Batch(x, [1]))
        g2 = gradient(w, Batch(np.vstack([x, x]), [1, 1]))
        assert np.array_equal(g1, g2)

    def test_finite_differences_small_random(self):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 20:
            w, batch = random_instance(rng)
            if not preactivations_clear_of_kinks(w, batch.features):
                continue
            loss = lambda v: bce_loss(forward(ModelWeights(v, w.spec), batch.features), batch.labels)
            err = relative_error(gradient(w, batch), central_differences(loss, w.values))
            assert err.max() < 1e-5
            checked += 1

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gradient(init_weights(LayerSpec((3, 1)), 0), Batch(np.ones((2, 2)), [0, 1]))

    def test_small_steps_do_not_increase_loss(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            w, batch = random_instance(rng, binary=True)
            for eta in (1e-3, 1e-4):
                losses = []
                v = w.values.copy()
                for _ in range(10):
                    cur = ModelWeights(v, w.spec)
                    losses.append(bce_loss(forward(cur, batch.features), batch.labels))
                    v = v - eta * gradient(cur, batch)
                if all(b <= a + 1e-15 for a, b in zip(losses, losses[1:])):
                    break
            else:
                pytest.fail("loss increased under plain gradient descent even at eta/10")


class TestAdam:
    def test_zero_gradient_leaves_weights(self):
        w = init_weights(LayerSpec((3, 2, 1)), 0)
        state, w2 = adam_step(AdamState.fresh(w.values.size), w, np.zeros(w.values.size))
        assert np.array_equal(w.values, w2.values)
        assert state.step_count == 1

    @pytest.mark.parametrize("g", [1e-3, -0.02, 0.5, -7.0])
    def test_first_step_moves_by_eta_times_sign(self, g):
        w = ModelWeights(np.array([0.3, -0.1]), LayerSpec((1, 1)))
        _, w2 = adam_step(AdamState.fresh(2), w, np.full(2, g))
        np.testing.assert_allclose(w2.values - w.values, -1e-3 * np.sign(g), atol=1e-6)

    def test_against_scalar_oracle(self):
        g = 0.37
        w = ModelWeights(np.array([0.0, 0.0]), LayerSpec((1, 1)))
        state = AdamState.fresh(2)
        for gi in (g, -g):
            state, w = adam_step(state, w, np.full(2, gi))
        w_ref, m_ref, v_ref = scalar_adam([g, -g])
        assert state.step_count == 2
        np.testing.assert_allclose(state.m, m_ref, rtol=1e-14)
        np.testing.assert_allclose(state.m, (1 - 0.9) * (0.9 - 1) * g, rtol=1e-14)
        np.testing.assert_allclose(state.v, v_ref, rtol=1e-14)
        np.testing.assert_allclose(w.values, w_ref, rtol=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState.fresh(3), ModelWeights(np.zeros(2), LayerSpec((1, 1))), np.zeros(2))


def _count_steps(monkeypatch):
    import loadaboost.nn_core as core

    calls = []
    real = core.adam_step

    def counting(*a):
        calls.append(1)
        return real(*a)

    monkeypatch.setattr(core, "adam_step", counting)
    return calls


class TestTrainEpochs:
    @pytest.mark.parametrize("n,epochs,b,steps", [(300, 1, 30, 10), (5, 2, 30, 2), (31, 3, 10, 12)])
    def test_step_count(self, monkeypatch, n, epochs, b, steps):
        calls = _count_steps(monkeypatch)
        rng = np.random.default_rng(0)
        x, y = rng.integers(0, 2, (n, 4)), rng.integers(0, 2, n)
        w = init_weights(LayerSpec((4, 3, 1)), 0)
        _, state, _ = train_epochs(w, x, y, epochs, b, AdamState.fresh(w.values.size),
                                   np.random.default_rng(1))
        assert len(calls) == steps
        assert state.step_count == steps

    def test_bitwise_deterministic(self):
        rng = np.random.default_rng(3)
        x, y = rng.integers(0, 2, (50, 6)), rng.integers(0, 2, 50)
        w = init_weights(LayerSpec((6, 4, 1)), 9)
        runs = [train_epochs(w, x, y, 3, 7, AdamState.fresh(w.values.size),
                             np.random.default_rng(42)) for _ in range(2)]
        assert np.array_equal(runs[0][0].values, runs[1][0].values)
        assert runs[0][2] == runs[1][2]

    def test_reported_loss_is_full_dataset_loss(self):
        rng = np.random.default_rng(4)
        x, y = rng.integers(0, 2, (40, 5)), rng.integers(0, 2, 40)
        w = init_weights(LayerSpec((5, 3, 1)), 1)
        w2, _, loss = train_epochs(w, x, y, 2, 8, AdamState.fresh(w.values.size),
                                   np.random.default_rng(0))
        assert loss == bce_loss(forward(w2, x), y)

    def test_training_reduces_loss(self):
        rng = np.random.default_rng(6)
        x = rng.integers(0, 2, (200, 8))
        y = x[:, 0] | x[:, 1]
        w = init_weights(LayerSpec((8, 6, 1)), 0)
        before = bce_loss(forward(w, x), y)
        _, _, after = train_epochs(w, x, y, 20, 20, AdamState.fresh(w.values.size),
                                   np.random.default_rng(0))
        assert after < before / 2


class TestAverageWeights:
    def test_idempotent(self):
        w = init_weights(LayerSpec((3, 2, 1)), 0)
        assert np.array_equal(average_weights([w, w, w]).values, w.values)

    def test_two_vectors(self):
        spec = LayerSpec((1, 1))
        avg = average_weights([ModelWeights([0.0, 2.0], spec), ModelWeights([2.0, 0.0], spec)])
        assert np.array_equal(avg.values, [1.0, 1.0])

    def test_against_naive_sum(self):
        rng = np.random.default_rng(8)
        spec = LayerSpec((6, 4, 1))
        ws = [ModelWeights(rng.normal(size=spec.n_params), spec) for _ in range(5)]
        naive = [sum(w.values[i] for w in ws) / 5 for i in range(spec.n_params)]
        assert np.max(np.abs(average_weights(ws).values - naive)) < 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            average_weights([])
        with pytest.raises(ValueError):
            average_weights([init_weights(LayerSpec((2, 1)), 0), init_weights(LayerSpec((3, 1)), 0)])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, seed, k, shuffler):
        rng = np.random.default_rng(seed)
        spec = LayerSpec((4, 3, 1))
        ws = [ModelWeights(rng.normal(size=spec.n_params), spec) for _ in range(k)]
        perm = list(ws)
        shuffler.shuffle(perm)
        np.testing.assert_allclose(average_weights(ws).values, average_weights(perm).values,
                                   rtol=1e-15, atol=1e-15)
