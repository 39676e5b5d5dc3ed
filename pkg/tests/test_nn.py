import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedconf.errors import ConfigError, DomainError, FormatError, NumericError, ShapeError
from fedconf.nn import (
    Gradients,
    LayerSpec,
    MlpModel,
    OptimizerState,
    apply_update,
    backward,
    flatten_params,
    forward,
    grad_check,
    init_model,
    load_model,
    loss_and_grads,
    make_optimizer,
    mlp_specs,
    param_count,
    rmse_loss,
    save_model,
    unflatten_params,
)
from fedconf.tensor import SeededRng


def small_model(seed, dims=(4, 6, 5, 1)):
    return init_model(mlp_specs(dims), SeededRng(seed))


def linear_model(weights, bias=0.0):
    w = np.array(weights, dtype=float).reshape(-1, 1)
    return MlpModel((LayerSpec(w.shape[0], 1, "identity"),), [w], [np.array([[bias]])])


class TestInit:
    def test_single_layer_shapes(self):
        m = init_model([LayerSpec(3, 1, "identity")], SeededRng(0))
        assert m.weights[0].shape == (3, 1)
        assert m.biases[0].shape == (1, 1)
        assert m.biases[0][0, 0] == 0.0

    def test_deterministic(self):
        a, b = small_model(11), small_model(11)
        np.testing.assert_array_equal(flatten_params(a), flatten_params(b))

    def test_he_stddev(self):
        m = init_model([LayerSpec(100, 100), LayerSpec(100, 1, "identity")], SeededRng(1))
        assert abs(m.weights[0].std() - math.sqrt(2 / 100)) < 0.1 * math.sqrt(2 / 100)

    @pytest.mark.parametrize(
        "specs",
        [
            [LayerSpec(3, 4), LayerSpec(5, 1, "identity")],
            [LayerSpec(3, 4), LayerSpec(4, 2, "identity")],
            [LayerSpec(3, 4), LayerSpec(4, 1, "relu")],
            [LayerSpec(3, 4, "identity"), LayerSpec(4, 1, "identity")],
            [LayerSpec(3, 4, "tanh"), LayerSpec(4, 1, "identity")],
        ],
    )
    def test_bad_chain_rejected(self, specs):
        with pytest.raises(ConfigError):
            init_model(specs, SeededRng(0))


class TestForward:
    def test_hand_computation(self):
        assert forward(linear_model([1, 1]), np.array([[1.0, 2.0]])).output.tolist() == [[3.0]]

    def test_zero_model(self):
        m = small_model(0)
        m = unflatten_params(m.specs, np.zeros(m.n_params))
        trace = forward(m, SeededRng(1).normal(7, 4))
        assert np.all(trace.output == 0) and np.all(trace.penultimate == 0)

    def test_matches_straight_line_oracle(self):
        m = small_model(3)
        x = SeededRng(4).normal(9, 4)
        (w1, w2, w3), (b1, b2, b3) = m.weights, m.biases
        h1 = np.maximum(x @ w1 + b1, 0)
        h2 = np.maximum(h1 @ w2 + b2, 0)
        out = h2 @ w3 + b3
        trace = forward(m, x)
        np.testing.assert_allclose(trace.output, out, atol=1e-12, rtol=0)
        np.testing.assert_allclose(trace.penultimate, h2, atol=1e-12, rtol=0)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            forward(small_model(0), np.ones((2, 3)))

    @settings(max_examples=20)
    @given(st.integers(0, 10_000))
    def test_penultimate_nonnegative(self, seed):
        trace = forward(small_model(seed), SeededRng(seed + 1).normal(5, 4, 0, 3))
        assert np.all(trace.penultimate >= 0)


class TestRmse:
    def test_identity_case(self):
        loss, grad = rmse_loss(np.ones((3, 1)), np.ones((3, 1)))
        assert loss == 0.0 and np.all(grad == 0)

    def test_direct_arithmetic(self):
        loss, _ = rmse_loss(np.array([[1.0], [2.0]]), np.zeros((2, 1)))
        assert loss == pytest.approx(math.sqrt(5 / 2), abs=1e-12)
        assert loss == pytest.approx(1.581139, abs=1e-6)

    def test_algebraic_identity(self):
        rng = SeededRng(5)
        a, b = rng.normal(6, 3), rng.normal(6, 3)
        loss, _ = rmse_loss(a, b)
        assert abs(loss**2 * a.size - np.sum((a - b) ** 2)) < 1e-10

    def test_symmetry(self):
        rng = SeededRng(6)
        a, b = rng.normal(4, 2), rng.normal(4, 2)
        la, ga = rmse_loss(a, b)
        lb, gb = rmse_loss(b, a)
        assert la == lb
        np.testing.assert_array_equal(ga, -gb)

    def test_gradient_by_finite_differences(self):
        rng = SeededRng(7)
        a, b = rng.normal(3, 2), rng.normal(3, 2)
        _, g = rmse_loss(a, b)
        h = 1e-6
        for idx in np.ndindex(a.shape):
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            fd = (rmse_loss(ap, b)[0] - rmse_loss(am, b)[0]) / (2 * h)
            assert abs(fd - g[idx]) < 1e-8

    def test_errors(self):
        with pytest.raises(ShapeError):
            rmse_loss(np.ones((2, 1)), np.ones((3, 1)))
        with pytest.raises(DomainError):
            rmse_loss(np.ones((0, 1)), np.ones((0, 1)))


class TestBackward:
    def test_zero_output_grad(self):
        m = small_model(1)
        trace = forward(m, SeededRng(2).normal(4, 4))
        g = backward(m, trace, np.zeros((4, 1)))
        assert all(np.all(w == 0) for w in g.weights + g.biases)

    def test_linear_mse_closed_form(self):
        rng = SeededRng(3)
        x, y = rng.normal(10, 3), rng.normal(10, 1)
        m = linear_model(rng.normal(3, 1).ravel(), 0.3)
        _, g = loss_and_grads(m, x, y, loss="mse")
        pred = x @ m.weights[0] + m.biases[0]
        np.testing.assert_allclose(g.weights[0], (2 / 10) * x.T @ (pred - y), atol=1e-10, rtol=0)

    def test_shape_error(self):
        m = small_model(1)
        trace = forward(m, np.ones((4, 4)))
        with pytest.raises(ShapeError):
            backward(m, trace, np.zeros((3, 1)))


class TestGradCheck:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_models(self, seed):
        rng = SeededRng(seed).split("case")
        depth = 1 + seed % 3
        dims = [4] + [int(3 + (seed * 7 + i) % 5) for i in range(depth)] + [1]
        m = init_model(mlp_specs(dims), rng.split("model"))
        x, y = rng.split("x").normal(6, 4), rng.split("y").normal(6, 1)
        assert grad_check(m, x, y) < 1e-4

    def test_linear_quadratic(self):
        rng = SeededRng(1)
        m = linear_model(rng.normal(4, 1).ravel(), 0.1)
        assert grad_check(m, rng.normal(8, 4), rng.normal(8, 1), loss="mse") < 1e-7

    def test_zero_input_is_finite(self):
        m = small_model(2)
        r = grad_check(m, np.zeros((3, 4)), np.ones((3, 1)))
        assert math.isfinite(r)


class TestApplyUpdate:
    def test_sgd_arithmetic(self):
        m = linear_model([1.0])
        g = Gradients([np.array([[1.0]])], [np.array([[0.0]])])
        new, opt = apply_update(m, g, OptimizerState("sgd", 0.1))
        assert new.weights[0][0, 0] == pytest.approx(0.9, abs=1e-15)
        assert opt.step == 1
        assert m.weights[0][0, 0] == 1.0  # input untouched

    @pytest.mark.parametrize("kind", ["sgd", "adam"])
    def test_zero_gradient_fixed_point(self, kind):
        m = small_model(4)
        zero = Gradients([np.zeros_like(w) for w in m.weights], [np.zeros_like(b) for b in m.biases])
        new, _ = apply_update(m, zero, make_optimizer(m, kind, 0.1, 0.0))
        np.testing.assert_array_equal(flatten_params(new), flatten_params(m))

    def test_adam_first_step(self):
        # hand-evaluated: m_hat = g = 1, v_hat = g^2 = 1, step = -lr * 1 / (1 + eps)
        m = linear_model([0.5])
        g = Gradients([np.array([[1.0]])], [np.array([[0.0]])])
        opt = make_optimizer(m, "adam", 1e-3, 0.0, beta1=0.9, beta2=0.999, eps=1e-8)
        new, opt = apply_update(m, g, opt)
        delta = new.weights[0][0, 0] - 0.5
        assert delta == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)
        assert delta == pytest.approx(-9.99999e-4, abs=1e-9)

    def test_adam_decoupled_weight_decay(self):
        m = linear_model([2.0])
        zero = Gradients([np.zeros((1, 1))], [np.zeros((1, 1))])
        new, _ = apply_update(m, zero, make_optimizer(m, "adam", 0.1, 0.01))
        assert new.weights[0][0, 0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, abs=1e-15)

    def test_step_counter(self):
        m = small_model(5)
        x, y = SeededRng(1).normal(4, 4), SeededRng(2).normal(4, 1)
        opt = make_optimizer(m, "adam")
        for i in range(3):
            _, g = loss_and_grads(m, x, y)
            m, opt = apply_update(m, g, opt)
            assert opt.step == i + 1
            assert all(a.shape == p.shape for a, p in zip(opt.m, m.weights + m.biases))

    def test_non_finite_gradient_names_layer(self):
        m = small_model(6)
        g = Gradients([np.zeros_like(w) for w in m.weights], [np.zeros_like(b) for b in m.biases])
        g.weights[1][0, 0] = np.nan
        with pytest.raises(NumericError, match="layer 1"):
            apply_update(m, g, OptimizerState("sgd", 0.1))

    @pytest.mark.parametrize("seed", range(10))
    def test_small_sgd_step_decreases_loss(self, seed):
        m = small_model(seed)
        rng = SeededRng(seed).split("data")
        x, y = rng.normal(8, 4), rng.normal(8, 1)
        before, g = loss_and_grads(m, x, y)
        new, _ = apply_update(m, g, OptimizerState("sgd", 1e-6))
        after, _ = loss_and_grads(new, x, y)
        assert after < before


class TestFlatten:
    def test_round_trip_bit_exact(self):
        m = small_model(8)
        back = unflatten_params(m.specs, flatten_params(m))
        for a, b in zip(m.weights + m.biases, back.weights + back.biases):
            np.testing.assert_array_equal(a, b)

    def test_order_layer_major_weights_then_bias(self):
        specs = mlp_specs((2, 2, 1))
        m = MlpModel(specs, [np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[7.0], [8.0]])],
                     [np.array([[5.0, 6.0]]), np.array([[9.0]])])
        assert flatten_params(m).tolist() == [1, 2, 3, 4, 5, 6, 7, 8, 9]

    def test_length(self):
        m = small_model(0, (8, 64, 32, 16, 1))
        assert flatten_params(m).size == sum(i * o + o for i, o in [(8, 64), (64, 32), (32, 16), (16, 1)])
        assert param_count(m.specs) == m.n_params

    def test_length_mismatch(self):
        m = small_model(0)
        with pytest.raises(ShapeError):
            unflatten_params(m.specs, np.zeros(m.n_params - 1))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = small_model(9)
        save_model(m, tmp_path / "m.txt")
        back = load_model(tmp_path / "m.txt")
        assert back.specs == m.specs
        np.testing.assert_array_equal(flatten_params(back), flatten_params(m))

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.txt").write_text("hello\n")
        with pytest.raises(FormatError):
            load_model(tmp_path / "bad.txt")
