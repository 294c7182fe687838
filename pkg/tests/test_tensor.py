"""Engine-level checks: forward oracles, finite-difference gradients,
optimizer arithmetic, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvxseg import tensor as T
from mvxseg.gradcheck import check_gradients, finite_difference, relative_error


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- linear

class TestLinear:
    def test_identity_weight_passes_input_through(self):
        x = T.constant(_rng().normal(size=(4, 3)))
        y = T.linear(x, T.constant(np.eye(3)), T.constant(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_zero_input_broadcasts_bias(self):
        b = np.array([1.5, -2.0])
        y = T.linear(T.constant(np.zeros((5, 3))), T.constant(np.zeros((3, 2))),
                     T.constant(b))
        np.testing.assert_allclose(y.data, np.tile(b, (5, 1)))

    def test_matches_triple_loop_oracle(self):
        rng = _rng(1)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=2)
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += x[i, k] * w[k, j]
                expected[i, j] += b[j]
        y = T.linear(T.constant(x), T.constant(w), T.constant(b))
        np.testing.assert_allclose(y.data, expected, atol=1e-6)

    def test_shape_mismatch_names_dims(self):
        with pytest.raises(ValueError, match="inner dimension"):
            T.linear(T.constant(np.zeros((2, 3))), T.constant(np.zeros((4, 2))))


# ---------------------------------------------------------------- activations

class TestActivations:
    def test_fixed_points(self):
        assert T.sigmoid(T.constant(np.zeros((1, 1)))).data[0, 0] == 0.5
        assert T.tanh(T.constant(np.zeros((1, 1)))).data[0, 0] == 0.0
        assert T.leaky_relu(T.constant(np.full((1, 1), -1.0))).data[0, 0] == -0.01

    def test_ranges(self):
        x = T.constant(_rng(2).normal(scale=3, size=(50, 4)))
        s = T.sigmoid(x).data
        t = T.tanh(x).data
        assert ((s > 0) & (s < 1)).all()
        assert ((t > -1) & (t < 1)).all()
        # saturated inputs still respect the closed bounds
        big = T.constant(np.array([[700.0, -700.0]]))
        assert (np.abs(T.tanh(big).data) <= 1).all()
        assert ((T.sigmoid(big).data >= 0) & (T.sigmoid(big).data <= 1)).all()

    @pytest.mark.parametrize("op", [T.sigmoid, T.tanh,
                                    lambda x: T.leaky_relu(x, 0.01)])
    def test_gradients_match_central_differences(self, op):
        rng = _rng(3)
        x = T.parameter(rng.normal(size=(20, 1)), dtype=np.float64)
        check_gradients(lambda: T.sum_all(op(x)), {"x": x}, tol=1e-6)


# ---------------------------------------------------------------- softmax family

class TestSoftmax:
    def test_equal_row_k5_gives_fifths(self):
        y = T.softmax_rows(T.constant(np.full((1, 5), 3.7)))
        np.testing.assert_allclose(y.data, 0.2)

    def test_k1_is_one(self):
        y = T.softmax_rows(T.constant(np.array([[123.0], [-999.0]])))
        np.testing.assert_array_equal(y.data, np.ones((2, 1)))

    def test_shift_invariance(self):
        rng = _rng(4)
        x = rng.normal(size=(6, 5))
        a = T.softmax_rows(T.constant(x)).data
        b = T.softmax_rows(T.constant(x + 17.3)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_log_softmax_equal_logits(self):
        y = T.log_softmax(T.constant(np.zeros((1, 2))))
        np.testing.assert_allclose(y.data, np.log(0.5))

    def test_log_softmax_consistent_with_softmax(self):
        rng = _rng(5)
        x = rng.normal(scale=5, size=(8, 4))
        np.testing.assert_allclose(np.exp(T.log_softmax(T.constant(x)).data),
                                   T.softmax_rows(T.constant(x)).data, atol=1e-6)

    @pytest.mark.parametrize("op", [T.softmax_rows, T.log_softmax])
    def test_gradcheck(self, op):
        rng = _rng(6)
        x = T.parameter(rng.normal(size=(5, 4)), dtype=np.float64)
        w = T.parameter(rng.normal(size=(4, 1)), dtype=np.float64)
        check_gradients(lambda: T.sum_all(T.matmul(op(x), w)), {"x": x, "w": w})

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8))
    def test_rows_normalize_property(self, row):
        y = T.softmax_rows(T.constant(np.array([row])))
        assert abs(y.data.sum() - 1.0) < 1e-6
        assert (y.data >= 0).all()
        z = T.log_softmax(T.constant(np.array([row])))
        assert abs(np.exp(z.data).sum() - 1.0) < 1e-6


# ---------------------------------------------------------------- backward

class TestBackward:
    def test_outer_product_structure(self):
        rng = _rng(7)
        w = T.parameter(rng.normal(size=(3, 4)), dtype=np.float64)
        x = rng.normal(size=(4, 2))
        loss = T.sum_all(T.matmul(w, T.constant(x)))
        grads = T.backward(loss, {"w": w})
        # d/dW sum(W x) = ones @ x^T, row-constant
        np.testing.assert_allclose(grads["w"], np.ones((3, 2)) @ x.T, atol=1e-12)

    def test_unused_parameter_gets_zero_gradient(self):
        a = T.parameter(np.ones((2, 2)))
        b = T.parameter(np.ones((2, 2)))
        loss = T.sum_all(T.mul(a, a))
        grads = T.backward(loss, {"a": a, "b": b})
        assert grads["b"].shape == (2, 2)
        np.testing.assert_array_equal(grads["b"], 0.0)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            T.backward(T.parameter(np.ones((2, 2))))

    def test_reused_tensor_accumulates(self):
        x = T.parameter(np.array([[3.0]]), dtype=np.float64)
        loss = T.sum_all(T.mul(x, x))
        grads = T.backward(loss, {"x": x})
        np.testing.assert_allclose(grads["x"], [[6.0]])

    def test_no_grad_suppresses_graph(self):
        x = T.parameter(np.ones((2, 2)))
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------- small primitives

class TestPrimitiveGradients:
    """Every differentiable primitive against central differences (64-bit)."""

    def _check(self, build, shapes, seed=0, tol=1e-4):
        rng = _rng(seed)
        params = {name: T.parameter(rng.normal(size=shape), dtype=np.float64)
                  for name, shape in shapes.items()}
        check_gradients(lambda: build(params), params, tol=tol)

    def test_arithmetic(self):
        self._check(lambda p: T.sum_all(T.div(T.mul(p["a"], p["b"]),
                                              T.add(T.mul(p["b"], p["b"]), 2.0))),
                    {"a": (3, 4), "b": (3, 4)})

    def test_abs_sqrt(self):
        rng = _rng(1)
        a = T.parameter(rng.uniform(0.5, 2.0, size=(3, 3)), dtype=np.float64)
        b = T.parameter(rng.normal(size=(3, 3)) + 3.0, dtype=np.float64)
        check_gradients(lambda: T.sum_all(T.mul(T.sqrt(a), T.absolute(b))),
                        {"a": a, "b": b})

    def test_reductions(self):
        self._check(lambda p: T.mul(T.mean_all(T.sum_axis(T.mul(p["a"], p["a"]), 1)), 2.0),
                    {"a": (4, 3)})
        self._check(lambda p: T.sum_all(T.sum_axis(p["a"], 0)), {"a": (4, 3)})

    def test_concat_slice_reshape(self):
        def build(p):
            cat = T.concat_cols([p["a"], p["b"]])
            rows = T.concat_rows([cat, cat])
            piece = T.slice_cols(rows, 1, 4)
            return T.sum_all(T.mul(T.reshape(piece, (3, 8)), 1.5))

        self._check(build, {"a": (4, 2), "b": (4, 3)})

    def test_gather_and_take(self):
        idx = np.array([2, 0, 0, -1, 1])
        cols = np.array([1, 0, 2])

        def build(p):
            g = T.gather_rows(p["a"], idx)
            return T.sum_all(g) + T.sum_all(T.take_per_row(p["b"], cols))

        self._check(build, {"a": (3, 2), "b": (3, 3)})

    def test_conv_gather(self):
        idx2d = np.array([[0, 1, -1], [2, -1, 0], [1, 1, 2]])
        self._check(lambda p: T.sum_all(T.mul(T.conv_gather(p["a"], idx2d), 0.7)),
                    {"a": (3, 2)})

    def test_segment_mean(self):
        seg = np.array([0, 0, 1, 2, 2, 2])
        self._check(lambda p: T.sum_all(T.mul(T.segment_mean(p["a"], seg, 4), 2.0)),
                    {"a": (6, 3)})

    def test_batchnorm_training_mode(self):
        rng = _rng(8)
        bn = T.BatchNorm.create(3, dtype=np.float64)
        x = T.parameter(rng.normal(size=(6, 3)), dtype=np.float64)
        params = {"x": x, "gamma": bn.gamma, "beta": bn.beta}
        check_gradients(lambda: T.sum_all(T.mul(bn(x, training=True), 1.3)), params)

    def test_batchnorm_inference_uses_frozen_stats(self):
        bn = T.BatchNorm.create(2)
        bn.running_mean = np.array([1.0, -1.0], dtype=np.float32)
        bn.running_var = np.array([4.0, 0.25], dtype=np.float32)
        x = T.constant(np.array([[1.0, -1.0], [3.0, 0.0]], dtype=np.float32))
        y = bn(x, training=False)
        expected = (x.data - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(y.data, expected, rtol=1e-6)
        np.testing.assert_array_equal(bn.running_mean, [1.0, -1.0])


# ---------------------------------------------------------------- adamw

class TestAdamW:
    def test_zero_gradient_zero_decay_is_noop(self):
        p = T.parameter(np.array([1.0, -2.0]))
        state = T.AdamWState()
        T.adamw_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, state,
                     lr=0.003, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step_matches_hand_computation(self):
        # p=1, g=1, lr=0.003, wd=0.01, betas (0.9, 0.999), eps 1e-8:
        # m_hat = 1, v_hat = 1, p' = 1 - 0.003 * (1/(1+1e-8) + 0.01)
        p = T.parameter(np.array([1.0]), dtype=np.float64)
        state = T.AdamWState()
        T.adamw_step({"p": p}, {"p": np.array([1.0])}, state, lr=0.003,
                     weight_decay=0.01)
        expected = 1.0 - 0.003 * (1.0 / (1.0 + 1e-8) + 0.01)
        np.testing.assert_allclose(p.data, [expected], rtol=1e-12)

    def test_two_steps_match_reference_formulas(self):
        lr, wd, b1, b2, eps = 0.003, 0.05, 0.9, 0.999, 1e-8
        p_ref = 0.7
        m = v = 0.0
        grads = [0.4, -0.3]
        p = T.parameter(np.array([p_ref]), dtype=np.float64)
        state = T.AdamWState()
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p_ref = p_ref - lr * ((m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
                                  + wd * p_ref)
            T.adamw_step({"p": p}, {"p": np.array([g])}, state, lr=lr, weight_decay=wd)
        np.testing.assert_allclose(p.data, [p_ref], rtol=1e-12)


# ---------------------------------------------------------------- determinism

def _forward_backward_fingerprint(seed):
    rng = np.random.default_rng(seed)
    w = T.parameter(rng.normal(size=(6, 4)), dtype=np.float64)
    x = T.constant(rng.normal(size=(10, 6)))
    h = T.leaky_relu(T.matmul(x, w))
    loss = T.sum_all(T.mul(T.softmax_rows(h), h))
    grads = T.backward(loss, {"w": w})
    return loss.data.tobytes(), grads["w"].tobytes()


def test_bit_identical_across_runs():
    assert _forward_backward_fingerprint(42) == _forward_backward_fingerprint(42)


def test_finite_difference_helper_agrees_with_itself():
    # sanity on the checking tool: analytic d/dx of sum(x^2) is 2x
    x = T.parameter(np.array([[1.0, -2.0]]), dtype=np.float64)
    fd = finite_difference(lambda: T.sum_all(T.mul(x, x)), x)
    assert relative_error(fd, 2 * x.data) < 1e-8
