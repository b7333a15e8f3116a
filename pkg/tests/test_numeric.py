import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sigatnet import numeric as nc
from oracles import sliding_window
from sigatnet.numeric import ConfigError, ParamTensor, RngStream, ShapeError, grad_check

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def matrices(max_side=6):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestMatmul:
    def test_identity(self):
        M = RngStream(0).normal(size=(3, 4))
        np.testing.assert_array_equal(nc.matmul(np.eye(3), M), M)

    def test_annihilation(self):
        out = nc.matmul(np.zeros((2, 3)), RngStream(1).normal(size=(3, 4)))
        assert out.shape == (2, 4)
        assert not out.any()

    def test_hand_product(self):
        out = nc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(out, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_backward_reduces_broadcast_batch(self):
        a = RngStream(2).normal(size=(4, 3, 2))
        b = RngStream(3).normal(size=(2, 5))
        ga, gb = nc.matmul_backward(np.ones((4, 3, 5)), a, b)
        assert ga.shape == a.shape and gb.shape == b.shape
        np.testing.assert_allclose(gb, sum(a[i].T @ np.ones((3, 5)) for i in range(4)))


class TestActivations:
    def test_leaky_relu_definition(self):
        np.testing.assert_allclose(nc.leaky_relu(np.array([[2.0, -2.0]]), 0.2), [[2.0, -0.4]])

    def test_leaky_relu_fixed_point(self):
        assert nc.leaky_relu(np.array([[0.0]]), 0.2)[0, 0] == 0.0

    @given(matrices())
    def test_leaky_relu_slope_one_is_identity(self, x):
        np.testing.assert_array_equal(nc.leaky_relu(x, 1.0), x)

    def test_leaky_relu_rejects_negative_slope(self):
        with pytest.raises(ConfigError):
            nc.leaky_relu(np.zeros((1, 1)), -0.1)

    def test_sigmoid_relu_softmax_values(self):
        assert nc.sigmoid(np.array([[0.0]]))[0, 0] == 0.5
        np.testing.assert_array_equal(nc.relu(np.array([[-1.0, 3.0]])), [[0.0, 3.0]])
        np.testing.assert_array_equal(nc.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_sigmoid_extremes_are_finite(self):
        out = nc.sigmoid(np.array([[-1000.0, 1000.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [[0.0, 1.0]])

    @given(matrices())
    def test_softmax_rows_sum_to_one(self, x):
        out = nc.softmax_rows(x)
        assert np.all((out >= 0) & (out <= 1))
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_softmax_zeroes_outside_mask(self):
        x = np.array([[1.0, 2.0, 3.0]])
        mask = np.array([[True, False, True]])
        out = nc.softmax_rows(x, mask)
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out[0, [0, 2]], np.exp([1.0, 3.0]) / np.exp([1.0, 3.0]).sum())

    def test_fully_masked_row_is_zero(self):
        out = nc.softmax_rows(np.array([[1.0, 2.0]]), np.array([[False, False]]))
        np.testing.assert_array_equal(out, [[0.0, 0.0]])


class TestConv:
    def test_identity_row_kernel(self):
        x = RngStream(0).normal(size=(4, 5))
        np.testing.assert_array_equal(nc.conv2d_zeropad(x, np.array([[0.0, 1.0, 0.0]])), x)

    def test_zero_kernel(self):
        x = RngStream(1).normal(size=(4, 5))
        assert not nc.conv2d_zeropad(x, np.zeros((3, 3))).any()

    def test_ones_kernel_on_small_input(self):
        np.testing.assert_array_equal(nc.conv2d_zeropad(np.ones((2, 2)), np.ones((3, 3))), [[4.0, 4.0], [4.0, 4.0]])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            nc.conv2d_zeropad(np.ones((3, 3)), np.ones((2, 2)))

    @pytest.mark.parametrize("shape", [(1, 3), (3, 1), (3, 3), (1, 5), (5, 5)])
    def test_matches_sliding_window(self, shape):
        rng = RngStream(7)
        x = rng.child(0).normal(size=(6, 4))
        k = rng.child(1).normal(size=shape)
        np.testing.assert_allclose(nc.conv2d_zeropad(x, k), sliding_window(x, k), atol=1e-12)

    @given(st.integers(1, 7), st.integers(1, 7), st.sampled_from([1, 3, 5]))
    def test_centred_identity_kernel(self, n, m, k):
        x = RngStream(n * 10 + m).normal(size=(n, m))
        kern = np.zeros((k, k))
        kern[k // 2, k // 2] = 1.0
        np.testing.assert_array_equal(nc.conv2d_zeropad(x, kern), x)

    def test_batched_input(self):
        x = RngStream(3).normal(size=(2, 5, 5))
        k = RngStream(4).normal(size=(3, 3))
        out = nc.conv2d_zeropad(x, k)
        for b in range(2):
            np.testing.assert_allclose(out[b], sliding_window(x[b], k), atol=1e-12)


class TestGlorot:
    def test_bound(self):
        w = nc.glorot_uniform(3, 3, RngStream(0))
        assert np.all(np.abs(w) <= 1.0)

    def test_determinism(self):
        np.testing.assert_array_equal(nc.glorot_uniform(4, 6, RngStream(9)), nc.glorot_uniform(4, 6, RngStream(9)))

    def test_mean_within_three_sigma(self):
        w = nc.glorot_uniform(100, 100, RngStream(5))
        bound = np.sqrt(6 / 200)
        sigma = bound / np.sqrt(3) / np.sqrt(w.size)
        assert abs(w.mean()) <= 3 * sigma
        assert np.all(np.abs(w) <= bound)

    def test_rejects_empty(self):
        with pytest.raises(ConfigError):
            nc.glorot_uniform(0, 3, RngStream(0))


class TestRngStream:
    def test_same_seed_same_draws(self):
        assert np.array_equal(RngStream(3).normal(size=10), RngStream(3).normal(size=10))

    def test_children_independent_of_parent_use(self):
        a = RngStream(3)
        a.normal(size=100)
        assert np.array_equal(a.child(2).normal(size=5), RngStream(3).child(2).normal(size=5))

    def test_children_differ(self):
        root = RngStream(3)
        assert not np.array_equal(root.child(0).normal(size=5), root.child(1).normal(size=5))


class TestParamTensor:
    def test_grad_matches_shape_and_zeroes(self):
        p = ParamTensor("w", np.ones((2, 3)))
        assert p.grad.shape == p.value.shape
        p.grad += 5.0
        nc.zero_grads([p])
        assert not p.grad.any()


class TestGradCheck:
    def test_quadratic(self):
        p = ParamTensor("theta", np.array([[3.0]]))

        def f():
            return float(p.value[0, 0] ** 2)

        def bw():
            p.grad[0, 0] = 2 * p.value[0, 0]

        assert grad_check(f, [p], 1e-5, bw) < 1e-8
        assert p.grad[0, 0] == 6.0

    def test_constant(self):
        p = ParamTensor("theta", np.array([[1.0, 2.0]]))
        assert grad_check(lambda: 4.0, [p], 1e-5, lambda: None) == 0.0

    def test_detects_wrong_gradient(self):
        p = ParamTensor("theta", np.array([[2.0]]))

        def bw():
            p.grad[0, 0] = 1.0

        assert grad_check(lambda: float(p.value[0, 0] ** 2), [p], 1e-5, bw) > 0.5

    def test_non_finite_objective(self):
        p = ParamTensor("theta", np.array([[1.0]]))
        with pytest.raises(nc.EvaluationError):
            grad_check(lambda: float("nan"), [p])

    def test_bad_step(self):
        with pytest.raises(ConfigError):
            grad_check(lambda: 0.0, [], 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_op_gradients_on_random_inputs(seed):
    from sigatnet.checks import op_checks

    for result in op_checks(seed):
        assert result.max_rel_error <= 1e-4, result
