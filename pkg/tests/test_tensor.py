import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltalearn import ConvKernel, Tensor, grad_check, no_grad
from deltalearn import tensor as T
from deltalearn.errors import ContractError, ShapeError

from oracles import conv2d_loops, cross_entropy_mpmath, gemm_loops


def t(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestElementwise:
    def test_relu_sign_cases(self):
        out = T.relu(t([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_all_negative_zeroes_gradient(self):
        x = t([-3.0, -0.5, -1e-9], grad=True)
        T.relu(x).sum().backward()
        assert np.array_equal(x.grad, np.zeros(3))

    def test_relu_matches_elementwise_max(self, rng):
        x = rng.standard_normal(257)
        assert np.array_equal(T.relu(t(x)).data, np.maximum(x, 0.0))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.add(t([1.0]), t([1.0, 2.0]))

    def test_mul_backward_is_quadratic_derivative(self, rng):
        x = t(rng.standard_normal(6), grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, 2 * x.data, atol=1e-14)

    def test_sum_axis_backward_broadcasts(self, rng):
        x = t(rng.standard_normal((3, 4, 5)), grad=True)
        T.tsum(T.tsum(x, axis=2), axis=0).sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 4, 5)))

    def test_reshape_roundtrip(self, rng):
        x = t(rng.standard_normal((2, 6)), grad=True)
        y = x.reshape(3, 4).reshape(2, 6)
        assert np.array_equal(y.data, x.data)
        (y * y).sum().backward()
        assert np.allclose(x.grad, 2 * x.data)


class TestBackwardContract:
    def test_sum_gradient_is_ones(self, rng):
        x = t(rng.standard_normal((4, 3)), grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((4, 3)))

    def test_repeated_backward_accumulates(self):
        x = t([1.0, 2.0], grad=True)
        loss = (x * x).sum()
        loss.backward()
        loss.backward()
        assert np.allclose(x.grad, 4 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_backward_is_linear(self, rng):
        a, b = 0.7, -1.3
        base = rng.standard_normal(8)

        def grads(fn):
            x = t(base, grad=True)
            fn(x).backward()
            return x.grad

        gf = grads(lambda x: (x * x).sum())
        gg = grads(lambda x: x.sum())
        combined = grads(lambda x: (x * x).sum() * a + x.sum() * b)
        assert np.abs(combined - (a * gf + b * gg)).max() < 1e-10

    def test_no_grad_blocks_recording(self):
        x = t([1.0], grad=True)
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        with pytest.raises(ContractError):
            y.backward()

    def test_diamond_graph_accumulates_once_per_path(self):
        x = t([3.0], grad=True)
        y = x * x          # dy/dx = 6
        loss = (y + y).sum()
        loss.backward()
        assert np.allclose(x.grad, [12.0])


class TestConv:
    def test_identity_1x1_kernel(self):
        x = t(np.ones((1, 1, 3, 3)), grad=True)
        k = ConvKernel(t(np.ones((1, 1, 1, 1))), t([0.0]))
        out = T.conv2d(x, k)
        assert np.array_equal(out.data, np.ones((1, 1, 3, 3)))

    def test_zero_weight_kernel_yields_bias(self, rng):
        x = t(rng.standard_normal((2, 3, 5, 5)))
        k = ConvKernel(t(np.zeros((2, 3, 3, 3))), t([1.5, -0.5]), pad=1)
        out = T.conv2d(x, k).data
        assert np.array_equal(out[:, 0], np.full((2, 5, 5), 1.5))
        assert np.array_equal(out[:, 1], np.full((2, 5, 5), -0.5))

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 2, 2))
        b = rng.standard_normal(3)
        out = T.conv2d(t(x), ConvKernel(t(w), t(b)))
        assert np.abs(out.data - conv2d_loops(x, w, b, 1, 0)).max() <= 1e-12

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(ShapeError):
            T.conv2d(t(rng.standard_normal((1, 3, 4, 4))),
                     ConvKernel(t(rng.standard_normal((2, 2, 3, 3))), t([0.0, 0.0])))

    def test_non_integer_output_extent_raises(self, rng):
        from deltalearn.errors import ConfigError
        with pytest.raises(ConfigError):
            T.conv2d(t(rng.standard_normal((1, 1, 5, 5))),
                     ConvKernel(t(rng.standard_normal((1, 1, 2, 2))), t([0.0]), stride=2))

    def test_gradients_pass_finite_differences(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        bias = t(np.zeros(2), grad=True)

        def f(wt):
            out = T.conv2d(t(x), ConvKernel(wt, bias, stride=2, pad=1))
            return (out * out).sum()

        assert grad_check(f, t(rng.standard_normal((2, 2, 3, 3))), 1e-5) < 1e-6


class TestPoolLinear:
    def test_maxpool_window(self):
        out = T.maxpool2x2(t([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.data.tolist() == [[[[4.0]]]]

    def test_maxpool_routes_gradient_to_argmax(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]], grad=True)
        T.maxpool2x2(x).sum().backward()
        assert x.grad.tolist() == [[[[0.0, 0.0], [0.0, 1.0]]]]

    def test_maxpool_tie_goes_to_first_in_row_major_order(self):
        x = t(np.full((1, 1, 2, 2), 7.0), grad=True)
        T.maxpool2x2(x).sum().backward()
        assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]

    def test_global_avg_pool_mean_and_grad(self, rng):
        x = t(rng.standard_normal((2, 3, 4, 4)), grad=True)
        out = T.global_avg_pool(x)
        assert np.allclose(out.data, x.data.mean(axis=(2, 3)))
        out.sum().backward()
        assert np.allclose(x.grad, np.full(x.shape, 1 / 16))

    def test_linear_identity(self, rng):
        x = rng.standard_normal((3, 4))
        out = T.linear(t(x), t(np.eye(4)), t(np.zeros(4)))
        assert np.array_equal(out.data, x)

    def test_linear_matches_gemm_oracle(self, rng):
        x = rng.standard_normal((4, 7))
        w = rng.standard_normal((5, 7))
        b = rng.standard_normal(5)
        out = T.linear(t(x), t(w), t(b))
        assert np.abs(out.data - gemm_loops(x, w, b)).max() <= 1e-12

    def test_linear_gradcheck(self, rng):
        x = rng.standard_normal((2, 6))
        b = t(rng.standard_normal(3), grad=True)
        f = lambda wt: (lambda y: (y * y).sum())(T.linear(t(x), wt, b))
        assert grad_check(f, t(rng.standard_normal((3, 6))), 1e-5) < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = T.softmax_cross_entropy(t(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert abs(loss.item() - np.log(4.0)) < 1e-12

    def test_confident_correct_is_near_zero(self):
        loss = T.softmax_cross_entropy(t([[10.0, -10.0]]), np.array([0])).item()
        assert loss < 3e-9
        expected = cross_entropy_mpmath(np.array([[10.0, -10.0]]), [0])
        assert abs(loss - expected) < 1e-12

    def test_matches_extended_precision_oracle(self, rng):
        logits = rng.standard_normal((8, 5)) * 30.0
        labels = rng.integers(0, 5, 8)
        loss = T.softmax_cross_entropy(t(logits), labels).item()
        assert abs(loss - cross_entropy_mpmath(logits, labels)) <= 1e-10

    def test_out_of_range_label(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(t(np.zeros((2, 3))), np.array([0, 3]))

    def test_backward_is_softmax_minus_onehot(self, rng):
        logits = t(rng.standard_normal((4, 3)), grad=True)
        labels = np.array([0, 2, 1, 1])
        T.softmax_cross_entropy(logits, labels).backward()
        p = T.softmax_probs(logits.data)
        p[np.arange(4), labels] -= 1.0
        assert np.allclose(logits.grad, p / 4, atol=1e-14)


class TestGradCheckHarness:
    def test_sum_of_squares_is_exact(self, rng):
        f = lambda x: (x * x).sum()
        assert grad_check(f, t(rng.standard_normal(10)), 1e-5) < 1e-7

    def test_relu_chain_away_from_kinks(self, rng):
        x0 = rng.standard_normal(12)
        x0 = np.where(np.abs(x0) < 0.2, x0 + 0.5, x0)   # keep clear of 0
        f = lambda x: (lambda y: (y * y).sum())(T.relu(x))
        assert grad_check(f, t(x0), 1e-5) < 1e-5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=9))
def test_finite_inputs_yield_finite_outputs(values):
    x = t(values, grad=True)
    y = T.relu(x * x + x * 0.5)
    loss = (y * y).sum()
    loss.backward()
    assert np.isfinite(loss.item())
    assert np.all(np.isfinite(x.grad))
