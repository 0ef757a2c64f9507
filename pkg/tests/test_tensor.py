"""Autodiff engine: primitive ops, conv/BN layers, and gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathfuse import precision
from pathfuse.tensor import (NonFiniteError, Tensor, batchnorm2d,
                             batchnorm2d_train, conv2d, grad_check, linear,
                             log_softmax, relu)


@pytest.fixture(autouse=True)
def f64():
    precision.set_precision("f64")
    yield
    precision.set_precision("f32")


def t(x, requires_grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=requires_grad)


class TestOps:
    def test_add_mul_backward(self):
        a, b = t([1.0, 2.0]), t([3.0, 4.0])
        out = (a * b + a).sum()
        out.backward()
        np.testing.assert_allclose(a.grad, [4.0, 5.0])
        np.testing.assert_allclose(b.grad, [1.0, 2.0])

    def test_broadcast_grad_sums_over_expanded_axes(self):
        a = t(np.ones((3, 4)))
        b = t(np.ones((4,)))
        (a + b).sum().backward()
        np.testing.assert_allclose(b.grad, [3.0] * 4)

    def test_mean_and_axis_sum(self):
        a = t(np.arange(12.0).reshape(3, 4))
        m = a.mean(axis=0)
        np.testing.assert_allclose(m.data, [4.0, 5.0, 6.0, 7.0])
        m.sum().backward()
        np.testing.assert_allclose(a.grad, np.full((3, 4), 1.0 / 3.0))

    def test_relu_gates_gradient(self):
        a = t([-1.0, 0.0, 2.0])
        relu(a).sum().backward()
        np.testing.assert_allclose(a.grad, [0.0, 0.0, 1.0])

    def test_matmul_shapes_and_grad(self):
        a, b = t(np.ones((2, 3))), t(np.ones((3, 5)))
        out = a.matmul(b)
        assert out.shape == (2, 5)
        out.sum().backward()
        np.testing.assert_allclose(a.grad, np.full((2, 3), 5.0))
        np.testing.assert_allclose(b.grad, np.full((3, 5), 2.0))

    def test_non_finite_forward_raises(self):
        with pytest.raises(NonFiniteError):
            (t([1.0]) / t([0.0])).item()

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            t([1.0, 2.0]).backward()


class TestLogSoftmax:
    def test_two_zeros_gives_minus_log2(self):
        out = log_softmax(t([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, -np.log(2.0), rtol=1e-12)

    def test_shift_invariance(self):
        x = np.array([[1.0, -2.0, 0.5]])
        a = log_softmax(t(x)).data
        b = log_softmax(t(x + 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_rows_normalize(self):
        out = log_softmax(t(np.random.default_rng(0).normal(size=(4, 7))))
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)


class TestConv:
    def test_scalar_oracle(self):
        # 1x1 input 3, kernel 2: 3 * 2 = 6
        x = t(np.full((1, 1, 1, 1), 3.0))
        k = t(np.full((1, 1, 1, 1), 2.0))
        out = conv2d(x, k, stride=1, padding=0)
        np.testing.assert_allclose(out.data, [[[[6.0]]]])

    def test_3x3_valid_oracle(self):
        # hand-computed valid conv of the 0..8 ramp with a 2x2 sum kernel
        x = t(np.arange(9.0).reshape(1, 1, 3, 3))
        k = t(np.ones((1, 1, 2, 2)))
        out = conv2d(x, k, stride=1, padding=0)
        np.testing.assert_allclose(out.data[0, 0], [[8.0, 12.0], [20.0, 24.0]])

    def test_stride_and_padding_shape(self):
        x = t(np.zeros((2, 3, 16, 16)))
        k = t(np.zeros((8, 3, 3, 3)))
        assert conv2d(x, k, stride=2, padding=1).shape == (2, 8, 8, 8)

    def test_grad_check(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5))
        k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)

        def f(inp):
            return conv2d(inp, k, stride=2, padding=1).sum()

        assert grad_check(f, Tensor(x, requires_grad=True)) < 1e-4

    def test_kernel_grad_check(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))

        def f(kern):
            return (conv2d(x, kern, stride=1, padding=1) * 0.5).sum()

        k = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        assert grad_check(f, k) < 1e-4


class TestBatchNorm:
    def test_eval_mode_formula(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        mu = np.array([0.1, -0.2, 0.3])
        sigma = np.array([1.5, 0.7, 2.0])
        gamma = np.array([1.0, 2.0, 0.5])
        beta = np.array([0.0, 1.0, -1.0])
        out = batchnorm2d(Tensor(x), mu, sigma, t(gamma), t(beta))
        want = gamma[None, :, None, None] * (x - mu[None, :, None, None]) \
            / sigma[None, :, None, None] + beta[None, :, None, None]
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_train_mode_normalizes_batch(self):
        x = np.random.default_rng(3).normal(size=(8, 2, 4, 4))
        out, mu, sigma = batchnorm2d_train(Tensor(x), t(np.ones(2)), t(np.zeros(2)))
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
        np.testing.assert_allclose(mu, x.mean(axis=(0, 2, 3)), atol=1e-12)
        assert sigma.shape == (2,)

    def test_train_mode_grad_check(self):
        # random weighting keeps the gradient away from zero, where the
        # relative-error denominator of grad_check loses meaning
        rng = np.random.default_rng(5)
        gamma = Tensor(rng.normal(size=3) + 2.0, requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))

        def f(inp):
            out, _, _ = batchnorm2d_train(inp, gamma, beta)
            return (out * w).sum()

        x = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        assert grad_check(f, x) < 1e-4


class TestLinear:
    def test_forward(self):
        x = t([[1.0, 2.0]])
        w = t([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        b = t([0.0, 0.0, 1.0])
        np.testing.assert_allclose(linear(x, w, b).data, [[1.0, 2.0, 4.0]])

    def test_grad_check(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)

        def f(inp):
            return log_softmax(linear(inp, w, b)).sum()

        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert grad_check(f, x) < 1e-4


class TestGradCheck:
    def test_rejects_f32(self):
        precision.set_precision("f32")
        with pytest.raises(RuntimeError):
            grad_check(lambda x: x.sum(), Tensor(np.zeros(2, np.float32),
                                                 requires_grad=True))

    def test_rejects_bad_step(self):
        x = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda v: v.sum(), x, h=1e-2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6))
def test_log_softmax_upper_bound(values):
    precision.set_precision("f64")
    out = log_softmax(Tensor(np.array([values])))
    assert np.all(out.data <= 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(3, 8))
def test_conv_identity_kernel(batch, channels, size):
    """A centered 1-hot 3x3 kernel with padding 1 reproduces the input."""
    precision.set_precision("f64")
    rng = np.random.default_rng(11)
    x = rng.normal(size=(batch, channels, size, size))
    k = np.zeros((channels, channels, 3, 3))
    for c in range(channels):
        k[c, c, 1, 1] = 1.0
    out = conv2d(Tensor(x), Tensor(k), stride=1, padding=1)
    np.testing.assert_allclose(out.data, x, atol=1e-12)
