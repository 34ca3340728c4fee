import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdfm3sf import tensor as T
from cdfm3sf.tensor import Tensor

from oracles import interleave_then_convolve, naive_conv2d, naive_depthwise, naive_max_pool


def rel_err(a, b, floor=1e-8):
    return np.max(np.abs(a - b) / (np.abs(b) + floor))


def param(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def grad_check(build, tensors, eps=1e-6):
    """Autodiff vs central differences for sum(out * probe) over every input."""
    out = build()
    probe = np.random.default_rng(99).normal(size=out.shape)

    def f(_=None):
        return T.sum_all(T.mul(build(), Tensor(probe)))

    for t in tensors:
        t.zero_grad()
    T.backward(f())
    worst = 0.0
    for t in tensors:
        fd = T.finite_difference_grad(f, t, eps)
        worst = max(worst, rel_err(t.grad, fd))
    return worst


# ---------------------------------------------------------------------------
# conv2d

def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 3, 3, 1)))
    y = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_impulse_all_ones_kernel():
    x = np.zeros((1, 3, 3, 1))
    x[0, 1, 1, 0] = 1
    y = T.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, np.ones((1, 3, 3, 1)))


def test_conv_dilated_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 8, 8, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=(2, 3))
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation_rate=2)
    np.testing.assert_allclose(y.data, naive_conv2d(x, w, b, rate=2), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 7), w=st.integers(3, 7), k=st.sampled_from([1, 2, 3, 4, 5]),
       rate=st.integers(1, 3), stride=st.integers(1, 2), seed=st.integers(0, 2**16))
def test_conv_property_matches_oracle(h, w, k, rate, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, h, w, 2))
    kern = rng.normal(size=(k, k, 2, 2))
    y = T.conv2d(Tensor(x), Tensor(kern), stride=stride, dilation_rate=rate)
    assert y.shape == (2, -(-h // stride), -(-w // stride), 2)
    np.testing.assert_allclose(y.data, naive_conv2d(x, kern, stride=stride, rate=rate), atol=1e-10)


def test_conv_even_kernel_extra_padding_bottom_right():
    # 2x2 all-ones kernel: output (i, j) sums x[i:i+2, j:j+2], zero beyond the edge
    x = np.arange(9.0).reshape(1, 3, 3, 1)
    y = T.conv2d(Tensor(x), Tensor(np.ones((2, 2, 1, 1))))
    assert y.data[0, 0, 0, 0] == 0 + 1 + 3 + 4
    assert y.data[0, 2, 2, 0] == 8


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(ValueError, match="channel axis"):
        T.conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 2, 1))))


def test_conv_rejects_bad_rate_and_stride():
    x, w = Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.zeros((3, 3, 1, 1)))
    with pytest.raises(ValueError):
        T.conv2d(x, w, dilation_rate=0)
    with pytest.raises(ValueError):
        T.conv2d(x, w, stride=0)


def test_conv_gradients():
    rng = np.random.default_rng(1)
    x, w, b = param(rng.normal(size=(2, 5, 5, 2))), param(rng.normal(size=(3, 3, 2, 3))), \
        param(rng.normal(size=(2, 3)))
    assert grad_check(lambda: T.conv2d(x, w, b, dilation_rate=2), [x, w, b]) < 1e-6
    assert grad_check(lambda: T.conv2d(x, w, b, stride=2), [x, w, b]) < 1e-6


def test_fd_conv_then_sum_matches_backward():
    rng = np.random.default_rng(2)
    x, w = param(rng.normal(size=(1, 6, 6, 2))), param(rng.normal(size=(3, 3, 2, 2)))

    def f(_=None):
        return T.sum_all(T.conv2d(x, w))

    T.backward(f())
    assert rel_err(w.grad, T.finite_difference_grad(f, w)) < 1e-6
    assert rel_err(x.grad, T.finite_difference_grad(f, x)) < 1e-6


# ---------------------------------------------------------------------------
# transposed convolution

def test_deconv_single_pixel_placement():
    y = T.transposed_conv2d(Tensor(np.full((1, 1, 1, 1), 5.0)), Tensor(np.ones((1, 1, 1, 1))), stride=2)
    # k < stride: the value sits at the top-left, the rest is zero
    np.testing.assert_array_equal(y.data[0, :, :, 0], [[5.0, 0.0], [0.0, 0.0]])


def test_deconv_shape_contract():
    y = T.transposed_conv2d(Tensor(np.ones((1, 4, 4, 1))), Tensor(np.ones((4, 4, 1, 2))), stride=2)
    assert y.shape == (1, 8, 8, 2)


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), k=st.integers(1, 5), stride=st.integers(1, 3),
       seed=st.integers(0, 2**16))
def test_deconv_matches_interleave_oracle(h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, h, w, 2))
    kern = rng.normal(size=(k, k, 2, 3))
    b = rng.normal(size=(2, 3))
    y = T.transposed_conv2d(Tensor(x), Tensor(kern), Tensor(b), stride=stride)
    np.testing.assert_allclose(y.data, interleave_then_convolve(x, kern, stride, b), atol=1e-10)


def test_deconv_gradients():
    rng = np.random.default_rng(3)
    for stride in (2, 3):
        x, w, b = param(rng.normal(size=(1, 3, 2, 2))), param(rng.normal(size=(4, 4, 2, 3))), \
            param(rng.normal(size=(2, 3)))
        assert grad_check(lambda: T.transposed_conv2d(x, w, b, stride), [x, w, b]) < 1e-6


# ---------------------------------------------------------------------------
# pooling

def test_max_pool_single_window():
    y = T.max_pool(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)), 2, 2)
    assert y.data.reshape(-1).tolist() == [4.0]


def test_max_pool_constant():
    y = T.max_pool(Tensor(np.full((1, 6, 6, 2), 3.5)), 3, 3)
    np.testing.assert_array_equal(y.data, np.full((1, 2, 2, 2), 3.5))


def test_max_pool_matches_oracle():
    x = np.random.default_rng(4).normal(size=(1, 6, 6, 1))
    np.testing.assert_array_equal(T.max_pool(Tensor(x), 3, 3).data, naive_max_pool(x, 3, 3))


def test_max_pool_tie_gradient_goes_to_first_element():
    x = param(np.ones((1, 2, 2, 1)))
    T.backward(T.sum_all(T.max_pool(x, 2, 2)))
    np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_rejects_indivisible_extent():
    with pytest.raises(ValueError):
        T.max_pool(Tensor(np.zeros((1, 5, 6, 1))), 2, 2)


def test_pool_gradients():
    x = param(np.random.default_rng(5).normal(size=(2, 6, 6, 2)))
    assert grad_check(lambda: T.max_pool(x, 3, 3), [x]) < 1e-6
    assert grad_check(lambda: T.avg_pool(x, 2, 2), [x]) < 1e-6


# ---------------------------------------------------------------------------
# pointwise and depthwise

def test_pointwise_identity_and_channel_sum():
    x = np.random.default_rng(6).normal(size=(1, 3, 3, 2))
    y = T.pointwise(Tensor(x), Tensor(np.eye(2).reshape(1, 1, 2, 2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(y.data, x)
    s = T.pointwise(Tensor(x), Tensor(np.ones((1, 1, 2, 1))))
    np.testing.assert_allclose(s.data[..., 0], x[..., 0] + x[..., 1])


def test_pointwise_equals_conv_k1_bitwise():
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(1, 1, 3, 5)), rng.normal(size=(3, 5))
    a = T.pointwise(Tensor(x), Tensor(w), Tensor(b)).data
    c = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_array_equal(a, c)


@pytest.mark.parametrize("rate", [1, 2, 3])
def test_depthwise_matches_oracle(rate):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 7, 7, 3))
    for kc in (3, 1):
        w = rng.normal(size=(3, 3, kc))
        np.testing.assert_allclose(T.depthwise_conv2d(Tensor(x), Tensor(w), rate).data,
                                   naive_depthwise(x, w, rate), atol=1e-10)


def test_depthwise_gradients():
    rng = np.random.default_rng(9)
    x = param(rng.normal(size=(2, 5, 5, 3)))
    for shape in ((3, 3, 3), (5, 5, 1)):
        w = param(rng.normal(size=shape))
        assert grad_check(lambda: T.depthwise_conv2d(x, w, 2), [x, w]) < 1e-6


# ---------------------------------------------------------------------------
# elementwise, batch norm, tape mechanics

def test_relu_and_sigmoid_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    big = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0


def test_relu_derivative_zero_at_zero():
    x = param([0.0, 1.0])
    T.backward(T.sum_all(T.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_batch_norm_train_statistics():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 5, 5, 3)))
    rm, rv = np.zeros(3), np.ones(3)
    y = T.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True)
    mean = y.data.mean(axis=(0, 1, 2))
    var = y.data.var(axis=(0, 1, 2))
    assert np.all(np.abs(mean) < 1e-6)
    # normalization uses eps 1e-3, so the output variance is var / (var + eps)
    expected = x.data.var(axis=(0, 1, 2)) / (x.data.var(axis=(0, 1, 2)) + 1e-3)
    np.testing.assert_allclose(var, expected, atol=1e-12)
    assert np.all(np.abs(var - 1) < 1e-3)
    np.testing.assert_allclose(rm, 0.01 * x.data.mean(axis=(0, 1, 2)))


def test_batch_norm_gradients_both_modes():
    rng = np.random.default_rng(11)
    x = param(rng.normal(size=(3, 4, 4, 2)))
    g, b = param(1 + 0.1 * rng.normal(size=2)), param(0.1 * rng.normal(size=2))
    stats = (rng.normal(size=2), rng.uniform(0.5, 1.5, size=2))

    def build(training):
        rm, rv = stats[0].copy(), stats[1].copy()
        return lambda: T.batch_norm(x, g, b, rm, rv, training)

    assert grad_check(build(True), [x, g, b]) < 1e-5
    assert grad_check(build(False), [x, g, b]) < 1e-6


def test_concat_slice_and_scale_gradients():
    rng = np.random.default_rng(12)
    a, b = param(rng.normal(size=(1, 2, 2, 2))), param(rng.normal(size=(1, 2, 2, 3)))
    assert grad_check(lambda: T.slice_channels(T.concat_channels([a, b]), 1, 4), [a, b]) < 1e-8
    assert grad_check(lambda: T.sigmoid(T.scale(T.mul(a, a), 0.5)), [a]) < 1e-6


def test_backward_sum_gives_ones():
    x = param(np.random.default_rng(13).normal(size=(2, 3)))
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_x():
    x = param(np.random.default_rng(14).normal(size=(4,)))
    T.backward(T.scale(T.sum_all(T.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, x.data)


def test_fd_helper_trivial_cases():
    x = param(np.random.default_rng(15).normal(size=(3, 2)))
    np.testing.assert_allclose(T.finite_difference_grad(T.sum_all, x), np.ones((3, 2)), atol=1e-9)
    half_sq = lambda t: T.scale(T.sum_all(T.mul(t, t)), 0.5)
    np.testing.assert_allclose(T.finite_difference_grad(half_sq, x), x.data, atol=1e-8)


def test_leaf_gradients_accumulate_across_backward_calls():
    x = param([1.0, 2.0])
    T.backward(T.sum_all(x))
    T.backward(T.sum_all(x))
    assert x.grad.tolist() == [2.0, 2.0]
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gradient():
    x = param([3.0])
    y = T.add(x, x)
    T.backward(T.sum_all(T.mul(y, y)))
    assert x.grad.tolist() == [24.0]


def test_backward_errors():
    with pytest.raises(ValueError, match="scalar"):
        T.backward(T.mul(param([1.0, 2.0]), param([1.0, 1.0])))
    with pytest.raises(ValueError, match="tape"):
        T.backward(T.sum_all(Tensor([1.0])))


def test_no_grad_records_nothing():
    x = param([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_deep_chain_has_no_recursion_limit():
    x = param([1.0])
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    T.backward(T.sum_all(y))
    assert x.grad.tolist() == [1.0]


def test_float32_mode():
    T.set_default_dtype(np.float32)
    try:
        x = Tensor(np.ones((1, 4, 4, 2)))
        w = Tensor(np.ones((3, 3, 2, 1)))
        assert T.conv2d(x, w).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)


def test_fd_extended_precision_argument():
    x = Tensor([0.3, -0.2], requires_grad=True, dtype=np.longdouble)
    f = lambda t: Tensor(np.asarray((t.data ** 3).sum()), dtype=t.data.dtype)
    fd = T.finite_difference_grad(f, x, 1e-7)
    np.testing.assert_allclose(fd, 3 * np.array([0.3, -0.2]) ** 2, rtol=1e-11)
