from __future__ import annotations

import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splitent import autodiff as ad
from splitent.autodiff import DimensionError, DomainError, GraphError, Tensor, backward, finite_diff_check


def rand(shape, seed=0, lo=-1.0, hi=1.0, dtype=np.float64):
    return np.random.default_rng(seed).uniform(lo, hi, shape).astype(dtype)


# --------------------------------------------------------------------------- conv2d


def test_conv_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = ad.conv2d(x, w, Tensor(np.zeros(1)))
    assert y.shape == (1, 1, 1, 1)
    assert y.data.item() == 9.0


def test_conv_zero_kernel_gives_bias():
    x = Tensor(rand((2, 3, 6, 6)))
    y = ad.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.array([1.0, -2.0, 0.5, 3.0])), pad=1)
    assert np.array_equal(y.data, np.broadcast_to(np.array([1.0, -2.0, 0.5, 3.0])[None, :, None, None], y.shape))


def test_conv_matches_naive_loop():
    x = rand((2, 2, 7, 5), 1)
    w = rand((3, 2, 3, 3), 2)
    b = rand((3,), 3)
    y = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (7 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 3, ho, wo))
    for n in range(2):
        for o in range(3):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("wrt", ["x", "w", "b"])
def test_conv_gradients(wrt):
    x, w, b = rand((1, 2, 5, 5), 4), rand((3, 2, 3, 3), 5), rand((3,), 6)

    def f(t):
        args = {"x": Tensor(x), "w": Tensor(w), "b": Tensor(b)}
        args[wrt] = t
        return ad.sum(ad.conv2d(args["x"], args["w"], args["b"], stride=1, pad=1))

    assert finite_diff_check(f, {"x": x, "w": w, "b": b}[wrt], eps=1e-3) < 1e-3


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


# --------------------------------------------------------------------------- dense


def test_dense_identity_and_bias():
    x = rand((3, 4))
    assert np.array_equal(ad.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    y = ad.dense(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(np.array([1.5, -1.0]))).data
    assert np.array_equal(y, np.tile([1.5, -1.0], (3, 1)))


def test_dense_gradients():
    x, w, b = rand((2, 4), 1), rand((3, 4), 2), rand((3,), 3)
    assert finite_diff_check(lambda t: ad.sum(ad.dense(t, Tensor(w), Tensor(b))), x, eps=1e-3) < 1e-3
    assert finite_diff_check(lambda t: ad.sum(ad.dense(Tensor(x), t, Tensor(b))), w, eps=1e-3) < 1e-3
    assert finite_diff_check(lambda t: ad.sum(ad.dense(Tensor(x), Tensor(w), t)), b, eps=1e-3) < 1e-3


# --------------------------------------------------------------------------- elementwise


def test_relu_values():
    assert np.array_equal(ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])


def test_mean_value_and_grad():
    x = Tensor(np.array([2.0, 4.0]), requires_grad=True)
    y = ad.mean(x)
    assert y.data == 3.0
    backward(y)
    assert np.array_equal(x.grad, [0.5, 0.5])


def test_sigmoid_gradient():
    assert finite_diff_check(lambda t: ad.sum(ad.sigmoid(t)), rand((16,), 7, -3, 3), eps=1e-4) < 1e-4


def weighted(op, w):
    return lambda t: ad.sum(ad.mul(op(t), Tensor(w)))


@pytest.mark.parametrize(
    "name,op,lo,hi",
    [
        ("relu", ad.relu, -2, 2),
        ("abs", ad.abs, -2, 2),
        ("log", ad.log, 0.2, 3),
        ("exp", ad.exp, -2, 2),
        ("sigmoid", ad.sigmoid, -4, 4),
        ("softplus", ad.softplus, -4, 4),
        ("clamp", lambda t: ad.clamp(t, -0.5, 0.7), -2, 2),
        ("scale", lambda t: ad.scale(t, -2.5), -2, 2),
        ("square", lambda t: ad.mul(t, t), -2, 2),
        ("upsample2x", lambda t: ad.upsample2x(ad.reshape(t, (1, 2, 2, 2))), -2, 2),
        ("channel_slice", lambda t: ad.channel_slice(ad.reshape(t, (1, 4, 1, 2)), 1, 3), -2, 2),
        ("gap", lambda t: ad.global_avg_pool(ad.reshape(t, (2, 2, 1, 2))), -2, 2),
        ("mean", lambda t: ad.mean(t), -2, 2),
        ("sum_axis", lambda t: ad.sum(ad.reshape(t, (2, 4)), axis=1), -2, 2),
        ("add_channel", lambda t: ad.add_channel(ad.reshape(t, (1, 2, 2, 2)), Tensor(np.array([0.3, -0.1]))), -2, 2),
        ("round_ste", ad.round_ste, -3, 3),
        ("noise", lambda t: ad.add_uniform_noise(t, 3), -3, 3),
    ],
)
def test_unary_ops_at_100_random_points(name, op, lo, hi):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(lo, hi, 8)
        w = rng.normal(size=np.shape(op(Tensor(x)).data))
        if name in ("relu", "abs"):
            x[np.abs(x) < 1e-2] = 0.5  # keep off the kink
        if name == "clamp":
            x[np.abs(x + 0.5) < 1e-2] = 0.0
            x[np.abs(x - 0.7) < 1e-2] = 0.0
        if name == "round_ste":
            # STE: the analytic gradient is the identity by definition
            t = Tensor(x, requires_grad=True)
            backward(ad.sum(ad.mul(op(t), Tensor(w))))
            assert np.array_equal(t.grad, w)
            continue
        worst = max(worst, finite_diff_check(weighted(op, w), x, eps=1e-5))
    assert worst < 1e-3


@pytest.mark.parametrize("name", ["add", "sub", "mul", "scale_add"])
def test_binary_ops_at_100_random_points(name):
    rng = np.random.default_rng(11)
    for _ in range(100):
        a, b, w = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
        op = {
            "add": lambda p, q: p + q,
            "sub": lambda p, q: p - q,
            "mul": lambda p, q: p * q,
            "scale_add": lambda p, q: ad.scale_add(p, q, 0.3),
        }[name]
        assert finite_diff_check(lambda t: ad.sum(ad.mul(op(t, Tensor(b)), Tensor(w))), a, eps=1e-5) < 1e-3
        assert finite_diff_check(lambda t: ad.sum(ad.mul(op(Tensor(a), t), Tensor(w))), b, eps=1e-5) < 1e-3


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_log_domain():
    with pytest.raises(DomainError):
        ad.log(Tensor(np.array([1.0, 0.0])))


# --------------------------------------------------------------------------- softmax cross entropy


def test_ce_uniform():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 5, 9]))
    assert abs(float(loss.data) - math.log(10)) < 1e-6


def test_ce_saturated():
    logits = np.zeros((1, 10))
    logits[0, 3] = 1000.0
    assert float(ad.softmax_cross_entropy(Tensor(logits), np.array([3])).data) < 1e-6


def test_ce_gradient():
    x = rand((4, 10), 9, -3, 3)
    y = np.array([1, 0, 9, 4])
    assert finite_diff_check(lambda t: ad.softmax_cross_entropy(t, y), x, eps=1e-4) < 1e-3


def test_ce_bad_labels():
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# --------------------------------------------------------------------------- noise & rounding


@given(arrays(np.float32, 20, elements=st.floats(-50, 50, width=32)), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_uniform_noise_support_and_determinism(x, seed):
    a = ad.add_uniform_noise(Tensor(x), seed).data
    b = ad.add_uniform_noise(Tensor(x), seed).data
    assert np.array_equal(a, b)
    assert np.all(np.abs(a.astype(np.float64) - x) <= 0.5 + 1e-5)


def test_uniform_noise_gradient_is_ones():
    x = Tensor(rand((3, 4)), requires_grad=True)
    backward(ad.sum(ad.add_uniform_noise(x, 1)))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_round_examples():
    assert np.array_equal(ad.round_ste(Tensor(np.array([0.4, 0.5, -0.5, 1.6]))).data, [0, 1, -1, 2])


@given(arrays(np.int32, 12, elements=st.integers(-1000, 1000)))
def test_round_integer_fixed_point(v):
    assert np.array_equal(ad.round_ste(Tensor(v.astype(np.float32))).data, v)


def test_round_ste_grad():
    x = Tensor(rand((5,)), requires_grad=True)
    backward(ad.sum(ad.round_ste(x)))
    assert np.array_equal(x.grad, np.ones(5))


# --------------------------------------------------------------------------- backward


def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ad.sum(x))
    assert np.array_equal(x.grad, [1.0, 1.0])
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ad.sum(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * x)  # non-scalar
    with pytest.raises(GraphError):
        backward(ad.sum(Tensor(np.ones(3))))  # detached
    loss = ad.sum(x * x)
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)  # consumed


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    backward(ad.sum(y + y))
    assert np.allclose(x.grad, [12.0])


# --------------------------------------------------------------------------- finite_diff_check


def test_fd_check_of_sum_is_exact():
    # dyadic point and step: both sides are exactly 1
    assert finite_diff_check(lambda t: ad.sum(t), np.array([0.25, -1.5, 3.0, 0.0]), eps=0.5) == 0.0


def test_fd_check_of_quadratic():
    assert finite_diff_check(lambda t: ad.sum(t * t), rand((6,), 3), eps=1e-3) < 1e-5
