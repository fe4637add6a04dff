import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradsuite
from oracles import conv2d_loops, matmul_loops, maxpool_scan, separable_loops
from pneumocnn import layers as L
from pneumocnn.errors import ParameterError, ShapeError, StatisticsError, UsageError
from pneumocnn.layers import Mode
from pneumocnn.tensor import PCG32


def conv_params(w, b=None):
    w = np.asarray(w, np.float32)
    return {"weight": w, "bias": np.zeros(w.shape[0], np.float32) if b is None else np.asarray(b, np.float32)}


# --- conv2d ----------------------------------------------------------------

def test_conv_ones_kernel_interior_sum():
    x = np.full((1, 1, 5, 5), 2.5, np.float32)
    y, _ = L.conv2d_forward(x, conv_params(np.ones((1, 1, 3, 3))))
    assert y[0, 0, 2, 2] == pytest.approx(9 * 2.5)
    assert y[0, 0, 0, 0] == pytest.approx(4 * 2.5)  # corner sees zero padding


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 6)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y, _ = L.conv2d_forward(x, conv_params(w))
    assert np.array_equal(y, x)


def test_conv_matches_nested_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    y, _ = L.conv2d_forward(x, conv_params(w, b))
    np.testing.assert_allclose(y, conv2d_loops(x, w, b), rtol=1e-6, atol=1e-6)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        L.conv2d_forward(np.zeros((1, 2, 4, 4), np.float32), conv_params(np.zeros((1, 3, 3, 3))))


# --- separable conv --------------------------------------------------------

def sep_params(dw, pw, b=None):
    pw = np.asarray(pw, np.float32)
    return {
        "depthwise": np.asarray(dw, np.float32),
        "pointwise": pw,
        "bias": np.zeros(pw.shape[0], np.float32) if b is None else np.asarray(b, np.float32),
    }


def delta_depthwise(c):
    dw = np.zeros((c, 1, 3, 3))
    dw[:, 0, 1, 1] = 1.0
    return dw


def test_separable_identity_composition():
    x = np.random.default_rng(3).standard_normal((2, 4, 5, 5)).astype(np.float32)
    y, _ = L.separable_conv2d_forward(x, sep_params(delta_depthwise(4), np.eye(4)[:, :, None, None]))
    assert np.array_equal(y, x)


def test_separable_reduces_to_pointwise_conv():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 6, 5)).astype(np.float32)
    pw = rng.standard_normal((5, 3, 1, 1)).astype(np.float32)
    b = rng.standard_normal(5).astype(np.float32)
    y, _ = L.separable_conv2d_forward(x, sep_params(delta_depthwise(3), pw, b))
    ref, _ = L.conv2d_forward(x, conv_params(pw, b))
    np.testing.assert_allclose(y, ref, rtol=1e-6, atol=1e-6)


def test_separable_matches_two_stage_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
    dw = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    pw = rng.standard_normal((4, 3, 1, 1)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    y, _ = L.separable_conv2d_forward(x, sep_params(dw, pw, b))
    np.testing.assert_allclose(y, separable_loops(x, dw, pw, b), rtol=1e-6, atol=1e-6)


def test_separable_shape_errors():
    with pytest.raises(ShapeError):
        L.separable_conv2d_forward(np.zeros((1, 2, 4, 4), np.float32), sep_params(delta_depthwise(3), np.zeros((2, 3, 1, 1))))


# --- max pool --------------------------------------------------------------

def test_maxpool_examples():
    y, _ = L.maxpool2x2_forward(np.array([[[[1, 2], [3, 4]]]], np.float32))
    assert y.tolist() == [[[[4.0]]]]
    y, _ = L.maxpool2x2_forward(np.full((1, 2, 6, 4), 3.0, np.float32))
    assert y.shape == (1, 2, 3, 2) and np.all(y == 3.0)


def test_maxpool_matches_window_scan_with_floor():
    x = np.random.default_rng(6).standard_normal((1, 1, 7, 7)).astype(np.float32)
    y, _ = L.maxpool2x2_forward(x)
    assert y.shape == (1, 1, 3, 3)
    assert np.array_equal(y, maxpool_scan(x).astype(np.float32))


def test_maxpool_too_small():
    with pytest.raises(ShapeError):
        L.maxpool2x2_forward(np.zeros((1, 1, 1, 4), np.float32))


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 9), st.integers(1, 9))
def test_same_padding_and_pool_shape_law(n, c, h, w):
    x = np.zeros((n, c, h, w), np.float32)
    assert L.Conv2D(c, 2).forward(x)[0].shape == (n, 2, h, w)
    assert L.SeparableConv2D(c, 3).forward(x)[0].shape == (n, 3, h, w)
    if h >= 2 and w >= 2:
        assert L.MaxPool2x2().forward(x)[0].shape == (n, c, h // 2, w // 2)


# --- batch norm --------------------------------------------------------------

def test_batchnorm_constant_batch_gives_zeros():
    bn = L.BatchNorm(2)
    y, _ = bn.forward(np.full((3, 2, 2, 2), 4.0, np.float32), Mode.TRAIN)
    assert np.all(y == 0.0)


def test_batchnorm_shift_and_scale():
    rng = np.random.default_rng(7)
    x = (rng.standard_normal((4, 3, 5, 5)) * 3 + 2).astype(np.float32)
    bn = L.BatchNorm(3)
    bn.params["beta"][...] = 5.0
    y, _ = bn.forward(x, Mode.TRAIN)
    np.testing.assert_allclose(y.astype(np.float64).mean(axis=(0, 2, 3)), 5.0, atol=1e-5)
    bn.params["gamma"][...] = [0.5, 2.0, 3.0]
    bn.params["beta"][...] = [-1.0, 0.0, 1.0]
    y = bn.forward(x, Mode.TRAIN)[0].astype(np.float64)
    # independent 64-bit recomputation of the output statistics
    for ch, (g, b) in enumerate([(0.5, -1.0), (2.0, 0.0), (3.0, 1.0)]):
        vals = y[:, ch].ravel()
        assert abs(vals.mean() - b) < 1e-4
        assert abs(vals.var() - g * g) < 1e-4 * max(1.0, g * g)


def test_batchnorm_running_stats_momentum():
    x = np.random.default_rng(8).standard_normal((4, 2, 3, 3)).astype(np.float32)
    bn = L.BatchNorm(2)
    bn.forward(x, Mode.TRAIN)
    x64 = x.astype(np.float64)
    np.testing.assert_allclose(bn.params["running_mean"], 0.1 * x64.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(bn.params["running_var"], 0.9 + 0.1 * x64.var(axis=(0, 2, 3)), rtol=1e-5)
    before = {k: v.copy() for k, v in bn.params.items()}
    y, _ = bn.forward(x, Mode.EVAL)
    assert all(np.array_equal(before[k], bn.params[k]) for k in before)
    rm, rv = before["running_mean"], before["running_var"]
    ref = (x64 - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y, ref, rtol=1e-5, atol=1e-6)


def test_batchnorm_needs_two_values_in_train():
    with pytest.raises(StatisticsError):
        L.BatchNorm(1).forward(np.zeros((1, 1, 1, 1), np.float32), Mode.TRAIN)
    L.BatchNorm(1).forward(np.zeros((1, 1, 1, 1), np.float32), Mode.EVAL)


# --- dropout ---------------------------------------------------------------

def test_dropout_identity_cases():
    x = np.random.default_rng(9).standard_normal((3, 4)).astype(np.float32)
    for mode in Mode:
        assert np.array_equal(L.dropout_forward(x, 0.0, PCG32(0), mode)[0], x)
    rng = PCG32(1)
    state = rng.state
    assert np.array_equal(L.dropout_forward(x, 0.7, rng, Mode.EVAL)[0], x)
    assert rng.state == state  # eval consumes no randomness


def test_dropout_preserves_expectation():
    # mean of 1e5 inverted-dropout outputs at rate 0.5 has std 1/sqrt(1e5) ~ 3e-3
    y, _ = L.dropout_forward(np.ones(100_000, np.float32), 0.5, PCG32(3), Mode.TRAIN)
    assert 0.98 <= y.mean() <= 1.02
    assert set(np.unique(y).tolist()) <= {0.0, 2.0}


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rate_range(rate):
    with pytest.raises(ParameterError):
        L.dropout_forward(np.ones(3, np.float32), rate, PCG32(0), Mode.TRAIN)


# --- dense and activations -------------------------------------------------

def test_dense_examples():
    x = np.random.default_rng(10).standard_normal((3, 4)).astype(np.float32)
    p = {"weight": np.eye(4, dtype=np.float32), "bias": np.zeros(4, np.float32)}
    assert np.array_equal(L.dense_forward(x, p)[0], x)
    p = {"weight": np.zeros((2, 4), np.float32), "bias": np.array([1.5, -2.0], np.float32)}
    assert L.dense_forward(x, p)[0].tolist() == [[1.5, -2.0]] * 3


def test_dense_matches_matmul_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 6)).astype(np.float32)
    w = rng.standard_normal((3, 6)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    y, _ = L.dense_forward(x, {"weight": w, "bias": b})
    np.testing.assert_allclose(y, matmul_loops(x, w.T) + b, rtol=1e-6, atol=1e-6)


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        L.dense_forward(np.zeros((2, 3), np.float32), {"weight": np.zeros((1, 4), np.float32), "bias": np.zeros(1, np.float32)})


def test_activation_examples():
    assert L.activation_forward(np.array([0.0], np.float32), "sigmoid")[0][0] == 0.5
    assert L.activation_forward(np.array([-3.0, 3.0], np.float32), "relu")[0].tolist() == [0.0, 3.0]
    x = np.random.default_rng(12).standard_normal(1000).astype(np.float32) * 10
    s = L.activation_forward(x, "sigmoid")[0].astype(np.float64)
    t = L.activation_forward(-x, "sigmoid")[0].astype(np.float64)
    assert np.max(np.abs(s + t - 1.0)) <= 1e-7


@given(st.floats(-1e4, 1e4, allow_nan=False, width=32))
def test_sigmoid_strictly_inside_unit_interval(v):
    y = L.activation_forward(np.array([v], np.float32), "sigmoid")[0][0]
    assert 0.0 < y < 1.0


# --- backward --------------------------------------------------------------

def test_dense_bias_grad_equals_grad_out():
    layer = L.Dense(3, 2)
    _, cache = layer.forward(np.ones((1, 3), np.float32), Mode.TRAIN)
    g = np.array([[0.25, -4.0]], np.float32)
    assert L.backward(layer, cache, g)[1]["bias"].tolist() == [0.25, -4.0]


@pytest.mark.parametrize("make", [
    lambda: (L.Conv2D(2, 3), (2, 2, 4, 4)),
    lambda: (L.SeparableConv2D(2, 3), (2, 2, 4, 4)),
    lambda: (L.MaxPool2x2(), (2, 2, 4, 4)),
    lambda: (L.BatchNorm(2), (2, 2, 4, 4)),
    lambda: (L.Dropout(0.5), (2, 8)),
    lambda: (L.Dense(8, 3), (2, 8)),
    lambda: (L.Activation("relu"), (2, 8)),
    lambda: (L.Activation("sigmoid"), (2, 8)),
])
def test_zero_grad_out_gives_zero_grads(make):
    layer, shape = make()
    rng = np.random.default_rng(13)
    for arr in layer.params.values():
        arr[...] = rng.standard_normal(arr.shape)
    y, cache = layer.forward(rng.standard_normal(shape).astype(np.float32), Mode.TRAIN, PCG32(0))
    gx, grads = L.backward(layer, cache, np.zeros_like(y))
    assert gx.shape == shape and not gx.any()
    assert all(not g.any() for g in grads.values())


def test_backward_rejects_mismatched_cache():
    conv, dense = L.Conv2D(1, 1), L.Dense(2, 2)
    y, cache = conv.forward(np.zeros((1, 1, 3, 3), np.float32), Mode.TRAIN)
    with pytest.raises(UsageError):
        L.backward(dense, cache, y)
    with pytest.raises(UsageError):
        L.backward(L.Conv2D(1, 1), cache, y)  # same kind, different parameters
    _, eval_cache = conv.forward(np.zeros((1, 1, 3, 3), np.float32), Mode.EVAL)
    with pytest.raises(UsageError):
        L.backward(conv, eval_cache, y)
    with pytest.raises(ShapeError):
        L.backward(conv, cache, np.zeros((1, 1, 2, 2), np.float32))


@pytest.mark.parametrize("name", sorted(gradsuite.CHECKS))
def test_finite_difference_gradients(name):
    for seed in range(20):
        assert gradsuite.CHECKS[name](seed) < 1e-5, f"{name} seed {seed}"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_property_random_seeds(seed):
    for name, check in gradsuite.CHECKS.items():
        assert check(seed) < 1e-5, name
