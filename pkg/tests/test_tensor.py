import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midrep import tensor as T
from midrep.errors import ArgumentError, ShapeError, StateError
from oracles import affine_naive, conv2d_naive, lrn_naive, numeric_grad, pool2d_naive, rel_error


def rand(rng, *shape):
    return rng.normal(size=shape)


# --------------------------------------------------------------------------
# conv2d


def test_conv_output_shape_stride2():
    rng = np.random.default_rng(0)
    x = rand(rng, 3, 112, 112).astype(np.float32)
    p = T.ConvParams(rand(rng, 64, 3, 3, 3).astype(np.float32), np.zeros(64, np.float32), stride=2, padding=1)
    assert T.conv2d(x, p).shape == (64, 56, 56)


def test_conv_sum_of_ones():
    x = np.ones((1, 3, 3), np.float32)
    p = T.ConvParams(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
    out = T.conv2d(x, p)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(1)
    x = rand(rng, 2, 5, 5)
    p = T.ConvParams(rand(rng, 3, 2, 3, 3), rand(rng, 3), stride=1, padding=1)
    np.testing.assert_allclose(T.conv2d(x, p), conv2d_naive(x, p.kernel, p.bias, 1, 1), atol=1e-5)


def test_conv_batch_equals_per_item():
    rng = np.random.default_rng(2)
    x = rand(rng, 4, 3, 9, 9).astype(np.float32)
    p = T.ConvParams(rand(rng, 5, 3, 3, 3).astype(np.float32), rand(rng, 5).astype(np.float32), 2, 1)
    batch = T.conv2d(x, p)
    for i in range(4):
        np.testing.assert_allclose(batch[i], T.conv2d(x[i], p), atol=1e-6)


def test_conv_errors():
    rng = np.random.default_rng(3)
    p = T.ConvParams(rand(rng, 2, 3, 3, 3), np.zeros(2))
    with pytest.raises(ShapeError):
        T.conv2d(rand(rng, 4, 5, 5), p)
    with pytest.raises(ShapeError):
        T.conv2d(rand(rng, 3, 2, 2), p)
    with pytest.raises(ShapeError):
        T.ConvParams(rand(rng, 2, 3, 3, 3), np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 3), st.integers(0, 2), st.sampled_from([1, 3]), st.integers(0, 2**31))
def test_conv_shape_law(side, stride, pad, k, seed):
    rng = np.random.default_rng(seed)
    if side + 2 * pad < k:
        return
    x = rand(rng, 2, side, side)
    p = T.ConvParams(rand(rng, 3, 2, k, k), np.zeros(3), stride, pad)
    expect = (side + 2 * pad - k) // stride + 1
    assert T.conv2d(x, p).shape == (3, expect, expect)


def test_conv_linearity():
    rng = np.random.default_rng(4)
    x, y = rand(rng, 3, 8, 8), rand(rng, 3, 8, 8)
    p = T.ConvParams(rand(rng, 4, 3, 3, 3), np.zeros(4), 1, 1)
    a, b = 1.7, -0.6
    np.testing.assert_allclose(T.conv2d(a * x + b * y, p), a * T.conv2d(x, p) + b * T.conv2d(y, p), atol=1e-5)


# --------------------------------------------------------------------------
# pooling


@pytest.mark.parametrize("mode", ["max", "average"])
@pytest.mark.parametrize("window,stride", [(2, 2), (3, 2), (4, 4), (1, 1)])
def test_pool_constant(mode, window, stride):
    x = np.full((2, 9, 9), 3.7, np.float32)
    out = T.pool2d(x, mode, window, stride)
    side = (9 - window) // stride + 1
    assert out.shape == (2, side, side)
    np.testing.assert_allclose(out, 3.7, rtol=1e-6)


def test_pool_footnote_schedule():
    x = np.random.default_rng(0).normal(size=(192, 28, 28)).astype(np.float32)
    mid = T.pool2d(x, "average", 4, 4)
    assert mid.shape == (192, 7, 7)
    assert T.pool2d(mid, "max", 3, 2).shape == (192, 3, 3)


def test_pool_max_matches_exhaustive_scan():
    x = np.random.default_rng(5).normal(size=(1, 6, 6))
    np.testing.assert_array_equal(T.pool2d(x, "max", 3, 2), pool2d_naive(x, "max", 3, 2))


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        T.pool2d(np.zeros((1, 3, 3)), "max", 4, 1)
    with pytest.raises(ArgumentError):
        T.pool2d(np.zeros((1, 3, 3)), "median", 2, 1)


def test_max_pool_backward_last_element_on_increasing_input():
    x = np.arange(36, dtype=np.float64).reshape(1, 6, 6)
    out, cache = T.pool2d_forward(x, "max", 2, 2)
    dx, _ = T.backward("pool", cache, np.ones_like(out))
    expected = np.zeros_like(x)
    expected[0, 1::2, 1::2] = 1
    np.testing.assert_array_equal(dx, expected)


def test_max_pool_tie_goes_to_first_element():
    x = np.zeros((1, 2, 2))
    out, cache = T.pool2d_forward(x, "max", 2, 2)
    dx, _ = T.backward("pool", cache, np.ones_like(out))
    np.testing.assert_array_equal(dx[0], [[1, 0], [0, 0]])


# --------------------------------------------------------------------------
# prelu / lrn / affine / dropout / softmax


def test_prelu_scalars():
    p = T.PreluParams(np.array([0.25]))
    assert T.prelu(np.array([5.0]), p)[0] == 5.0
    assert T.prelu(np.array([-2.0]), p)[0] == -0.5


def test_prelu_zero_slope_is_relu():
    x = np.random.default_rng(6).normal(size=(4, 5, 5))
    np.testing.assert_array_equal(T.prelu(x, T.PreluParams(np.zeros(4))), np.maximum(x, 0))


def test_prelu_slope_count_mismatch():
    with pytest.raises(ShapeError):
        T.prelu(np.zeros((3, 2, 2)), T.PreluParams(np.zeros(2)))


def test_lrn_alpha_zero():
    x = np.random.default_rng(7).normal(size=(6, 4, 4))
    np.testing.assert_allclose(T.lrn(x, T.LrnParams(5, 1.0, 0.0, 0.75)), x)
    np.testing.assert_allclose(T.lrn(x, T.LrnParams(5, 2.0, 0.0, 0.75)), x * 2.0 ** -0.75)


def test_lrn_single_channel_formula():
    x = np.random.default_rng(8).normal(scale=30, size=(1, 5, 5))
    expected = x / (2 + 2e-5 * x**2) ** 0.75
    np.testing.assert_allclose(T.lrn(x, T.LrnParams(5, 2.0, 1e-4, 0.75)), expected, rtol=1e-12)


def test_lrn_matches_oracle_and_preserves_shape():
    x = np.random.default_rng(9).normal(scale=20, size=(64, 7, 7))
    out = T.lrn(x, T.LrnParams())
    assert out.shape == x.shape
    np.testing.assert_allclose(out, lrn_naive(x, 5, 2.0, 1e-4, 0.75), rtol=1e-10)


def test_lrn_params_validated():
    with pytest.raises(ArgumentError):
        T.LrnParams(n=4)
    with pytest.raises(ArgumentError):
        T.LrnParams(k=0)


def test_affine_identity_and_oracle():
    rng = np.random.default_rng(10)
    x = rng.normal(size=5)
    np.testing.assert_array_equal(T.affine(x, np.eye(5), np.zeros(5)), x)
    w, b, v = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    np.testing.assert_allclose(T.affine(v, w, b), affine_naive(v, w, b), atol=1e-12)
    with pytest.raises(ShapeError):
        T.affine(rng.normal(size=3), w, b)


def test_dropout_modes():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(10, 10))
    np.testing.assert_array_equal(T.dropout(x, 0.5, rng, "infer"), x)
    np.testing.assert_array_equal(T.dropout(x, 0.0, rng, "train"), x)
    with pytest.raises(ArgumentError):
        T.dropout(x, 1.0, rng, "train")


def test_dropout_statistics_and_determinism():
    x = np.ones(10**6, np.float32)
    out = T.dropout(x, 0.5, np.random.default_rng(12), "train")
    assert abs(out.mean() - 1.0) < 0.01
    assert abs(np.mean(out == 0) - 0.5) < 0.01
    again = T.dropout(x, 0.5, np.random.default_rng(12), "train")
    assert out.tobytes() == again.tobytes()


def test_softmax_uniform_and_stable():
    loss, _ = T.softmax_xent(np.zeros(10), 3)
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    loss, grad = T.softmax_xent(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))
    with pytest.raises(ArgumentError):
        T.softmax_xent(np.zeros(3), 3)


def test_softmax_grad_finite_differences():
    z = np.random.default_rng(13).normal(size=7)
    _, grad = T.softmax_xent(z, 4)
    for i in range(7):
        num = numeric_grad(lambda: T.softmax_xent(z, 4)[0], z, i)
        assert rel_error(grad[i], num) <= 1e-6


def test_softmax_batch_matches_single():
    z = np.random.default_rng(14).normal(size=(3, 5))
    labels = np.array([0, 4, 2])
    loss, grad = T.softmax_xent_batch(z, labels)
    singles = [T.softmax_xent(z[i], int(labels[i])) for i in range(3)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 3)


# --------------------------------------------------------------------------
# backward passes against central differences


def _check_layer(forward, x, params, kind, rng, probes=100):
    """Finite-difference check of d(sum(out * r))/d(input and params) for one layer kind."""
    out, cache = forward()
    r = rng.normal(size=out.shape)
    dx, grads = T.backward(kind, cache, r)
    worst = 0.0

    def loss():
        return float(np.sum(forward()[0] * r))

    targets = [("x", x, dx)] + [(name, arr, grads[name]) for name, arr in params.items()]
    for _ in range(probes):
        name, arr, g = targets[rng.integers(len(targets))]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        worst = max(worst, rel_error(g[idx], numeric_grad(loss, arr, idx)))
    return worst


def test_conv_backward():
    rng = np.random.default_rng(20)
    x = rng.normal(size=(2, 3, 7, 7))
    p = T.ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), 2, 1)
    assert _check_layer(lambda: T.conv2d_forward(x, p), x, {"kernel": p.kernel, "bias": p.bias}, "conv", rng) <= 1e-6


@pytest.mark.parametrize("mode", ["max", "average"])
def test_pool_backward(mode):
    rng = np.random.default_rng(21)
    x = rng.normal(size=(2, 3, 7, 7))
    assert _check_layer(lambda: T.pool2d_forward(x, mode, 3, 2), x, {}, "pool", rng) <= 1e-6


def test_prelu_backward():
    rng = np.random.default_rng(22)
    x = rng.normal(size=(2, 4, 5, 5))
    p = T.PreluParams(rng.uniform(0, 0.5, size=4))
    assert _check_layer(lambda: T.prelu_forward(x, p), x, {"slopes": p.slopes}, "prelu", rng) <= 1e-6


def test_lrn_backward():
    rng = np.random.default_rng(23)
    x = rng.normal(scale=40, size=(2, 7, 4, 4))
    params = T.LrnParams(5, 2.0, 1e-2, 0.75)
    assert _check_layer(lambda: T.lrn_forward(x, params), x, {}, "lrn", rng) <= 1e-6


def test_affine_backward():
    rng = np.random.default_rng(24)
    x, w, b = rng.normal(size=(3, 6)), rng.normal(size=(4, 6)), rng.normal(size=4)
    assert _check_layer(lambda: T.affine_forward(x, w, b), x, {"weights": w, "bias": b}, "affine", rng) <= 1e-6


def test_dropout_backward_replays_mask():
    rng = np.random.default_rng(25)
    x = rng.normal(size=(4, 8))
    out, cache = T.dropout_forward(x, 0.5, np.random.default_rng(0), "train")
    dx, _ = T.backward("dropout", cache, np.ones_like(out))
    np.testing.assert_array_equal(dx, cache["mask"])
    np.testing.assert_array_equal(out, x * cache["mask"])


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(26)
    x = rng.normal(size=(3, 5, 5))
    p = T.ConvParams(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2), 1, 1)
    out, cache = T.conv2d_forward(x, p)
    dx, grads = T.backward("conv", cache, np.zeros_like(out))
    assert not dx.any() and not grads["kernel"].any() and not grads["bias"].any()


def test_backward_without_cache():
    with pytest.raises(StateError):
        T.backward("conv", None, np.zeros(3))
    _, cache = T.pool2d_forward(np.zeros((1, 4, 4)), "max", 2, 2)
    with pytest.raises(StateError):
        T.backward("conv", cache, np.zeros((1, 2, 2)))


# --------------------------------------------------------------------------
# tensor container


def test_precision_modes():
    assert T.as_tensor([1, 2]).dtype == np.float32
    assert T.as_tensor([1, 2], T.VERIFICATION).dtype == np.float64
    with pytest.raises(ShapeError):
        T.as_tensor(np.zeros((0, 3)))
    with pytest.raises(ArgumentError):
        T.precision_dtype("half")


def test_kernels_deterministic():
    rng = np.random.default_rng(27)
    x = rng.normal(size=(3, 9, 9)).astype(np.float32)
    p = T.ConvParams(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), np.zeros(4, np.float32), 1, 1)
    assert T.conv2d(x, p).tobytes() == T.conv2d(x.copy(), p).tobytes()
