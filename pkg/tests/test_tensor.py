import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bonn import tensor as T
from bonn.errors import DimensionError, LabelError, NonFiniteError, UninitializedStateError
from oracles import central_diff, naive_conv2d, naive_linear, rel_err

SEEDS = range(20)
F32 = dict(dtype=np.float32, h=1e-3, tol=1e-3)
F64 = dict(dtype=np.float64, h=1e-5, tol=1e-6)


def _fd_check(objective, arrays, grads, h, tol):
    for a, g in zip(arrays, grads):
        fd = central_diff(objective, a, h)
        assert rel_err(g, fd) <= tol


def _dot(go, out):
    return float(np.sum(go.astype(np.float64) * out.astype(np.float64)))


# ---- as_tensor / geometry -------------------------------------------------

def test_checked_mode_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        T.as_tensor([1.0, np.nan], checked=True)
    assert T.as_tensor([1, 2]).dtype == np.float32


@pytest.mark.parametrize("size,k,s,p,out", [(5, 3, 1, 1, 5), (7, 3, 2, 0, 3), (28, 3, 1, 1, 28), (1, 1, 1, 0, 1)])
def test_geometry_output_size(size, k, s, p, out):
    assert T.ConvGeometry(k, s, p).output_size(size) == out


@pytest.mark.parametrize("size,k,s,p", [(6, 3, 2, 1), (2, 3, 1, 0), (8, 3, 2, 0)])
def test_geometry_rejects_fractional_or_empty(size, k, s, p):
    with pytest.raises(DimensionError):
        T.ConvGeometry(k, s, p).output_size(size)


# ---- conv2d ---------------------------------------------------------------

def test_conv_scalar():
    x = np.full((1, 1, 1, 1), 3.0, np.float32)
    k = np.full((1, 1, 1, 1), 2.0, np.float32)
    assert T.conv2d(x, k, T.ConvGeometry(1)).item() == 6.0
    gx, gk = T.conv2d_vjp(x, k, T.ConvGeometry(1), np.ones((1, 1, 1, 1), np.float32))
    assert gx.item() == 2.0 and gk.item() == 3.0


def test_conv_zero_kernels_and_zero_grad():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    k = np.zeros((4, 3, 3, 3), np.float32)
    g = T.ConvGeometry(3, 1, 1)
    assert not T.conv2d(x, k, g).any()
    gx, gk = T.conv2d_vjp(x, rng.standard_normal(k.shape).astype(np.float32), g, np.zeros((2, 4, 6, 6), np.float32))
    assert not gx.any() and not gk.any()


def test_conv_matches_naive_reference_example():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    got = T.conv2d(x.astype(np.float32), k.astype(np.float32), T.ConvGeometry(3, 1, 1))
    assert np.max(np.abs(got - naive_conv2d(x, k, 1, 1))) <= 1e-6 * 10  # float32 sums of 18 products
    got64 = T.conv2d(x, k, T.ConvGeometry(3, 1, 1))
    assert np.max(np.abs(got64 - naive_conv2d(x, k, 1, 1))) <= 1e-12


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_randomized_geometries(seed):
    rng = np.random.default_rng(seed)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    k = int(rng.choice([1, 3]))
    # pick an input size the geometry tiles exactly
    ho = int(rng.integers(1, 4))
    h = (ho - 1) * stride + k - 2 * pad
    if h < 1:
        h += stride
    x = rng.standard_normal((2, 2, h, h))
    kern = rng.standard_normal((3, 2, k, k))
    geom = T.ConvGeometry(k, stride, pad)
    try:
        geom.output_size(h)
    except DimensionError:
        pytest.skip("geometry does not tile")
    assert np.allclose(T.conv2d(x, kern, geom), naive_conv2d(x, kern, stride, pad), atol=1e-12)


def test_conv_channel_mismatch_names_axes():
    with pytest.raises(DimensionError, match="axis 1"):
        T.conv2d(np.zeros((1, 2, 4, 4), np.float32), np.zeros((1, 3, 3, 3), np.float32), T.ConvGeometry(3))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", [F32, F64], ids=["f32", "f64"])
def test_conv_vjp_finite_differences(seed, mode):
    rng = np.random.default_rng(seed)
    stride, pad = [(1, 0), (1, 1), (2, 1), (2, 0)][seed % 4]
    h = 5
    x = rng.standard_normal((2, 2, h, h)).astype(mode["dtype"])
    k = rng.standard_normal((3, 2, 3, 3)).astype(mode["dtype"])
    geom = T.ConvGeometry(3, stride, pad)
    out = T.conv2d(x, k, geom)
    go = rng.standard_normal(out.shape).astype(mode["dtype"])
    gx, gk = T.conv2d_vjp(x, k, geom, go)
    _fd_check(lambda: _dot(go, T.conv2d(x, k, geom)), [x, k], [gx, gk], mode["h"], mode["tol"])


def test_conv_vjp_shape_error():
    x = np.zeros((1, 1, 3, 3), np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    with pytest.raises(DimensionError):
        T.conv2d_vjp(x, k, T.ConvGeometry(3), np.zeros((1, 1, 2, 2), np.float32))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(3)
    geom = T.ConvGeometry(3, 2, 1)
    x = rng.standard_normal((2, 3, 7, 7))
    cols = T.im2col(x, geom)
    y = rng.standard_normal(cols.shape)
    assert math.isclose(np.sum(cols * y), np.sum(x * T.col2im(y, x.shape, geom)), rel_tol=1e-12)


# ---- linear ---------------------------------------------------------------

def test_linear_trivial():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal(T.linear(x, np.eye(3, dtype=np.float32), np.zeros(3, np.float32)), x)
    b = np.array([1, 2, 3, 4], np.float32)
    assert np.array_equal(T.linear(np.zeros((2, 3), np.float32), np.ones((4, 3), np.float32), b), np.tile(b, (2, 1)))


def test_linear_matches_naive():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)
    assert np.max(np.abs(T.linear(x, w, b) - naive_linear(x, w, b))) <= 1e-6
    got32 = T.linear(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32))
    assert np.max(np.abs(got32 - naive_linear(x, w, b))) <= 1e-6 * 5


def test_linear_vjp_trivial():
    x = np.ones((1, 3), np.float32)
    w = np.eye(3, dtype=np.float32)
    gx, gw, gb = T.linear_vjp(x, w, np.zeros((1, 3), np.float32))
    assert not gx.any() and not gw.any() and not gb.any()
    gx, _, _ = T.linear_vjp(x, w, np.array([[1, 0, 0]], np.float32))
    assert np.array_equal(gx, [[1, 0, 0]])


def test_linear_shape_errors():
    with pytest.raises(DimensionError):
        T.linear(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32), np.zeros(4, np.float32))
    with pytest.raises(DimensionError):
        T.linear_vjp(np.zeros((2, 3), np.float32), np.zeros((4, 3), np.float32), np.zeros((2, 3), np.float32))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", [F32, F64], ids=["f32", "f64"])
def test_linear_vjp_finite_differences(seed, mode):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5)).astype(mode["dtype"])
    w = rng.standard_normal((4, 5)).astype(mode["dtype"])
    b = rng.standard_normal(4).astype(mode["dtype"])
    go = rng.standard_normal((3, 4)).astype(mode["dtype"])
    grads = T.linear_vjp(x, w, go)
    _fd_check(lambda: _dot(go, T.linear(x, w, b)), [x, w, b], grads, mode["h"], mode["tol"])


# ---- batch norm -----------------------------------------------------------

def _bn(c):
    return np.ones(c, np.float32), np.zeros(c, np.float32), T.BatchNormState(c)


def test_bn_constant_input_gives_beta():
    g, _, st_ = _bn(2)
    beta = np.array([0.5, -1.0], np.float32)
    out, _ = T.batch_norm(np.full((3, 2, 2, 2), 7.0, np.float32), g, beta, st_, "train")
    assert np.allclose(out, beta[None, :, None, None])


def test_bn_idempotent_on_standardized_batch():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    g, b, st_ = _bn(3)
    out, _ = T.batch_norm(x.astype(np.float32), g, b, st_, "train")
    assert np.max(np.abs(out - x)) <= 1e-4


def test_bn_train_statistics():
    rng = np.random.default_rng(1)
    x = (3 + 2 * rng.standard_normal((16, 4, 5, 5))).astype(np.float32)
    g, b, st_ = _bn(4)
    out, _ = T.batch_norm(x, g, b, st_, "train")
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) <= 1e-3)


def test_bn_running_stats_and_eval():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32) + 1
    g, b, st_ = _bn(2)
    with pytest.raises(UninitializedStateError):
        T.batch_norm(x, g, b, st_, "eval")
    T.batch_norm(x, g, b, st_, "train")
    m = x.size // 2
    assert np.allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-6)
    assert np.allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), atol=1e-6)
    out, _ = T.batch_norm(x, g, b, st_, "eval")
    ref = (x - st_.running_mean[None, :, None, None]) / np.sqrt(st_.running_var[None, :, None, None] + 1e-5)
    assert np.allclose(out, ref, atol=1e-6)


def test_bn_vjp_trivial():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    g, b, st_ = _bn(2)
    _, cache = T.batch_norm(x, g, b, st_, "train")
    gx, gg, gb = T.batch_norm_vjp(x, g, cache, np.zeros_like(x))
    assert not gx.any() and not gg.any() and not gb.any()
    # a constant shift of the incoming gradient is removed by the mean subtraction
    gx, _, _ = T.batch_norm_vjp(x, g, cache, np.ones_like(x))
    assert np.max(np.abs(gx)) <= 1e-6


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", [F32, F64], ids=["f32", "f64"])
@pytest.mark.parametrize("bn_mode", ["train", "eval"])
def test_bn_vjp_finite_differences(seed, mode, bn_mode):
    rng = np.random.default_rng(seed)
    dt = mode["dtype"]
    x = rng.standard_normal((4, 2, 3, 3)).astype(dt)
    gamma = (1 + 0.5 * rng.standard_normal(2)).astype(dt)
    beta = rng.standard_normal(2).astype(dt)
    st_ = T.BatchNormState(2, running_mean=rng.standard_normal(2).astype(np.float32),
                           running_var=(1 + rng.random(2)).astype(np.float32), initialized=True)
    go = rng.standard_normal(x.shape).astype(dt)

    def f():
        s = T.BatchNormState(2, running_mean=st_.running_mean.copy(), running_var=st_.running_var.copy(),
                             initialized=True)
        return _dot(go, T.batch_norm(x, gamma, beta, s, bn_mode)[0])

    _, cache = T.batch_norm(x, gamma, beta, T.BatchNormState(2, running_mean=st_.running_mean.copy(),
                            running_var=st_.running_var.copy(), initialized=True), bn_mode)
    grads = T.batch_norm_vjp(x, gamma, cache, go)
    _fd_check(f, [x, gamma, beta], grads, mode["h"], mode["tol"])


# ---- pooling --------------------------------------------------------------

def test_pool_trivial():
    x = np.full((1, 2, 4, 4), 3.5, np.float32)
    assert np.array_equal(T.pool2d(x, "avg", 2), np.full((1, 2, 2, 2), 3.5, np.float32))
    m = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert T.pool2d(m, "max", 2).item() == 4
    gx = T.pool2d_vjp(m, "max", 2, None, np.array([[[[5.0]]]], np.float32))
    assert np.array_equal(gx, [[[[0, 0], [0, 5]]]])
    assert np.array_equal(T.pool2d(x, "global_avg"), np.full((1, 2), 3.5, np.float32))


def test_pool_rejects_untiled_input():
    with pytest.raises(DimensionError):
        T.pool2d(np.zeros((1, 1, 5, 5), np.float32), "max", 2)


def _distinct(rng, shape, dtype):
    # well-separated values so a finite-difference step never changes the argmax
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n - 0.5).astype(dtype)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", [F32, F64], ids=["f32", "f64"])
@pytest.mark.parametrize("kind,window,stride", [("max", 2, 2), ("avg", 2, 2), ("max", 3, 1), ("avg", 3, 2),
                                                ("global_avg", 0, 0)])
def test_pool_vjp_finite_differences(seed, mode, kind, window, stride):
    rng = np.random.default_rng(seed)
    x = _distinct(rng, (2, 2, 5 if stride != 2 or window == 3 else 4, 5 if stride != 2 or window == 3 else 4),
                  mode["dtype"])
    if kind == "global_avg":
        out = T.pool2d(x, kind)
    else:
        out = T.pool2d(x, kind, window, stride)
    go = rng.standard_normal(out.shape).astype(mode["dtype"])
    gx = T.pool2d_vjp(x, kind, window, stride, go)
    f = (lambda: _dot(go, T.pool2d(x, kind))) if kind == "global_avg" else (
        lambda: _dot(go, T.pool2d(x, kind, window, stride)))
    _fd_check(f, [x], [gx], mode["h"], mode["tol"])


def test_max_pool_fast_path_matches_general_routing():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 3, (3, 2, 6, 6)).astype(np.float32)  # many ties
    go = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    win = T._pool_windows(x, 2, 2).reshape(3, 2, 3, 3, 4)
    di, dj = np.divmod(win.argmax(axis=-1), 2)
    ref = np.zeros_like(x)
    n, c, i, j = np.indices((3, 2, 3, 3), sparse=True)
    np.add.at(ref, (n, c, 2 * i + di, 2 * j + dj), go)
    assert np.array_equal(T.pool2d_vjp(x, "max", 2, None, go), ref)


# ---- softmax cross-entropy -----------------------------------------------

def test_ce_uniform_logits():
    loss, _ = T.softmax_cross_entropy(np.zeros((3, 10), np.float32), np.array([0, 4, 9]))
    assert abs(loss - math.log(10)) <= 1e-6


def test_ce_large_margin():
    # log(1 + (M-1) e^-20) <= 1e-8 needs M <= 5; with M = 10 the exact value is 1.85e-8
    logits = np.zeros((2, 4), np.float64)
    logits[[0, 1], [3, 1]] = 20.0
    loss, _ = T.softmax_cross_entropy(logits, np.array([3, 1]))
    assert loss <= 1e-8
    huge = np.array([[1e4, 0.0]], np.float32)
    loss, g = T.softmax_cross_entropy(huge, np.array([1]))
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_ce_label_out_of_range():
    with pytest.raises(LabelError):
        T.softmax_cross_entropy(np.zeros((1, 3), np.float32), np.array([3]))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", [F32, F64], ids=["f32", "f64"])
def test_ce_grad_finite_differences(seed, mode):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 10)).astype(mode["dtype"])
    labels = rng.integers(0, 10, 4)
    _, g = T.softmax_cross_entropy(logits, labels)
    _fd_check(lambda: T.softmax_cross_entropy(logits, labels)[0], [logits], [g], mode["h"], mode["tol"])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_ce_grad_rows_sum_to_zero(n, m, seed):
    rng = np.random.default_rng(seed)
    logits = (5 * rng.standard_normal((n, m))).astype(np.float64)
    _, g = T.softmax_cross_entropy(logits, rng.integers(0, m, n))
    assert np.allclose(g.sum(axis=1), 0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1),
       st.integers(0, 2**31 - 1))
def test_conv_property_matches_naive(c, o, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    h = k + stride * 2 - 2 * pad
    if h < 1:
        return
    x = rng.standard_normal((1, c, h, h))
    kern = rng.standard_normal((o, c, k, k))
    geom = T.ConvGeometry(k, stride, pad)
    assert np.allclose(T.conv2d(x, kern, geom), naive_conv2d(x, kern, stride, pad), atol=1e-12)


def test_dtype_is_preserved():
    x = np.ones((1, 1, 3, 3))
    assert T.conv2d(x, np.ones((1, 1, 3, 3)), T.ConvGeometry(3, 1, 1)).dtype == np.float64
    assert T.conv2d(x.astype(np.float32), np.ones((1, 1, 3, 3), np.float32), T.ConvGeometry(3)).dtype == np.float32
