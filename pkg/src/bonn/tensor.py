"""Dense NCHW tensor ops with hand-written vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects. The production path is
float32; every op preserves the dtype of its inputs, so passing float64
arrays gives the 64-bit shadow mode used by the gradient tests.

Convolution is cross-correlation (no kernel flip), lowered to a single
matmul through an im2col view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, LabelError, NonFiniteError, UninitializedStateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor(x, dtype=np.float32, checked: bool = True) -> np.ndarray:
    """Convert ``x`` to a contiguous array of ``dtype``.

    With ``checked`` set, NaN and Inf are rejected.
    """
    arr = np.ascontiguousarray(x, dtype=dtype)
    if checked and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ConvGeometry:
    kernel_size: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise DimensionError(f"invalid conv geometry {self}")

    def output_size(self, size: int) -> int:
        span = size + 2 * self.padding - self.kernel_size
        if span < 0 or span % self.stride:
            raise DimensionError(
                f"input size {size} incompatible with kernel {self.kernel_size}, "
                f"stride {self.stride}, padding {self.padding}"
            )
        return span // self.stride + 1


def _require_ndim(name: str, t: np.ndarray, ndim: int):
    if t.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {t.shape}")


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def im2col(x: np.ndarray, geom: ConvGeometry, pad_value: float = 0.0) -> np.ndarray:
    """Rows are receptive fields: shape ``(N*H'*W', C*k*k)``, channel-major."""
    n, c, h, w = x.shape
    k, s = geom.kernel_size, geom.stride
    ho, wo = geom.output_size(h), geom.output_size(w)
    xp = _pad(x, geom.padding, pad_value)
    cols = np.empty((n, ho, wo, c, k, k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[..., i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k)


def _col2im_t(cols_t: np.ndarray, x_shape, geom: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`im2col`, taking the transposed ``(C*k*k, N*H'*W')`` layout."""
    n, c, h, w = x_shape
    k, s, p = geom.kernel_size, geom.stride, geom.padding
    ho, wo = geom.output_size(h), geom.output_size(w)
    g = cols_t.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols_t.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += g[:, i, j].transpose(1, 0, 2, 3)
    if p:
        out = out[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(out)


def col2im(cols: np.ndarray, x_shape, geom: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`im2col` (overlapping contributions are summed)."""
    return _col2im_t(np.ascontiguousarray(cols.T), x_shape, geom)


def _check_conv(x: np.ndarray, kernels: np.ndarray, geom: ConvGeometry):
    _require_ndim("input", x, 4)
    _require_ndim("kernels", kernels, 4)
    if x.shape[1] != kernels.shape[1]:
        raise DimensionError(
            f"channel mismatch: input axis 1 = {x.shape[1]}, kernels axis 1 = {kernels.shape[1]}"
        )
    if kernels.shape[2] != geom.kernel_size or kernels.shape[3] != geom.kernel_size:
        raise DimensionError(
            f"kernel spatial axes (2, 3) = {kernels.shape[2:]} but geometry says {geom.kernel_size}"
        )
    return geom.output_size(x.shape[2]), geom.output_size(x.shape[3])


def conv2d(x: np.ndarray, kernels: np.ndarray, geom: ConvGeometry, return_cols: bool = False):
    """Cross-correlation. With ``return_cols`` also returns the im2col matrix,
    which :func:`conv2d_vjp` can reuse."""
    ho, wo = _check_conv(x, kernels, geom)
    n, o = x.shape[0], kernels.shape[0]
    cols = im2col(x, geom)
    out = cols @ kernels.reshape(o, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def conv2d_vjp(x, kernels, geom: ConvGeometry, grad_out, cols=None):
    """Return ``(grad_input, grad_kernels)`` of ``sum(grad_out * conv2d(x, kernels))``."""
    ho, wo = _check_conv(x, kernels, geom)
    n, o = x.shape[0], kernels.shape[0]
    if grad_out.shape != (n, o, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != output shape {(n, o, ho, wo)}")
    if cols is None:
        cols = im2col(x, geom)
    g_t = grad_out.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    grad_k = (g_t @ cols).reshape(kernels.shape)
    grad_x = _col2im_t(kernels.reshape(o, -1).T @ g_t, x.shape, geom)
    return grad_x, grad_k


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _require_ndim("input", x, 2)
    _require_ndim("weight", weight, 2)
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input axis 1 = {x.shape[1]} but weight axis 1 = {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    return x @ weight.T + bias


def linear_vjp(x, weight, grad_out):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != output shape {(x.shape[0], weight.shape[0])}"
        )
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    num_features: int
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    initialized: bool = False

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features, dtype=np.float32)


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str = "train"):
    """Normalize per channel. Returns ``(output, cache)``.

    Train mode uses batch statistics and updates ``state`` in place; eval
    mode uses the running statistics. Running variance is tracked with the
    unbiased estimator.
    """
    _require_ndim("input", x, 4)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // c
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(np.float32)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(np.float32)
        state.initialized = True
    elif mode == "eval":
        if not state.initialized:
            raise UninitializedStateError("batch_norm eval called before any train step")
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, mode)


def batch_norm_vjp(x, gamma, cache, grad_out):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if mode == "eval":
        return grad_out * scale, grad_gamma, grad_beta
    m = x.size // x.shape[1]
    gx = scale / m * (
        m * grad_out
        - grad_beta[None, :, None, None]
        - xhat * grad_gamma[None, :, None, None]
    )
    return gx, grad_gamma, grad_beta


def _pool_windows(x, window: int, stride: int):
    _require_ndim("input", x, 4)
    h, w = x.shape[2:]
    if h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise DimensionError(f"pool window {window}/stride {stride} does not tile {h}x{w}")
    return sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]


def _blocks(x, window: int):
    _require_ndim("input", x, 4)
    n, c, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"pool window {window} does not tile {h}x{w}")
    return x.reshape(n, c, h // window, window, w // window, window)


def pool2d(x, kind: str, window: int = 2, stride: int | None = None) -> np.ndarray:
    """Max, average or global-average pooling.

    ``global_avg`` returns shape ``(N, C)``.
    """
    if kind == "global_avg":
        _require_ndim("input", x, 4)
        return x.mean(axis=(2, 3))
    stride = window if stride is None else stride
    if stride == window and kind == "max":
        _blocks(x, window)
        out = x[:, :, ::window, ::window].copy()
        for i in range(window):
            for j in range(window):
                np.maximum(out, x[:, :, i::window, j::window], out=out)
        return out
    if stride == window and kind == "avg":
        return _blocks(x, window).mean(axis=(3, 5))
    win = _pool_windows(x, window, stride)
    if kind == "max":
        return win.max(axis=(4, 5))
    if kind == "avg":
        return win.mean(axis=(4, 5))
    raise ValueError(f"unknown pool kind {kind!r}")


def pool2d_vjp(x, kind: str, window: int, stride: int | None, grad_out) -> np.ndarray:
    if kind == "global_avg":
        n, c, h, w = x.shape
        if grad_out.shape != (n, c):
            raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, c)}")
        return np.broadcast_to((grad_out / (h * w))[:, :, None, None], x.shape).astype(x.dtype)
    stride = window if stride is None else stride
    if stride == window and kind == "max":
        out = pool2d(x, "max", window)
        if grad_out.shape != out.shape:
            raise DimensionError(f"grad_out shape {grad_out.shape} != {out.shape}")
        # route to the first maximum of each window in row-major order
        gx = np.zeros_like(x)
        free = np.ones(out.shape, dtype=bool)
        for i in range(window):
            for j in range(window):
                hit = (x[:, :, i::window, j::window] == out) & free
                gx[:, :, i::window, j::window] = np.where(hit, grad_out, 0)
                free &= ~hit
        return gx
    win = _pool_windows(x, window, stride)
    n, c, ho, wo = win.shape[:4]
    if grad_out.shape != (n, c, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, c, ho, wo)}")
    gx = np.zeros_like(x)
    if kind == "max":
        flat = win.reshape(n, c, ho, wo, window * window)
        arg = flat.argmax(axis=-1)
        di, dj = np.divmod(arg, window)
        nn, cc, ii, jj = np.indices((n, c, ho, wo), sparse=True)
        # windows overlap when stride < window, so accumulate
        np.add.at(gx, (nn, cc, ii * stride + di, jj * stride + dj), grad_out)
        return gx
    if kind == "avg":
        share = grad_out / (window * window)
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return gx
    raise ValueError(f"unknown pool kind {kind!r}")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    _require_ndim("logits", logits, 2)
    labels = np.asarray(labels)
    n, m = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise LabelError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    # the scalar loss is accumulated in float64; the gradient keeps the logits dtype
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    grad /= n
    return float(loss), grad.astype(logits.dtype)
