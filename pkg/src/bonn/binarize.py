"""Sign binarization, straight-through gradients and XNOR/popcount convolution.

Kernels are binarized as ``alpha * sign(X)`` where ``alpha`` is the mean of
the layer's modulation vector ``w``. Gradients through ``sign`` use the
clipped straight-through estimator: the kernel window is
``-1 <= w*X <= 1``; the activation window is ``|a| <= 1``.

Bit packing uses 64-bit words, little-endian within the word (element
``64*j + b`` lives in bit ``b`` of word ``j``), row-major element order,
with pad bits cleared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import ConvGeometry, im2col

WORD_BITS = 64


def sign_binarize(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sign(0) = +1``; keeps the dtype of ``x``."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    return np.where(x >= 0, 1, -1).astype(dtype)


def _as_rows(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    w = np.asarray(w)
    if w.ndim != 1:
        raise DimensionError(f"modulation vector must be 1-D, got shape {w.shape}")
    if X.ndim == 1:
        rows = X[None, :]
    else:
        rows = X.reshape(X.shape[0], -1)
    if rows.shape[1] != w.shape[0]:
        raise DimensionError(
            f"kernel has {rows.shape[1]} elements but modulation vector has {w.shape[0]}"
        )
    return rows


def scale_of(w: np.ndarray):
    """Forward scale: the plain mean of ``w`` (not clamped)."""
    return np.asarray(w).mean()


def binarize_kernel(X: np.ndarray, w: np.ndarray):
    """Return ``(alpha * sign(X), alpha)`` with ``alpha = mean(w)``.

    ``X`` is one vectorized kernel of length ``K = len(w)`` or a stack of
    kernels whose trailing axes flatten to ``K``.
    """
    _as_rows(X, w)
    alpha = scale_of(w)
    return alpha * sign_binarize(X), alpha


def kernel_ste_grad(grad_xhat, X, w) -> np.ndarray:
    """Gradient of the task loss w.r.t. the full-precision kernels."""
    grad_xhat = np.asarray(grad_xhat)
    if grad_xhat.shape != np.shape(X):
        raise DimensionError(f"grad shape {grad_xhat.shape} != kernel shape {np.shape(X)}")
    rows = _as_rows(X, w)
    wx = rows * w
    mask = (wx >= -1) & (wx <= 1)
    g = grad_xhat.reshape(rows.shape) * mask * w
    return g.reshape(np.shape(X))


def modulation_ste_grad(grad_xhat, X, w) -> np.ndarray:
    """Gradient of the task loss w.r.t. ``w``, summed over the kernels."""
    grad_xhat = np.asarray(grad_xhat)
    if grad_xhat.shape != np.shape(X):
        raise DimensionError(f"grad shape {grad_xhat.shape} != kernel shape {np.shape(X)}")
    rows = _as_rows(X, w)
    wx = rows * w
    mask = (wx >= -1) & (wx <= 1)
    return (grad_xhat.reshape(rows.shape) * mask * rows).sum(axis=0)


def binarize_activation(a: np.ndarray) -> np.ndarray:
    return sign_binarize(a)


def activation_ste_grad(grad_out, a) -> np.ndarray:
    grad_out = np.asarray(grad_out)
    if grad_out.shape != np.shape(a):
        raise DimensionError(f"grad shape {grad_out.shape} != activation shape {np.shape(a)}")
    return grad_out * (np.abs(a) <= 1)


@dataclass(frozen=True)
class BitPackedTensor:
    """Sign bits of a tensor, one packed row per leading index.

    ``words`` has shape ``(rows, ceil(logical_len / 64))``; ``logical_len``
    is the number of bits per row; ``shape`` is the logical shape, whose
    trailing part flattens to ``logical_len``.
    """

    words: np.ndarray
    logical_len: int
    shape: tuple

    @property
    def rows(self) -> int:
        return self.words.shape[0]

    @property
    def nbytes(self) -> int:
        return self.words.size * 8


def _words_for(n: int) -> int:
    return -(-n // WORD_BITS)


def pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean ``(rows, n)`` matrix into ``(rows, ceil(n/64))`` uint64 words."""
    rows, n = bits.shape
    nw = _words_for(n)
    padded = np.zeros((rows, nw * WORD_BITS), dtype=np.uint8)
    padded[:, :n] = bits
    as_bytes = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(as_bytes).view("<u8").astype(np.uint64).reshape(rows, nw)


def pack_bits(t: np.ndarray, row_len: int | None = None) -> BitPackedTensor:
    """Pack ``t >= 0`` as bits.

    By default the whole tensor is one row. With ``row_len`` the flattened
    tensor is split into rows of that many elements, each padded to a word
    boundary.
    """
    t = np.asarray(t)
    n = t.size if row_len is None else row_len
    if n == 0 or t.size % n:
        raise DimensionError(f"tensor of {t.size} elements cannot be split into rows of {n}")
    bits = (t.reshape(-1, n) >= 0)
    return BitPackedTensor(pack_rows(bits), n, tuple(t.shape))


def unpack_bits(p: BitPackedTensor, dtype=np.float32) -> np.ndarray:
    """Inverse of :func:`pack_bits`: returns a ``±1`` tensor of ``p.shape``."""
    as_bytes = np.ascontiguousarray(p.words.astype("<u8")).view(np.uint8).reshape(p.rows, -1)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :p.logical_len]
    return (bits.astype(dtype) * 2 - 1).reshape(p.shape)


def _tail_mask(n: int, nw: int) -> np.ndarray:
    mask = np.full(nw, np.iinfo(np.uint64).max, dtype=np.uint64)
    rem = n % WORD_BITS
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def xnor_popcount_dot(a: BitPackedTensor, b: BitPackedTensor) -> int:
    """Dot product of two packed ``±1`` vectors: ``2*popcount(xnor) - n``."""
    if a.logical_len != b.logical_len or a.words.shape != b.words.shape:
        raise DimensionError(f"logical lengths differ: {a.logical_len} vs {b.logical_len}")
    n = a.logical_len
    x = ~(a.words ^ b.words) & _tail_mask(n, a.words.shape[-1])
    return int(2 * int(np.bitwise_count(x).sum()) - n)


def xnor_popcount_matmul(a_words: np.ndarray, b_words: np.ndarray, n: int,
                         chunk_words: int = 1 << 22) -> np.ndarray:
    """All-pairs packed dot products: ``(P, W) x (O, W) -> (P, O)`` int64."""
    if a_words.shape[1] != b_words.shape[1]:
        raise DimensionError(f"word counts differ: {a_words.shape[1]} vs {b_words.shape[1]}")
    p, nw = a_words.shape
    o = b_words.shape[0]
    mask = _tail_mask(n, nw)
    out = np.empty((p, o), dtype=np.int64)
    step = max(1, chunk_words // max(1, o * nw))
    for start in range(0, p, step):
        blk = a_words[start:start + step, None, :]
        x = ~(blk ^ b_words[None, :, :]) & mask
        pc = np.bitwise_count(x).sum(axis=2, dtype=np.int64)
        out[start:start + step] = 2 * pc - n
    return out


def pack_input(x: np.ndarray, geom: ConvGeometry) -> BitPackedTensor:
    """Binarize and pack ``x`` as receptive-field rows for :func:`binary_conv2d`.

    Padding is applied before the sign, so pad pixels become ``+1``. The
    logical shape is ``(N, H', W', C*k*k)``.
    """
    if x.ndim != 4:
        raise DimensionError(f"input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = geom.output_size(h), geom.output_size(w)
    cols = im2col(x, geom, pad_value=0.0)
    kk = c * geom.kernel_size ** 2
    return BitPackedTensor(pack_rows(cols >= 0), kk, (n, ho, wo, kk))


def pack_kernels(kernels: np.ndarray) -> BitPackedTensor:
    """One packed row per output channel."""
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be 4-D, got shape {kernels.shape}")
    return pack_bits(kernels, row_len=int(np.prod(kernels.shape[1:])))


def binary_conv2d(input_packed: BitPackedTensor, kernels_packed: BitPackedTensor,
                  alphas: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """XNOR/popcount convolution; returns float32 ``(N, O, H', W')``.

    ``output[:, o] = alphas[o] * (integer dot of the sign patterns)``.
    """
    if len(input_packed.shape) != 4 or len(kernels_packed.shape) != 4:
        raise DimensionError("expected packed input (N,H',W',C*k*k) and kernels (O,C,k,k)")
    o, c, kh, kw = kernels_packed.shape
    if kh != geom.kernel_size or kw != geom.kernel_size:
        raise DimensionError(f"kernel spatial size {kh}x{kw} != geometry {geom.kernel_size}")
    if input_packed.logical_len != kernels_packed.logical_len:
        raise DimensionError(
            f"receptive field has {input_packed.logical_len} bits, kernels have "
            f"{kernels_packed.logical_len}"
        )
    alphas = np.asarray(alphas, dtype=np.float32)
    if alphas.shape != (o,):
        raise DimensionError(f"alphas shape {alphas.shape} != ({o},)")
    n, ho, wo, _ = input_packed.shape
    dots = xnor_popcount_matmul(input_packed.words, kernels_packed.words, input_packed.logical_len)
    out = dots.astype(np.float32) * alphas[None, :]
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
