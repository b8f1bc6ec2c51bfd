"""Kernel-distribution diagnostics: histograms and the bimodality score."""

from __future__ import annotations

import numpy as np

from .bayes import quantization_error
from .binarize import scale_of


def bimodality_score(X: np.ndarray, mu) -> float:
    """Fraction of weights with ``|X_k|`` in ``[0.5*mu_i, 1.5*mu_i]``.

    ``X`` holds one kernel per leading index and ``mu`` one mode magnitude
    per kernel (or a scalar).
    """
    rows = np.asarray(X).reshape(np.shape(X)[0], -1) if np.ndim(X) > 1 else np.asarray(X)[None, :]
    m = np.abs(np.broadcast_to(np.asarray(mu, dtype=np.float64), (rows.shape[0],)))[:, None]
    a = np.abs(rows)
    near = (a >= 0.5 * m) & (a <= 1.5 * m)
    return float(near.mean())


def layer_histogram(X: np.ndarray, bins: int = 100):
    """``(bin_left, bin_right, count)`` rows over all kernel weights of a layer."""
    counts, edges = np.histogram(np.asarray(X, dtype=np.float64).ravel(), bins=bins)
    return list(zip(edges[:-1].tolist(), edges[1:].tolist(), counts.tolist()))


def layer_summary(params, key: str) -> dict:
    t = params.tensors
    X, w = t[f"{key}.X"], t[f"{key}.w"]
    mu, sigma = t[f"{key}.mu"], t[f"{key}.sigma"]
    return {
        "layer": key,
        "params": int(X.size),
        "alpha": float(scale_of(w)),
        "quantization_error": quantization_error(X, w),
        "bimodality": bimodality_score(X, mu),
        "mu": mu.astype(float).tolist(),
        "sigma": sigma.astype(float).tolist(),
    }
