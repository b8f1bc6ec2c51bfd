"""Bayesian kernel and feature losses with their analytic gradients.

The kernel loss for one kernel ``X`` (length ``K``) of a layer with
modulation vector ``w`` is::

    lam/2 * ( ||Xhat - w*X||^2
              + nu/sigma^2 * sum_{X_k >= 0} (X_k - mu)^2
              + nu/sigma^2 * sum_{X_k <  0} (X_k + mu)^2
              + nu * K * log(sigma^2) )

with ``Xhat = mean(w) * sign(X)`` held constant. The feature loss pulls
each sample's feature vector toward its class center with a learned
per-dimension spread.

Every kernel function accepts a single kernel (1-D ``X``, scalar ``mu``
and ``sigma``) or a whole layer (``X`` of shape ``(O, ...)``, ``mu`` and
``sigma`` of shape ``(O,)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binarize import scale_of, sign_binarize
from .errors import DimensionError, DomainError, LabelError

SIGMA_FLOOR = 1e-4


@dataclass
class BayesHyper:
    lam: float = 1e-4
    theta: float = 1e-3
    nu: float = 1e-4

    def __post_init__(self):
        if min(self.lam, self.theta, self.nu) < 0:
            raise DomainError(f"hyperparameters must be non-negative: {self}")


@dataclass
class KernelPrior:
    """Per-kernel mode magnitude ``mu`` and spread ``sigma`` of one layer."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float32)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float32), np.float32(SIGMA_FLOOR))

    @classmethod
    def estimate(cls, X: np.ndarray) -> "KernelPrior":
        """Initialize from kernel statistics: ``mu = mean|X_i|``, ``sigma = std(X_i)``."""
        rows = X.reshape(X.shape[0], -1)
        return cls(np.abs(rows).mean(axis=1), rows.std(axis=1))


@dataclass
class FeatureCenters:
    """Class centers ``c_m`` and per-dimension spreads ``sigma_m``."""

    centers: np.ndarray
    sigmas: np.ndarray
    alpha_c: float = 0.5
    sigma_lr: float = 0.01

    @classmethod
    def zeros(cls, num_classes: int, dim: int, **kw) -> "FeatureCenters":
        return cls(np.zeros((num_classes, dim), np.float32), np.ones((num_classes, dim), np.float32), **kw)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def _kernel_rows(X, mu, sigma):
    X = np.asarray(X)
    rows = X[None, :] if X.ndim == 1 else X.reshape(X.shape[0], -1)
    mu = np.broadcast_to(np.asarray(mu, dtype=rows.dtype), (rows.shape[0],))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=rows.dtype), (rows.shape[0],))
    if np.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    return rows, mu[:, None], sigma[:, None]


def _mode_residual(rows, mu):
    # X - mu on the non-negative partition, X + mu on the negative one
    return rows - mu * sign_binarize(rows)


def _recon(rows, w):
    xhat = scale_of(w) * sign_binarize(rows)
    return w * rows - xhat


def kernel_bayes_loss(X, w, mu, sigma, hyper: BayesHyper) -> float:
    if hyper.lam == 0:
        return 0.0
    rows, mu, sigma = _kernel_rows(X, mu, sigma)
    w = np.asarray(w, dtype=rows.dtype)
    if rows.shape[1] != w.shape[0]:
        raise DimensionError(f"kernel length {rows.shape[1]} != modulation length {w.shape[0]}")
    k = rows.shape[1]
    recon = (_recon(rows, w) ** 2).sum()
    prior = ((_mode_residual(rows, mu) / sigma) ** 2).sum()
    logdet = k * np.log(sigma[:, 0] ** 2).sum()
    return float(hyper.lam / 2 * (recon + hyper.nu * (prior + logdet)))


def kernel_bayes_grad_X(X, w, mu, sigma, hyper: BayesHyper) -> np.ndarray:
    rows, mu, sigma = _kernel_rows(X, mu, sigma)
    w = np.asarray(w, dtype=rows.dtype)
    g = hyper.lam * (w * _recon(rows, w) + hyper.nu * _mode_residual(rows, mu) / sigma ** 2)
    return g.reshape(np.shape(X)).astype(rows.dtype)


def kernel_bayes_grad_w(X, w, hyper: BayesHyper) -> np.ndarray:
    """Summed over all kernels of the layer; ``Xhat`` held constant."""
    X = np.asarray(X)
    rows = X[None, :] if X.ndim == 1 else X.reshape(X.shape[0], -1)
    w = np.asarray(w, dtype=rows.dtype)
    return (hyper.lam * (_recon(rows, w) * rows).sum(axis=0)).astype(rows.dtype)


def prior_grad_mu(X, mu, sigma, hyper: BayesHyper):
    """Per-kernel ``mu`` gradient, averaged over the ``K`` kernel elements.

    Returns a scalar for a single kernel, an ``(O,)`` array for a layer.
    """
    rows, mu_c, sigma_c = _kernel_rows(X, mu, sigma)
    k = rows.shape[1]
    terms = -_mode_residual(rows, mu_c) * sign_binarize(rows) / sigma_c ** 2
    g = hyper.lam * hyper.nu / k * terms.sum(axis=1)
    return g[0] if np.ndim(X) == 1 else g


def prior_grad_sigma(X, mu, sigma, hyper: BayesHyper):
    """Per-kernel ``sigma`` gradient, averaged over the ``K`` kernel elements."""
    rows, mu_c, sigma_c = _kernel_rows(X, mu, sigma)
    k = rows.shape[1]
    terms = -_mode_residual(rows, mu_c) ** 2 / sigma_c ** 3 + 1 / sigma_c
    g = hyper.lam * hyper.nu / k * terms.sum(axis=1)
    return g[0] if np.ndim(X) == 1 else g


def quantization_error(X, w) -> float:
    """``sum_i ||Xhat_i - w*X_i||^2`` over the kernels of one layer."""
    X = np.asarray(X)
    rows = X[None, :] if X.ndim == 1 else X.reshape(X.shape[0], -1)
    return float((_recon(rows, np.asarray(w, dtype=rows.dtype)) ** 2).sum())


def _check_features(features, labels, fc: FeatureCenters):
    features = np.asarray(features)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[1] != fc.centers.shape[1]:
        raise DimensionError(
            f"features shape {features.shape} incompatible with centers {fc.centers.shape}"
        )
    if labels.shape != (features.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} != ({features.shape[0]},)")
    if labels.size and (labels.min() < 0 or labels.max() >= fc.num_classes):
        raise LabelError(f"labels must lie in [0, {fc.num_classes})")
    return features, labels


def feature_bayes_loss(features, labels, fc: FeatureCenters, hyper: BayesHyper,
                       reduction: str = "mean") -> float:
    """Feature loss averaged over samples (``reduction="mean"``) or summed."""
    if hyper.theta == 0:
        return 0.0
    features, labels = _check_features(features, labels, fc)
    if features.shape[0] == 0:
        return 0.0
    c = fc.centers[labels].astype(features.dtype)
    s = fc.sigmas[labels].astype(features.dtype)
    d2 = (features - c) ** 2
    per_sample = d2.sum(axis=1) + (d2 / s ** 2 + np.log(s ** 2)).sum(axis=1)
    agg = per_sample.mean() if reduction == "mean" else per_sample.sum()
    return float(hyper.theta / 2 * agg)


def feature_bayes_grad_f(features, labels, fc: FeatureCenters, hyper: BayesHyper) -> np.ndarray:
    features, labels = _check_features(features, labels, fc)
    n = max(features.shape[0], 1)
    d = features - fc.centers[labels].astype(features.dtype)
    s = fc.sigmas[labels].astype(features.dtype)
    return (hyper.theta / n * (d + d / s ** 2)).astype(features.dtype)


def feature_bayes_grad_sigma(features, labels, fc: FeatureCenters, hyper: BayesHyper) -> np.ndarray:
    """Gradient of the (mean-reduced) feature loss w.r.t. ``fc.sigmas``."""
    features, labels = _check_features(features, labels, fc)
    n = max(features.shape[0], 1)
    s = fc.sigmas[labels].astype(features.dtype)
    d2 = (features - fc.centers[labels].astype(features.dtype)) ** 2
    per = -d2 / s ** 3 + 1 / s
    g = np.zeros(fc.sigmas.shape, dtype=features.dtype)
    np.add.at(g, labels, per)
    return hyper.theta / n * g


def update_centers(features, labels, fc: FeatureCenters, hyper: BayesHyper) -> None:
    """Center-loss style update of ``fc`` in place.

    Classes absent from the batch keep their center and spread.
    """
    features, labels = _check_features(features, labels, fc)
    grad_sigma = feature_bayes_grad_sigma(features, labels, fc, hyper)
    m = fc.num_classes
    counts = np.bincount(labels, minlength=m)
    diff = np.zeros(fc.centers.shape, dtype=np.float64)
    np.add.at(diff, labels, fc.centers[labels].astype(np.float64) - features)
    delta = diff / (1 + counts)[:, None]
    present = counts > 0
    fc.centers[present] = (fc.centers[present] - fc.alpha_c * delta[present]).astype(np.float32)
    new_sigma = fc.sigmas - fc.sigma_lr * grad_sigma
    fc.sigmas[present] = np.maximum(new_sigma[present], SIGMA_FLOOR).astype(np.float32)


@dataclass
class LossBreakdown:
    total: float
    ce: float
    kernel: float
    feature: float


def total_loss(ce: float, kernel_terms, feature_term: float) -> LossBreakdown:
    """``ce + sum(kernel_terms) + feature_term`` with its decomposition."""
    if np.ndim(kernel_terms) == 0:
        kernel = float(kernel_terms)
    else:
        kernel = float(sum(float(t) for t in kernel_terms))
    ce, feature = float(ce), float(feature_term)
    return LossBreakdown(ce + kernel + feature, ce, kernel, feature)
