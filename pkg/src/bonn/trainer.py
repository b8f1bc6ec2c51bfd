"""End-to-end training of binarized networks with the Bayesian losses.

One step: binarized forward, cross-entropy, backward with straight-through
kernel and modulation gradients, plus the analytic Bayesian-loss
gradients; then SGD with momentum per parameter group. ``mu`` and
``sigma`` use plain SGD. Weight decay touches only full-precision kernels
and full-precision layer weights.
"""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .bayes import (
    SIGMA_FLOOR,
    BayesHyper,
    FeatureCenters,
    KernelPrior,
    feature_bayes_grad_f,
    feature_bayes_loss,
    kernel_bayes_grad_w,
    kernel_bayes_grad_X,
    kernel_bayes_loss,
    prior_grad_mu,
    prior_grad_sigma,
    quantization_error,
    total_loss,
    update_centers,
)
from .binarize import scale_of
from .data import Dataset, augment
from .errors import DomainError, TrainingError
from .hist import bimodality_score
from .tensor import BatchNormState, softmax_cross_entropy

log = logging.getLogger(__name__)

SCHEDULES = {
    # factor, period, reference length in epochs
    "wrn": (0.8, 60, 200),
    "resnet": (0.1, 30, 70),
}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    hyper: BayesHyper = field(default_factory=BayesHyper)
    lr: float = 0.1          # X, BN, full-precision layers
    lr_w: float = 0.01       # modulation vectors and sigma
    lr_mu: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule_factor: float = 1.0
    schedule_period: int = 1
    phase: str = "main"
    finetune_kernel_loss: bool = True
    center_alpha: float = 0.5
    augment: str = "none"
    binary: bool = True
    deterministic: bool = True
    eval_batch_size: int = 500

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = BayesHyper(**self.hyper)
        if min(self.lr, self.lr_w, self.lr_mu) < 0:
            raise DomainError("learning rates must be non-negative")
        if self.schedule_period <= 0:
            raise DomainError("schedule period must be positive")
        if self.phase not in ("main", "finetune"):
            raise DomainError(f"unknown phase {self.phase!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def schedule_preset(kind: str, epochs: int) -> dict:
    """Step-decay settings, with the period scaled to a run of ``epochs``."""
    if kind == "none":
        return {"schedule_factor": 1.0, "schedule_period": max(epochs, 1)}
    factor, period, ref = SCHEDULES[kind]
    return {"schedule_factor": factor, "schedule_period": max(1, round(period * epochs / ref))}


def lr_at(epoch: int, cfg: TrainConfig) -> dict:
    """Learning rate of each parameter group at 0-based ``epoch``."""
    scale = cfg.schedule_factor ** (epoch // cfg.schedule_period)
    return {"main": cfg.lr * scale, "w_sigma": cfg.lr_w * scale, "mu": cfg.lr_mu * scale}


def param_group(key: str) -> str:
    name = key.rsplit(".", 1)[1]
    if name in ("w", "sigma"):
        return "w_sigma"
    if name == "mu":
        return "mu"
    return "main"


def uses_momentum(key: str) -> bool:
    return key.rsplit(".", 1)[1] not in ("mu", "sigma")


def decays(key: str) -> bool:
    return key.rsplit(".", 1)[1] in ("X", "weight")


def init_params(arch: M.Architecture, seed: int) -> M.Params:
    """Kaiming-normal kernels, jittered modulation vectors, prior from kernel statistics."""
    rng = np.random.default_rng(seed)
    shapes = M.param_shapes(arch)
    tensors = {}
    for key, shape in shapes.items():
        name = key.rsplit(".", 1)[1]
        if name in ("X", "weight"):
            fan_in = int(np.prod(shape[1:]))
            tensors[key] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        elif name == "gamma":
            tensors[key] = np.ones(shape, np.float32)
        elif name in ("beta", "bias"):
            tensors[key] = np.zeros(shape, np.float32)
    for layer in arch.binary_layers():
        X = tensors[f"{layer}.X"]
        k = int(np.prod(X.shape[1:]))
        base = float(np.abs(X).mean())
        jitter = rng.uniform(-0.1, 0.1, size=k)
        tensors[f"{layer}.w"] = (base * (1.0 + jitter)).astype(np.float32)
        prior = KernelPrior.estimate(X)
        tensors[f"{layer}.mu"] = prior.mu
        tensors[f"{layer}.sigma"] = prior.sigma
    tensors = {k: tensors[k] for k in shapes}
    bn_state = {}
    for key, spec in M.iter_layers(arch.layers):
        if spec.kind == "bn":
            bn_state[key] = BatchNormState(spec.in_ch)
    centers = FeatureCenters.zeros(arch.num_classes, arch.feature_dim)
    return M.Params(tensors, bn_state, centers)


class SGD:
    """Momentum SGD over a flat parameter dict, grouped by parameter name."""

    def __init__(self, cfg: TrainConfig, velocity: dict | None = None):
        self.cfg = cfg
        self.velocity = {} if velocity is None else velocity

    def step(self, tensors: dict, grads: dict, lrs: dict):
        cfg = self.cfg
        for key in tensors:
            g = grads.get(key)
            if g is None:
                continue
            p = tensors[key]
            lr = np.float32(lrs[param_group(key)])
            if decays(key) and cfg.weight_decay:
                g = g + np.float32(cfg.weight_decay) * p
            if uses_momentum(key):
                v = self.velocity.get(key)
                v = g.astype(np.float32) if v is None else np.float32(cfg.momentum) * v + g
                self.velocity[key] = v
                tensors[key] = (p - lr * v).astype(np.float32)
            else:
                tensors[key] = (p - lr * g).astype(np.float32)
            if key.endswith(".sigma"):
                tensors[key] = np.maximum(tensors[key], np.float32(SIGMA_FLOOR))


def _forward_mode(cfg: TrainConfig) -> str:
    return "binary_train" if cfg.binary else "float_baseline"


def _eval_mode(cfg: TrainConfig) -> str:
    return "binary_eval" if cfg.binary else "float_eval"


def _check_finite(grads: dict, step: int):
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", layer=key.rsplit(".", 1)[0], step=step)


def train_step(arch: M.Architecture, params: M.Params, opt: SGD, x, y, cfg: TrainConfig,
               lrs: dict, step: int = 0) -> dict:
    """One update of ``params`` in place; returns the loss fragment for this batch."""
    hyper = cfg.hyper
    logits, feats, cache = M.forward(arch, params, x, _forward_mode(cfg))
    ce, g_logits = softmax_cross_entropy(logits, y)
    finetune = cfg.phase == "finetune"
    feature_term, feature_grad = 0.0, None
    if finetune and hyper.theta > 0:
        feature_term = feature_bayes_loss(feats, y, params.centers, hyper)
        feature_grad = feature_bayes_grad_f(feats, y, params.centers, hyper)
    grads, _ = M.backward(arch, params, cache, g_logits, feature_grad)

    kernel_terms = []
    use_kernel = cfg.binary and (not finetune or cfg.finetune_kernel_loss)
    if use_kernel:
        t = params.tensors
        for layer in arch.binary_layers():
            X, w = t[f"{layer}.X"], t[f"{layer}.w"]
            mu, sigma = t[f"{layer}.mu"], t[f"{layer}.sigma"]
            kernel_terms.append(kernel_bayes_loss(X, w, mu, sigma, hyper))
            grads[f"{layer}.X"] = grads[f"{layer}.X"] + kernel_bayes_grad_X(X, w, mu, sigma, hyper)
            grads[f"{layer}.w"] = grads[f"{layer}.w"] + kernel_bayes_grad_w(X, w, hyper)
            grads[f"{layer}.mu"] = np.asarray(prior_grad_mu(X, mu, sigma, hyper), np.float32)
            grads[f"{layer}.sigma"] = np.asarray(prior_grad_sigma(X, mu, sigma, hyper), np.float32)
    _check_finite(grads, step)
    opt.step(params.tensors, grads, lrs)
    if finetune:
        update_centers(feats, y, params.centers, hyper)
    loss = total_loss(ce, kernel_terms, feature_term)
    correct = int((logits.argmax(axis=1) == y).sum())
    return {"ce": loss.ce, "kernel": loss.kernel, "feature": loss.feature, "total": loss.total,
            "correct": correct, "n": len(y)}


@dataclass
class MetricsRow:
    epoch: int
    L_S: float
    L_B_kernel: float
    L_B_feature: float
    total: float
    quant_error: float
    train_acc: float
    test_acc: float
    lr: float
    alphas: dict = field(default_factory=dict)
    bimodality: dict = field(default_factory=dict)

    def flat(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("alphas", "bimodality")}
        d.update({f"alpha[{k}]": v for k, v in self.alphas.items()})
        d.update({f"bimodality[{k}]": v for k, v in self.bimodality.items()})
        return d


def kernel_snapshot(arch: M.Architecture, params: M.Params) -> dict:
    """Quantization error, per-layer scale and bimodality of the current kernels."""
    t = params.tensors
    layers = arch.binary_layers()
    return {
        "quant_error": float(sum(quantization_error(t[f"{k}.X"], t[f"{k}.w"]) for k in layers)),
        "alphas": {k: float(scale_of(t[f"{k}.w"])) for k in layers},
        "bimodality": {k: bimodality_score(t[f"{k}.X"], t[f"{k}.mu"]) for k in layers},
    }


def evaluate(arch: M.Architecture, params, ds: Dataset, mode: str = "binary_eval",
             batch_size: int = 500) -> float:
    """Top-1 accuracy. ``params`` may be a :class:`~bonn.model.PackedModel` with
    ``mode="packed_eval"``."""
    if len(ds) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = ds.images[start:start + batch_size]
        logits, _, _ = M.forward(arch, params, x, mode)
        correct += int((logits.argmax(axis=1) == ds.labels[start:start + batch_size]).sum())
    return correct / len(ds)


@contextlib.contextmanager
def _determinism(enabled: bool):
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclass
class FitResult:
    rows: list
    initial: dict
    best: M.Checkpoint
    last: M.Checkpoint


def _checkpoint(arch, params, opt, cfg, epoch, extra=None) -> M.Checkpoint:
    meta = {"epoch": epoch, "seed": cfg.seed, "config": cfg.to_dict()}
    if extra:
        meta.update(extra)
    return M.Checkpoint(arch, params.copy(), meta, {k: v.copy() for k, v in opt.velocity.items()})


def fit(arch: M.Architecture, train: Dataset, test: Dataset | None, cfg: TrainConfig,
        resume: M.Checkpoint | None = None, on_epoch=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs (continuing after ``resume``'s epoch if given).

    Shuffling and augmentation for epoch ``e`` draw from a generator seeded
    with ``(seed, e)``, so a resumed run replays the same batches.
    """
    if resume is not None:
        params = resume.params.copy()
        opt = SGD(cfg, {k: v.copy() for k, v in resume.optimizer.items()})
        start = int(resume.meta.get("epoch", 0))
    else:
        params = init_params(arch, cfg.seed)
        opt = SGD(cfg)
        start = 0
    params.centers.alpha_c = cfg.center_alpha
    initial = kernel_snapshot(arch, params)
    rows = []
    best = _checkpoint(arch, params, opt, cfg, start)
    best_acc = -1.0
    step = 0
    with _determinism(cfg.deterministic):
        for epoch in range(start, cfg.epochs):
            lrs = lr_at(epoch, cfg)
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(train))
            sums = {"ce": 0.0, "kernel": 0.0, "feature": 0.0, "total": 0.0}
            correct = seen = batches = 0
            for b in range(0, len(order), cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                x = augment(train.images[idx], cfg.augment, rng)
                frag = train_step(arch, params, opt, x, train.labels[idx], cfg, lrs, step)
                step += 1
                n = frag["n"]
                sums["ce"] += frag["ce"] * n
                sums["feature"] += frag["feature"] * n
                sums["kernel"] += frag["kernel"] * n
                sums["total"] += frag["total"] * n
                correct += frag["correct"]
                seen += n
                batches += 1
            snap = kernel_snapshot(arch, params)
            test_acc = evaluate(arch, params, test, _eval_mode(cfg), cfg.eval_batch_size) if test else float("nan")
            row = MetricsRow(
                epoch=epoch + 1,
                L_S=sums["ce"] / seen,
                L_B_kernel=sums["kernel"] / seen,
                L_B_feature=sums["feature"] / seen,
                total=sums["total"] / seen,
                quant_error=snap["quant_error"],
                train_acc=correct / seen,
                test_acc=test_acc,
                lr=lrs["main"],
                alphas=snap["alphas"],
                bimodality=snap["bimodality"],
            )
            rows.append(row)
            log.info("epoch %d  L_S %.4f  L_B %.3g/%.3g  qerr %.4g  test %.4f", row.epoch, row.L_S,
                     row.L_B_kernel, row.L_B_feature, row.quant_error, row.test_acc)
            for a in snap["alphas"].values():
                if a <= 0:
                    log.warning("non-positive binarization scale %.4g at epoch %d", a, row.epoch)
            if test_acc > best_acc:
                best_acc = test_acc
                best = _checkpoint(arch, params, opt, cfg, epoch + 1, {"test_acc": test_acc})
            if on_epoch is not None:
                on_epoch(row, params)
    last = _checkpoint(arch, params, opt, cfg, max(cfg.epochs, start))
    return FitResult(rows, initial, best, last)


def metrics_csv(rows: list) -> str:
    """CSV text, one row per epoch; float fields use ``repr`` so runs compare byte-for-byte."""
    buf = io.StringIO()
    if not rows:
        fields = [f for f in MetricsRow.__dataclass_fields__ if f not in ("alphas", "bimodality")]
        csv.writer(buf, lineterminator="\n").writerow(fields)
        return buf.getvalue()
    flat = [r.flat() for r in rows]
    w = csv.DictWriter(buf, fieldnames=list(flat[0]), lineterminator="\n")
    w.writeheader()
    for r in flat:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
