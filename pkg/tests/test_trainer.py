import math

import numpy as np
import pytest

from bonn import model as M
from bonn import trainer as Tr
from bonn.bayes import SIGMA_FLOOR, BayesHyper
from bonn.data import Dataset
from bonn.errors import DomainError, TrainingError
from ste_baseline import SteBaseline


def synthetic(n, seed=0, shape=(1, 28, 28)):
    """Class-dependent blobs: learnable, cheap, deterministic."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    proto = rng.standard_normal((10, *shape)).astype(np.float32)
    images = proto[labels] + 0.5 * rng.standard_normal((n, *shape)).astype(np.float32)
    return Dataset(images.astype(np.float32), labels.astype(np.int64), "train")


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=32, seed=0, eval_batch_size=64)
    base.update(kw)
    return Tr.TrainConfig(**base)


ARCH = M.build("cnn-small")


# ---- init -----------------------------------------------------------------

def test_init_is_deterministic_and_valid():
    a, b = Tr.init_params(ARCH, 3), Tr.init_params(ARCH, 3)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    c = Tr.init_params(ARCH, 4)
    assert not np.array_equal(a.tensors["3.X"], c.tensors["3.X"])
    for layer in ARCH.binary_layers():
        X, w = a.tensors[f"{layer}.X"], a.tensors[f"{layer}.w"]
        assert np.all(a.tensors[f"{layer}.mu"] > 0)
        assert np.all(a.tensors[f"{layer}.sigma"] >= SIGMA_FLOOR)
        base = np.abs(X).mean()
        assert np.all(np.abs(w / base - 1) <= 0.1 + 1e-6)
        rows = X.reshape(X.shape[0], -1)
        assert np.allclose(a.tensors[f"{layer}.mu"], np.abs(rows).mean(axis=1), rtol=1e-6)
    assert np.all(a.tensors["1.gamma"] == 1) and np.all(a.tensors["1.beta"] == 0)
    assert np.all(a.centers.centers == 0) and np.all(a.centers.sigmas == 1)
    std = a.tensors["7.X"].std()
    assert abs(std - math.sqrt(2 / (32 * 9))) < 0.05 * std


# ---- optimizer and schedules ------------------------------------------------

def test_parameter_groups():
    assert Tr.param_group("3.w") == Tr.param_group("3.sigma") == "w_sigma"
    assert Tr.param_group("3.mu") == "mu"
    assert {Tr.param_group(k) for k in ("3.X", "0.weight", "1.gamma", "11.bias")} == {"main"}
    assert Tr.decays("3.X") and Tr.decays("11.weight")
    assert not any(Tr.decays(k) for k in ("1.gamma", "1.beta", "11.bias", "3.w", "3.mu"))


def test_zero_learning_rates_leave_params_unchanged():
    ds = synthetic(64)
    cfg = small_cfg(epochs=1, lr=0.0, lr_w=0.0, lr_mu=0.0)
    p = Tr.init_params(ARCH, 0)
    res = Tr.fit(ARCH, ds, None, cfg)
    for k, v in p.tensors.items():
        assert np.array_equal(res.last.params.tensors[k], v), k


def test_sigma_floor_holds_for_constant_kernels():
    p = Tr.init_params(ARCH, 0)
    p.tensors["3.X"][...] = 0.05
    from bonn.bayes import KernelPrior
    prior = KernelPrior.estimate(p.tensors["3.X"])
    assert np.all(prior.sigma == np.float32(SIGMA_FLOOR))


def test_sigma_floor_survives_steps():
    ds = synthetic(64)
    cfg = small_cfg(epochs=1, lr_w=10.0, hyper=BayesHyper(1.0, 0.0, 1.0))
    res = Tr.fit(ARCH, ds, None, cfg)
    for layer in ARCH.binary_layers():
        s = res.last.params.tensors[f"{layer}.sigma"]
        assert np.all(s >= np.float32(SIGMA_FLOOR)) and np.all(np.isfinite(s))


def test_lr_schedules():
    wrn = small_cfg(lr=0.01, **Tr.schedule_preset("wrn", 200))
    assert Tr.lr_at(0, wrn)["main"] == pytest.approx(0.01)
    assert Tr.lr_at(59, wrn)["main"] == pytest.approx(0.01)
    assert Tr.lr_at(60, wrn)["main"] == pytest.approx(0.008)
    res = small_cfg(lr=0.1, **Tr.schedule_preset("resnet", 70))
    assert Tr.lr_at(29, res)["main"] == pytest.approx(0.1)
    assert Tr.lr_at(30, res)["main"] == pytest.approx(0.01)
    assert Tr.lr_at(30, res)["w_sigma"] == pytest.approx(0.001)


def test_config_rejects_bad_values():
    with pytest.raises(DomainError):
        small_cfg(lr=-1)
    with pytest.raises(DomainError):
        small_cfg(phase="pretrain")
    with pytest.raises(DomainError):
        BayesHyper(-1.0, 0.0, 1.0)


def test_momentum_and_decay_by_hand():
    cfg = small_cfg(momentum=0.5, weight_decay=0.1)
    opt = Tr.SGD(cfg)
    t = {"a.X": np.ones(2, np.float32), "a.mu": np.ones(2, np.float32), "a.beta": np.ones(2, np.float32)}
    g = {k: np.ones(2, np.float32) for k in t}
    lrs = {"main": 0.1, "w_sigma": 0.1, "mu": 0.1}
    opt.step(t, g, lrs)
    opt.step(t, g, lrs)
    # X: v1 = 1.1, p1 = 0.89; v2 = 0.5*1.1 + 1 + 0.1*0.89 = 1.639, p2 = 0.89 - 0.1639
    assert np.allclose(t["a.X"], 0.89 - 0.1639)
    assert np.allclose(t["a.beta"], 1 - 0.1 - 0.15)  # momentum, no decay
    assert np.allclose(t["a.mu"], 1 - 0.2)  # plain SGD


# ---- fit ------------------------------------------------------------------

def test_zero_epochs_returns_init():
    res = Tr.fit(ARCH, synthetic(32), None, small_cfg(epochs=0))
    assert res.rows == []
    init = Tr.init_params(ARCH, 0)
    assert all(np.array_equal(res.last.params.tensors[k], v) for k, v in init.tensors.items())
    assert Tr.metrics_csv([]).startswith("epoch,L_S,")


def test_accounting_identity_and_determinism():
    ds, te = synthetic(96, 1), synthetic(40, 2)
    cfg = small_cfg(hyper=BayesHyper(1e-2, 1e-3, 1e-2), phase="finetune")
    a = Tr.fit(ARCH, ds, te, cfg)
    b = Tr.fit(ARCH, ds, te, cfg)
    assert Tr.metrics_csv(a.rows) == Tr.metrics_csv(b.rows)
    for r in a.rows:
        assert abs(r.total - (r.L_S + r.L_B_kernel + r.L_B_feature)) <= 1e-6
        assert r.L_B_feature > 0 and r.L_B_kernel != 0
    assert not np.array_equal(a.last.params.centers.centers, 0)


def test_resume_replays_identically(tmp_path):
    ds, te = synthetic(64, 3), synthetic(20, 4)
    full = Tr.fit(ARCH, ds, te, small_cfg(epochs=3))
    first = Tr.fit(ARCH, ds, te, small_cfg(epochs=1))
    path = tmp_path / "c.bonn"
    M.save_checkpoint(path, first.last)
    rest = Tr.fit(ARCH, ds, te, small_cfg(epochs=3), resume=M.load_checkpoint(path))
    assert Tr.metrics_csv(full.rows[1:]) == Tr.metrics_csv(rest.rows)
    assert M.checkpoint_bytes(full.last) == M.checkpoint_bytes(rest.last)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_gradient_is_reported():
    ds = synthetic(32)
    ds.images[0, 0, 0, 0] = np.inf
    with pytest.raises((TrainingError, FloatingPointError)):
        Tr.fit(ARCH, ds, None, small_cfg(epochs=1))


def test_training_reduces_task_loss():
    ds = synthetic(320, 5)
    res = Tr.fit(ARCH, ds, None, small_cfg(epochs=3))
    assert res.rows[-1].L_S < res.rows[0].L_S


def test_evaluate_edge_cases():
    p = Tr.init_params(ARCH, 0)
    assert Tr.evaluate(ARCH, p, synthetic(10).take(np.arange(0)), "float_eval") == 0.0
    ds = synthetic(20)
    p.tensors["11.weight"][...] = 0
    p.tensors["11.bias"][...] = 0
    p.tensors["11.bias"][7] = 1
    acc = Tr.evaluate(ARCH, p, ds, "float_baseline", batch_size=7)
    assert acc == np.mean(ds.labels == 7)


# ---- baseline equivalence ---------------------------------------------------

def run_lockstep(ds, steps, batch=32, seed=0):
    """Drive the trainer and the plain STE stepper on the same batches; yield per-step pairs."""
    cfg = small_cfg(batch_size=batch, seed=seed, hyper=BayesHyper(0.0, 0.0, 1e-4))
    params = Tr.init_params(ARCH, seed)
    ref = SteBaseline(params.tensors, cfg.lr, cfg.lr_w, cfg.momentum, cfg.weight_decay)
    opt = Tr.SGD(cfg)
    lrs = Tr.lr_at(0, cfg)
    order = np.random.default_rng([seed, 0]).permutation(len(ds))
    nb = len(ds) // batch
    for s in range(steps):
        idx = order[(s % nb) * batch:(s % nb + 1) * batch]
        x, y = ds.images[idx], ds.labels[idx]
        frag = Tr.train_step(ARCH, params, opt, x, y, cfg, lrs, s)
        loss, _ = ref.step(x, y)
        yield frag, loss, params, ref, opt


def assert_same_state(params, ref, opt):
    for k, v in ref.p.items():
        assert v.tobytes() == params.tensors[k].tobytes(), k
    for k, v in ref.v.items():
        assert v.tobytes() == opt.velocity[k].tobytes(), k
    for k, s in ref.bn.items():
        assert s.running_mean.tobytes() == params.bn[k].running_mean.tobytes()
        assert s.running_var.tobytes() == params.bn[k].running_var.tobytes()


def test_trainer_matches_plain_ste_stepper():
    ds = synthetic(160, 6)
    for frag, loss, params, ref, opt in run_lockstep(ds, 6):
        assert frag["ce"] == loss and frag["kernel"] == 0.0
        assert_same_state(params, ref, opt)
