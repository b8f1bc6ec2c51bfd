"""Command-line entry point: ``bonn <command> [flags]``.

Exit codes: 0 ok, 2 usage or missing data, 3 numeric failure, 4 I/O or format error.
Every command writes a JSON run manifest (next to its outputs, or to
``--manifest`` when it has no output directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import model as M
from . import trainer as Tr
from .bayes import BayesHyper
from .binarize import binary_conv2d, pack_input, pack_kernels, sign_binarize
from .errors import BonnError, FormatError, NonFiniteError, TrainingError, ValidationError
from .hist import layer_histogram, layer_summary
from .tensor import ConvGeometry, conv2d

log = logging.getLogger("bonn")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(BonnError):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None = None
    datasets: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _data_dir(args) -> str:
    d = args.data_dir or os.environ.get("BONN_DATA_DIR")
    if not d:
        raise UsageError("no --data-dir given and BONN_DATA_DIR is unset")
    if not Path(d).is_dir():
        raise UsageError(f"data directory {d} does not exist")
    return d


def _load_data(args):
    d = _data_dir(args)
    try:
        train, test = D.load(args.dataset, d)
        hashes = {p.name: D.file_digest(p) for p in D.dataset_files(args.dataset, d)}
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    return train, test, hashes


def _in_shape(dataset: str):
    return (1, 28, 28) if dataset == "mnist" else (3, 32, 32)


def _build_arch(name: str, dataset: str) -> M.Architecture:
    try:
        return M.build(name, 10, _in_shape(dataset))
    except ValueError as e:
        if isinstance(e, ValidationError):
            raise
        raise UsageError(str(e)) from e


# ----------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test, hashes = _load_data(args)
    if args.subset:
        train = D.subset(train, args.subset, args.seed)
    if args.test_subset:
        test = D.subset(test, args.test_subset, args.seed)
    resume = M.load_checkpoint(args.resume) if args.resume else None
    arch = resume.arch if resume else _build_arch(args.arch, args.dataset)
    sched = Tr.schedule_preset(args.schedule, args.epochs)
    cfg = Tr.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        hyper=BayesHyper(args.lam, args.theta, args.nu),
        lr=args.lr, lr_w=args.lr_w, lr_mu=args.lr_mu, momentum=args.momentum,
        weight_decay=args.weight_decay, phase=args.phase, augment=args.augment,
        binary=not args.full_precision, deterministic=args.deterministic, **sched,
    )
    result = Tr.fit(arch, train, test, cfg, resume=resume)
    paths = {
        "checkpoint": out / "checkpoint.bonn",
        "best": out / "best.bonn",
        "metrics": out / "metrics.csv",
        "manifest": out / "manifest.json",
    }
    M.save_checkpoint(paths["checkpoint"], result.last)
    M.save_checkpoint(paths["best"], result.best)
    paths["metrics"].write_text(Tr.metrics_csv(result.rows))
    last = result.rows[-1] if result.rows else None
    manifest = RunManifest(
        "train", sys.argv[1:], {"arch": arch.name, "arch_hash": arch.hash(), "dataset": args.dataset,
                                "subset": args.subset, **cfg.to_dict()},
        seed=args.seed, datasets=hashes, artifacts={k: str(v) for k, v in paths.items()},
        results={"initial": result.initial,
                 "final_test_acc": last.test_acc if last else None,
                 "best_test_acc": result.best.meta.get("test_acc")},
        wall_clock_s=time.time() - t0,
    )
    manifest.write(paths["manifest"])
    if last:
        print(f"epoch {last.epoch}: L_S {last.L_S:.4f}  quant_error {last.quant_error:.4f}  "
              f"test_acc {last.test_acc:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def _eval_model(args, ckpt):
    if args.packed:
        return M.load_packed(M.export_packed(ckpt)), "packed_eval"
    return ckpt.params, args.mode


def cmd_eval(args) -> int:
    t0 = time.time()
    ckpt = M.load_checkpoint(args.ckpt)
    _, test, hashes = _load_data(args)
    if args.subset:
        test = D.subset(test, args.subset, 0)
    params, mode = _eval_model(args, ckpt)
    acc = Tr.evaluate(ckpt.arch, params, test, mode)
    print(f"{mode} accuracy on {len(test)} {args.dataset} test images: {acc:.4f}")
    if args.manifest:
        RunManifest("eval", sys.argv[1:], {"ckpt": args.ckpt, "mode": mode, "dataset": args.dataset},
                    datasets=hashes, results={"accuracy": acc}, wall_clock_s=time.time() - t0,
                    ).write(args.manifest)
    return EXIT_OK


def cmd_export_hist(args) -> int:
    t0 = time.time()
    ckpt = M.load_checkpoint(args.ckpt)
    layers = ckpt.arch.binary_layers()
    if args.layer:
        missing = [k for k in args.layer if k not in layers]
        if missing:
            raise UsageError(f"not binarized layers: {missing}; choose from {layers}")
        layers = args.layer
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts, summary = {}, {"checkpoint": args.ckpt, "layers": []}
    for key in layers:
        path = out / f"hist_layer{key}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "count"])
            w.writerows(layer_histogram(ckpt.params.tensors[f"{key}.X"], args.bins))
        artifacts[key] = str(path)
        summary["layers"].append(layer_summary(ckpt.params, key))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    artifacts["summary"] = str(out / "summary.json")
    RunManifest("export-hist", sys.argv[1:], {"ckpt": args.ckpt, "bins": args.bins, "layers": layers},
                artifacts=artifacts, wall_clock_s=time.time() - t0).write(out / "manifest.json")
    for s in summary["layers"]:
        print(f"layer {s['layer']}: alpha {s['alpha']:.5f}  quant_error {s['quantization_error']:.4f}  "
              f"bimodality {s['bimodality']:.4f}")
    return EXIT_OK


def cmd_pack(args) -> int:
    t0 = time.time()
    ckpt = M.load_checkpoint(args.ckpt)
    blob = M.export_packed(ckpt)
    Path(args.out).write_bytes(blob)
    packed = M.load_packed(blob)
    print(f"wrote {args.out} ({len(blob)} bytes); binary layer bytes: {packed.layer_bytes}")
    if args.manifest:
        RunManifest("pack", sys.argv[1:], {"ckpt": args.ckpt}, artifacts={"packed": args.out},
                    results={"bytes": len(blob), "layer_bytes": packed.layer_bytes},
                    wall_clock_s=time.time() - t0).write(args.manifest)
    return EXIT_OK


def cmd_compress_ratio(args) -> int:
    t0 = time.time()
    if args.ckpt:
        source = M.load_checkpoint(args.ckpt).arch
        label = args.ckpt
    elif args.arch == "resnet18-table":
        source, label = M.RESNET18_TABLE, "resnet18-table"
    else:
        source, label = _build_arch(args.arch, args.dataset), args.arch
    rep = M.compression_report(source)
    print(f"{label}: compression ratio {rep.ratio:.4f} (weights+biases), "
          f"{rep.ratio_with_bn:.4f} (including batch-norm affine)")
    print(f"  parameters: {rep.total_params} total, {rep.binarized_params} binarized, "
          f"{rep.float_params} float, {rep.bn_params} batch-norm")
    if args.manifest:
        RunManifest("compress-ratio", sys.argv[1:], {"source": label}, results=M.report_dict(rep),
                    wall_clock_s=time.time() - t0).write(args.manifest)
    return EXIT_OK


def _parse_shape(text: str):
    try:
        c, o, hw = (int(v) for v in text.split(","))
    except ValueError as e:
        raise UsageError(f"shape {text!r} must be C,O,HW") from e
    return c, o, hw


def bench_rows(shapes, batch: int = 1, repeats: int = 3, seed: int = 0) -> list[dict]:
    """Time packed XNOR convolution against float convolution on ``(C, O, HW)`` shapes."""
    rng = np.random.default_rng(seed)
    geom = ConvGeometry(3, 1, 0)
    rows = []
    for c, o, hw in shapes:
        sx = sign_binarize(rng.standard_normal((batch, c, hw, hw)).astype(np.float32))
        sk = sign_binarize(rng.standard_normal((o, c, 3, 3)).astype(np.float32))
        ones = np.ones(o, np.float32)
        ref = conv2d(sx, sk, geom)
        kp = pack_kernels(sk)
        got = binary_conv2d(pack_input(sx, geom), kp, ones, geom)
        if not np.array_equal(got, ref):
            raise NonFiniteError(f"packed and float paths disagree for shape {(c, o, hw)}")
        t_float = min(_timed(lambda: conv2d(sx, sk, geom)) for _ in range(repeats))
        t_packed = min(_timed(lambda: binary_conv2d(pack_input(sx, geom), kp, ones, geom))
                       for _ in range(repeats))
        rows.append({"in_ch": c, "out_ch": o, "hw": hw, "float_ms": 1e3 * t_float,
                     "packed_ms": 1e3 * t_packed, "speedup": t_float / t_packed})
    return rows


def _timed(fn) -> float:
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


def cmd_bench(args) -> int:
    t0 = time.time()
    shapes = [_parse_shape(s) for s in args.shape]
    rows = bench_rows(shapes, args.batch, args.repeats)
    print(f"{'C':>5} {'O':>5} {'HW':>4} {'float ms':>10} {'packed ms':>10} {'ratio':>7}")
    for r in rows:
        print(f"{r['in_ch']:>5} {r['out_ch']:>5} {r['hw']:>4} {r['float_ms']:>10.3f} "
              f"{r['packed_ms']:>10.3f} {r['speedup']:>7.2f}")
    if args.manifest:
        RunManifest("bench", sys.argv[1:], {"shapes": shapes, "batch": args.batch, "repeats": args.repeats},
                    results={"rows": rows}, wall_clock_s=time.time() - t0).write(args.manifest)
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing

def _add_data_flags(p, subset_help="stratified subset size (0 = all)"):
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    p.add_argument("--data-dir", default=None, help="defaults to $BONN_DATA_DIR")
    p.add_argument("--subset", type=int, default=0, help=subset_help)


MANIFEST_HELP = "run manifest path (default: <command>-manifest.json, or <out>.manifest.json for pack)"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bonn", description="1-bit CNN training with Bayesian kernel and feature losses")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write checkpoint, metrics.csv and manifest.json")
    p.add_argument("--arch", default="cnn-small", help=f"one of {M.BUILTIN}")
    _add_data_flags(p, "stratified training subset size (0 = all)")
    p.add_argument("--test-subset", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-4)
    p.add_argument("--theta", type=float, default=1e-3)
    p.add_argument("--nu", type=float, default=1e-4)
    p.add_argument("--lr", type=float, default=0.1, help="kernels, batch norm and full-precision layers")
    p.add_argument("--lr-w", type=float, default=0.01, help="modulation vectors and sigma")
    p.add_argument("--lr-mu", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--schedule", choices=("none",) + tuple(Tr.SCHEDULES), default="none")
    p.add_argument("--augment", choices=("none", "cifar"), default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phase", choices=("main", "finetune"), default="main")
    p.add_argument("--full-precision", action="store_true", help="train the float baseline instead")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_data_flags(p, "stratified test subset size (0 = all)")
    p.add_argument("--packed", action="store_true", help="evaluate through the bit-packed XNOR path")
    p.add_argument("--mode", choices=("binary_eval", "float_eval"), default="binary_eval")
    p.add_argument("--manifest", default=None, help=MANIFEST_HELP)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-hist", help="kernel-weight histograms and distribution summary")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", action="append", help="binarized layer key (repeatable; default all)")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_hist)

    p = sub.add_parser("pack", help="write the deployable bit-packed model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None, help=MANIFEST_HELP)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("compress-ratio", help="storage compression under the layer-precision policy")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--arch", help=f"resnet18-table or one of {M.BUILTIN}")
    g.add_argument("--ckpt")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    p.add_argument("--manifest", default=None, help=MANIFEST_HELP)
    p.set_defaults(func=cmd_compress_ratio)

    p = sub.add_parser("bench", help="packed XNOR vs float convolution throughput")
    p.add_argument("--shape", action="append", default=None, help="C,O,HW of a 3x3 layer (repeatable)")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--manifest", default=None, help=MANIFEST_HELP)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench" and not args.shape:
        args.shape = ["64,64,16", "256,256,8"]
    if getattr(args, "manifest", "") is None:
        # every command leaves a manifest; train/export-hist put theirs in --out
        args.manifest = f"{args.out}.manifest.json" if args.command == "pack" else f"{args.command}-manifest.json"
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as e:
        print(f"invalid architecture: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
