"""Network description, forward/backward passes, serialization and storage accounting.

An :class:`Architecture` is an ordered list of :class:`LayerSpec`. Layers
are addressed by dotted keys: top-level layer ``i`` is ``"i"``; inside a
residual block the children are ``"i.body.j"`` and ``"i.short.j"``.
Parameters live in a flat dict keyed ``"<layer key>.<name>"``.

Binary convolutions always follow a ``bin_act`` layer. Their padding is
applied to the already-binarized input with value ``+1`` (the sign of a
zero pad), which keeps the float path and the packed XNOR path identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .bayes import FeatureCenters
from .binarize import (
    BitPackedTensor,
    activation_ste_grad,
    binary_conv2d,
    kernel_ste_grad,
    modulation_ste_grad,
    pack_bits,
    pack_input,
    pack_kernels,
    scale_of,
    sign_binarize,
    unpack_bits,
)
from .errors import DimensionError, FormatError, ValidationError

LAYER_KINDS = ("conv", "binary_conv", "linear", "bn", "pool", "bin_act", "residual_block")
MODES = ("binary_train", "binary_eval", "float_baseline", "float_eval", "packed_eval")


@dataclass
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    pool: str = "max"
    window: int = 2
    body: list = field(default_factory=list)
    shortcut: list = field(default_factory=list)

    @property
    def full_precision(self) -> bool:
        return self.kind != "binary_conv"

    @property
    def geometry(self) -> T.ConvGeometry:
        return T.ConvGeometry(self.kernel, self.stride, self.padding)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("conv", "binary_conv"):
            d.update(in_ch=self.in_ch, out_ch=self.out_ch, kernel=self.kernel,
                     stride=self.stride, padding=self.padding)
        elif self.kind == "linear":
            d.update(in_ch=self.in_ch, out_ch=self.out_ch)
        elif self.kind == "bn":
            d.update(in_ch=self.in_ch)
        elif self.kind == "pool":
            d.update(pool=self.pool, window=self.window, stride=self.stride)
        elif self.kind == "residual_block":
            d.update(body=[s.to_dict() for s in self.body],
                     shortcut=[s.to_dict() for s in self.shortcut])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["body"] = [cls.from_dict(s) for s in d.get("body", [])]
        d["shortcut"] = [cls.from_dict(s) for s in d.get("shortcut", [])]
        return cls(**d)


def conv(cin, cout, k=3, stride=1, padding=None) -> LayerSpec:
    return LayerSpec("conv", cin, cout, k, stride, k // 2 if padding is None else padding)


def binary_conv(cin, cout, k=3, stride=1, padding=None) -> LayerSpec:
    return LayerSpec("binary_conv", cin, cout, k, stride, k // 2 if padding is None else padding)


def bn(c) -> LayerSpec:
    return LayerSpec("bn", in_ch=c)


def bin_act() -> LayerSpec:
    return LayerSpec("bin_act")


def pool(kind="max", window=2, stride=None) -> LayerSpec:
    return LayerSpec("pool", pool=kind, window=window, stride=window if stride is None else stride)


def linear(d, m) -> LayerSpec:
    return LayerSpec("linear", d, m)


def residual(body, shortcut=()) -> LayerSpec:
    return LayerSpec("residual_block", body=list(body), shortcut=list(shortcut))


def iter_layers(layers, prefix: str = ""):
    """Yield ``(key, spec)`` depth-first, including residual children."""
    for i, spec in enumerate(layers):
        key = f"{prefix}{i}"
        yield key, spec
        if spec.kind == "residual_block":
            yield from iter_layers(spec.body, f"{key}.body.")
            yield from iter_layers(spec.shortcut, f"{key}.short.")


def _infer(layers, shape, prefix, first_weight):
    """Propagate ``shape`` through ``layers``; return ``(shape, first_weight)``."""
    prev_kind = None
    for i, spec in enumerate(layers):
        where = f"{prefix}{i}"

        def fail(msg):
            raise ValidationError(msg, layer_index=where)

        if spec.kind not in LAYER_KINDS:
            fail(f"unknown layer kind {spec.kind!r}")
        if spec.kind in ("conv", "binary_conv"):
            if len(shape) != 3:
                fail(f"convolution needs a (C,H,W) input, got {shape}")
            if spec.in_ch != shape[0]:
                fail(f"expects {spec.in_ch} input channels, previous layer gives {shape[0]}")
            if spec.kind == "binary_conv":
                if first_weight:
                    fail("the first convolution must stay full precision")
                if spec.kernel == 1:
                    fail("1x1 convolutions must stay full precision")
                if prev_kind != "bin_act":
                    fail("binary_conv must directly follow a bin_act layer")
            try:
                g = spec.geometry
                shape = (spec.out_ch, g.output_size(shape[1]), g.output_size(shape[2]))
            except DimensionError as e:
                fail(str(e))
            first_weight = False
        elif spec.kind == "bn":
            if len(shape) != 3 or spec.in_ch != shape[0]:
                fail(f"batch norm over {spec.in_ch} channels, input is {shape}")
        elif spec.kind == "pool":
            if len(shape) != 3:
                fail(f"pooling needs a (C,H,W) input, got {shape}")
            if spec.pool == "global_avg":
                shape = (shape[0],)
            elif spec.pool in ("max", "avg"):
                k, s = spec.window, spec.stride
                if shape[1] < k or (shape[1] - k) % s or (shape[2] - k) % s:
                    fail(f"pool window {k}/stride {s} does not tile {shape[1]}x{shape[2]}")
                shape = (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
            else:
                fail(f"unknown pool kind {spec.pool!r}")
        elif spec.kind == "linear":
            if len(shape) != 1 or spec.in_ch != shape[0]:
                fail(f"linear expects ({spec.in_ch},) input, previous layer gives {shape}")
            shape = (spec.out_ch,)
            first_weight = False
        elif spec.kind == "residual_block":
            out_b, fw = _infer(spec.body, shape, f"{where}.body.", first_weight)
            out_s, _ = _infer(spec.shortcut, shape, f"{where}.short.", first_weight)
            if out_b != out_s:
                fail(f"body output {out_b} != shortcut output {out_s}")
            shape, first_weight = out_b, fw
        prev_kind = spec.kind
    return shape, first_weight


@dataclass
class Architecture:
    name: str
    layers: list
    num_classes: int
    in_shape: tuple

    def __post_init__(self):
        self.in_shape = tuple(self.in_shape)
        self.validate()

    def validate(self):
        if not self.layers or self.layers[-1].kind != "linear":
            raise ValidationError("the final layer must be linear", layer_index=len(self.layers) - 1)
        out, _ = _infer(self.layers, self.in_shape, "", True)
        if out != (self.num_classes,):
            raise ValidationError(f"network outputs {out}, expected ({self.num_classes},)",
                                  layer_index=len(self.layers) - 1)

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].in_ch

    def binary_layers(self) -> list[str]:
        return [k for k, s in iter_layers(self.layers) if s.kind == "binary_conv"]

    def to_dict(self) -> dict:
        return {"name": self.name, "num_classes": self.num_classes,
                "in_shape": list(self.in_shape), "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["name"], [LayerSpec.from_dict(s) for s in d["layers"]],
                   d["num_classes"], tuple(d["in_shape"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _cnn_small(m, in_shape, binary=True):
    c = in_shape[0]
    if binary:
        b1, b2 = [bin_act(), binary_conv(16, 32)], [bin_act(), binary_conv(32, 64)]
    else:
        b1, b2 = [conv(16, 32)], [conv(32, 64)]
    return [conv(c, 16), bn(16), *b1, bn(32), pool("max"), *b2, bn(64), pool("max"),
            pool("global_avg"), linear(64, m)]


def _wrn_block(cin, cout):
    if cin == cout:
        body = [bn(cin), bin_act(), binary_conv(cin, cout), bn(cout), bin_act(), binary_conv(cout, cout)]
        return residual(body)
    body = [bn(cin), bin_act(), binary_conv(cin, cout), bn(cout), bin_act(), binary_conv(cout, cout),
            pool("avg", 2)]
    return residual(body, [pool("avg", 2), conv(cin, cout, k=1), bn(cout)])


def _mini_wrn(m, in_shape):
    c = in_shape[0]
    return [conv(c, 16), _wrn_block(16, 16), _wrn_block(16, 32), _wrn_block(32, 64), bn(64),
            pool("global_avg"), linear(64, m)]


BUILTIN = ("cnn-small", "cnn-small-all-fp", "mini-wrn-16")


def build(name, num_classes: int = 10, in_shape=(1, 28, 28)) -> Architecture:
    """Build a named architecture, or a custom one from a list of layer dicts.

    Raises :class:`ValidationError` naming the first broken shape link.
    """
    if isinstance(name, (list, tuple)):
        layers = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in name]
        return Architecture("custom", layers, num_classes, tuple(in_shape))
    if name == "cnn-small":
        layers = _cnn_small(num_classes, in_shape)
    elif name == "cnn-small-all-fp":
        layers = _cnn_small(num_classes, in_shape, binary=False)
    elif name == "mini-wrn-16":
        layers = _mini_wrn(num_classes, in_shape)
    else:
        raise ValueError(f"unknown architecture {name!r}; choose from {BUILTIN}")
    return Architecture(name, layers, num_classes, tuple(in_shape))


def param_shapes(arch: Architecture) -> dict:
    """Shape of every learnable tensor, keyed ``"<layer>.<name>"``."""
    shapes = {}
    for key, s in iter_layers(arch.layers):
        if s.kind == "conv":
            shapes[f"{key}.weight"] = (s.out_ch, s.in_ch, s.kernel, s.kernel)
        elif s.kind == "binary_conv":
            k = s.in_ch * s.kernel * s.kernel
            shapes[f"{key}.X"] = (s.out_ch, s.in_ch, s.kernel, s.kernel)
            shapes[f"{key}.w"] = (k,)
            shapes[f"{key}.mu"] = (s.out_ch,)
            shapes[f"{key}.sigma"] = (s.out_ch,)
        elif s.kind == "bn":
            shapes[f"{key}.gamma"] = (s.in_ch,)
            shapes[f"{key}.beta"] = (s.in_ch,)
        elif s.kind == "linear":
            shapes[f"{key}.weight"] = (s.out_ch, s.in_ch)
            shapes[f"{key}.bias"] = (s.out_ch,)
    return shapes


def bn_keys(arch: Architecture) -> list[str]:
    return [k for k, s in iter_layers(arch.layers) if s.kind == "bn"]


@dataclass
class Params:
    tensors: dict
    bn: dict
    centers: FeatureCenters

    def copy(self) -> "Params":
        return Params(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: T.BatchNormState(s.num_features, s.momentum, s.eps, s.running_mean.copy(),
                                 s.running_var.copy(), s.initialized) for k, s in self.bn.items()},
            FeatureCenters(self.centers.centers.copy(), self.centers.sigmas.copy(),
                           self.centers.alpha_c, self.centers.sigma_lr),
        )


# ----------------------------------------------------------------------------
# forward / backward

def _binarizing(mode: str) -> bool:
    return mode in ("binary_train", "binary_eval", "packed_eval")


def _bn_mode(mode: str) -> str:
    return "train" if mode in ("binary_train", "float_baseline") else "eval"


def _pad_plus_one(x, p):
    return T._pad(x, p, value=1.0)


def _forward_seq(layers, prefix, x, params, mode, cache):
    for i, spec in enumerate(layers):
        x = _forward_layer(spec, f"{prefix}{i}", x, params, mode, cache)
    return x


def _forward_layer(spec, key, x, params, mode, cache):
    t = params.tensors
    kind = spec.kind
    if kind == "conv":
        out, cols = T.conv2d(x, t[f"{key}.weight"], spec.geometry, return_cols=True)
        cache[key] = (x, cols)
        return out
    if kind == "binary_conv":
        if mode == "packed_eval":
            kernels, alphas = params.packed[key]
            return binary_conv2d(pack_input(x, spec.geometry), kernels, alphas, spec.geometry)
        X = t[f"{key}.X"]
        if not _binarizing(mode):
            out, cols = T.conv2d(x, X, spec.geometry, return_cols=True)
            cache[key] = (x, cols)
            return out
        alpha = scale_of(t[f"{key}.w"])
        sx = sign_binarize(X)
        s_pad = _pad_plus_one(x, spec.padding)
        geom0 = T.ConvGeometry(spec.kernel, spec.stride, 0)
        # integer-valued correlation first, one scale multiply after
        out, cols = T.conv2d(s_pad, sx, geom0, return_cols=True)
        cache[key] = (s_pad, alpha, sx, cols)
        return alpha * out
    if kind == "bn":
        out, bn_cache = T.batch_norm(x, t[f"{key}.gamma"], t[f"{key}.beta"], params.bn[key], _bn_mode(mode))
        cache[key] = (x, bn_cache)
        return out
    if kind == "bin_act":
        if not _binarizing(mode):
            return x
        cache[key] = x
        return sign_binarize(x)
    if kind == "pool":
        cache[key] = x
        return T.pool2d(x, spec.pool, spec.window, spec.stride)
    if kind == "linear":
        cache[key] = x
        return T.linear(x, t[f"{key}.weight"], t[f"{key}.bias"])
    if kind == "residual_block":
        body = _forward_seq(spec.body, f"{key}.body.", x, params, mode, cache)
        short = _forward_seq(spec.shortcut, f"{key}.short.", x, params, mode, cache)
        return body + short
    raise ValueError(f"unknown layer kind {kind!r}")


def forward(arch: Architecture, params, x, mode: str = "binary_train"):
    """Run the network. Returns ``(logits, features, cache)``.

    ``features`` is the input of the final linear layer. Modes:
    ``binary_train`` / ``binary_eval`` binarize kernels and activations
    (batch vs. running BN statistics); ``float_baseline`` / ``float_eval``
    skip all binarization; ``packed_eval`` runs binary layers through the
    XNOR/popcount kernel and needs a :class:`PackedModel`.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if x.ndim != 4 or tuple(x.shape[1:]) != arch.in_shape:
        raise DimensionError(f"input shape {x.shape[1:]} != architecture input {arch.in_shape}")
    cache = {"__mode__": mode}
    h = _forward_seq(arch.layers[:-1], "", x, params, mode, cache)
    last = str(len(arch.layers) - 1)
    logits = _forward_layer(arch.layers[-1], last, h, params, mode, cache)
    return logits, h, cache


def _backward_seq(layers, prefix, grad, params, cache, grads):
    for i in range(len(layers) - 1, -1, -1):
        grad = _backward_layer(layers[i], f"{prefix}{i}", grad, params, cache, grads)
    return grad


def _backward_layer(spec, key, grad, params, cache, grads):
    t = params.tensors
    kind = spec.kind
    mode = cache["__mode__"]
    if kind == "conv":
        x, cols = cache[key]
        gx, gw = T.conv2d_vjp(x, t[f"{key}.weight"], spec.geometry, grad, cols)
        grads[f"{key}.weight"] = gw
        return gx
    if kind == "binary_conv":
        X, w = t[f"{key}.X"], t[f"{key}.w"]
        if not _binarizing(mode):
            x, cols = cache[key]
            gx, gX = T.conv2d_vjp(x, X, spec.geometry, grad, cols)
            grads[f"{key}.X"] = gX
            grads[f"{key}.w"] = np.zeros_like(w)
            return gx
        s_pad, alpha, sx, cols = cache[key]
        xhat = alpha * sx
        g_pad, g_xhat = T.conv2d_vjp(s_pad, xhat, T.ConvGeometry(spec.kernel, spec.stride, 0), grad, cols)
        grads[f"{key}.X"] = kernel_ste_grad(g_xhat, X, w)
        grads[f"{key}.w"] = modulation_ste_grad(g_xhat, X, w)
        p = spec.padding
        return np.ascontiguousarray(g_pad[:, :, p:g_pad.shape[2] - p, p:g_pad.shape[3] - p]) if p else g_pad
    if kind == "bn":
        x, bn_cache = cache[key]
        gx, gg, gb = T.batch_norm_vjp(x, t[f"{key}.gamma"], bn_cache, grad)
        grads[f"{key}.gamma"] = gg
        grads[f"{key}.beta"] = gb
        return gx
    if kind == "bin_act":
        if not _binarizing(mode):
            return grad
        return activation_ste_grad(grad, cache[key])
    if kind == "pool":
        return T.pool2d_vjp(cache[key], spec.pool, spec.window, spec.stride, grad)
    if kind == "linear":
        gx, gw, gb = T.linear_vjp(cache[key], t[f"{key}.weight"], grad)
        grads[f"{key}.weight"] = gw
        grads[f"{key}.bias"] = gb
        return gx
    if kind == "residual_block":
        g_body = _backward_seq(spec.body, f"{key}.body.", grad, params, cache, grads)
        g_short = _backward_seq(spec.shortcut, f"{key}.short.", grad, params, cache, grads)
        return g_body + g_short
    raise ValueError(f"unknown layer kind {kind!r}")


def backward(arch: Architecture, params, cache, grad_logits, feature_grad=None):
    """Backpropagate ``grad_logits``; returns ``(param_grads, grad_input)``.

    ``feature_grad`` is added at the input of the final linear layer. For
    binary layers the kernel gradient is the straight-through estimate
    and ``<key>.w`` receives the modulation-vector gradient.
    """
    grads = {}
    last = str(len(arch.layers) - 1)
    g = _backward_layer(arch.layers[-1], last, grad_logits, params, cache, grads)
    if feature_grad is not None:
        g = g + feature_grad
    g = _backward_seq(arch.layers[:-1], "", g, params, cache, grads)
    return grads, g


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"BONN"
PACKED_MAGIC = b"BONP"
VERSION = 1


@dataclass
class Checkpoint:
    arch: Architecture
    params: Params
    meta: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)


def _encode_array(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f4")
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


class _Writer:
    def __init__(self, magic: bytes):
        self.buf = io.BytesIO()
        self.buf.write(magic + struct.pack("<I", VERSION))

    def section(self, name: str, payload: bytes):
        nb = name.encode()
        self.buf.write(struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        self.data = data
        self.pos = 0
        head = self.take(4)
        if head != magic:
            raise FormatError(f"bad magic {head!r}, expected {magic!r}", 0)
        (version,) = struct.unpack("<I", self.take(4))
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated: needed {n} bytes, {len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def sections(self):
        while self.pos < len(self.data):
            start = self.pos
            (nlen,) = struct.unpack("<I", self.take(4))
            try:
                name = self.take(nlen).decode()
            except UnicodeDecodeError:
                raise FormatError("section name is not UTF-8", start) from None
            (plen,) = struct.unpack("<Q", self.take(8))
            yield name, self.take(plen), self.pos - plen


def _decode_array(payload: bytes, offset: int) -> np.ndarray:
    if len(payload) < 4:
        raise FormatError("array header truncated", offset)
    (ndim,) = struct.unpack_from("<I", payload)
    head = 4 + 4 * ndim
    if len(payload) < head:
        raise FormatError("array shape truncated", offset)
    shape = struct.unpack_from(f"<{ndim}I", payload, 4)
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) != head + 4 * count:
        raise FormatError(f"array payload is {len(payload) - head} bytes, expected {4 * count}", offset)
    return np.frombuffer(payload, dtype="<f4", offset=head).astype(np.float32).reshape(shape)


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    meta = {
        "arch": ckpt.arch.to_dict(),
        "arch_hash": ckpt.arch.hash(),
        "bn_initialized": {k: bool(s.initialized) for k, s in sorted(p.bn.items())},
        "centers": {"alpha_c": p.centers.alpha_c, "sigma_lr": p.centers.sigma_lr},
        "train": ckpt.meta,
    }
    w = _Writer(MAGIC)
    w.section("meta", _json(meta))
    for k in sorted(p.tensors):
        w.section(f"tensor/{k}", _encode_array(p.tensors[k]))
    for k in sorted(p.bn):
        w.section(f"bn_mean/{k}", _encode_array(p.bn[k].running_mean))
        w.section(f"bn_var/{k}", _encode_array(p.bn[k].running_var))
    w.section("centers/c", _encode_array(p.centers.centers))
    w.section("centers/sigma", _encode_array(p.centers.sigmas))
    for k in sorted(ckpt.optimizer):
        w.section(f"opt/{k}", _encode_array(ckpt.optimizer[k]))
    return w.getvalue()


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data, MAGIC)
    meta = None
    arrays = {}
    for name, payload, off in r.sections():
        if name == "meta":
            try:
                meta = json.loads(payload)
            except ValueError:
                raise FormatError("meta section is not valid JSON", off) from None
        elif "/" in name:
            arrays[name] = _decode_array(payload, off)
        else:
            raise FormatError(f"unknown section {name!r}", off)
    if meta is None:
        raise FormatError("missing meta section", r.pos)
    try:
        arch = Architecture.from_dict(meta["arch"])
    except (KeyError, TypeError, ValidationError) as e:
        raise FormatError(f"bad architecture record: {e}", None) from None
    tensors = {}
    for k, shape in param_shapes(arch).items():
        a = arrays.get(f"tensor/{k}")
        if a is None or a.shape != shape:
            raise FormatError(f"tensor {k} missing or misshapen", r.pos)
        tensors[k] = a
    bn_state = {}
    for k in bn_keys(arch):
        mean, var = arrays.get(f"bn_mean/{k}"), arrays.get(f"bn_var/{k}")
        if mean is None or var is None:
            raise FormatError(f"batch-norm state {k} missing", r.pos)
        bn_state[k] = T.BatchNormState(mean.shape[0], running_mean=mean, running_var=var,
                                       initialized=meta["bn_initialized"][k])
    if "centers/c" not in arrays or "centers/sigma" not in arrays:
        raise FormatError("feature centers missing", r.pos)
    fc = FeatureCenters(arrays["centers/c"], arrays["centers/sigma"], **meta["centers"])
    opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    return Checkpoint(arch, Params(tensors, bn_state, fc), meta["train"], opt)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


# ----------------------------------------------------------------------------
# packed deployment format

@dataclass
class PackedModel:
    """Deployable network: sign bits plus one scale per output channel for
    binary layers, float32 for everything else."""

    arch: Architecture
    tensors: dict
    bn: dict
    packed: dict  # layer key -> (row-packed kernels, alphas)
    layer_bytes: dict = field(default_factory=dict)


def layer_policy(arch: Architecture) -> dict:
    return {k: ("binary" if s.kind == "binary_conv" else "float")
            for k, s in iter_layers(arch.layers) if s.kind in ("conv", "binary_conv", "linear")}


def packed_layer_nbytes(out_ch: int, params: int) -> int:
    """Storage of one binary layer: bit words plus one float32 scale per output channel."""
    return -(-params // 64) * 8 + 4 * out_ch


def export_packed(ckpt: Checkpoint) -> bytes:
    arch, p = ckpt.arch, ckpt.params
    header = {"arch": arch.to_dict(), "arch_hash": arch.hash(), "policy": layer_policy(arch)}
    w = _Writer(PACKED_MAGIC)
    w.section("header", _json(header))
    binary = set(arch.binary_layers())
    for k in sorted(p.tensors):
        layer = k.rsplit(".", 1)[0]
        if layer not in binary:
            w.section(f"float/{k}", _encode_array(p.tensors[k]))
    for k in sorted(p.bn):
        w.section(f"bn_mean/{k}", _encode_array(p.bn[k].running_mean))
        w.section(f"bn_var/{k}", _encode_array(p.bn[k].running_var))
    for k in sorted(binary):
        X = p.tensors[f"{k}.X"]
        alpha = np.float32(scale_of(p.tensors[f"{k}.w"]))
        bits = pack_bits(X)
        o = X.shape[0]
        payload = (struct.pack("<4I", *X.shape)
                   + bits.words.astype("<u8").tobytes()
                   + np.full(o, alpha, dtype="<f4").tobytes())
        w.section(f"packed/{k}", payload)
    return w.getvalue()


def load_packed(data: bytes) -> PackedModel:
    r = _Reader(data, PACKED_MAGIC)
    header = None
    tensors, means, vars_, packed, sizes = {}, {}, {}, {}, {}
    for name, payload, off in r.sections():
        kind, _, key = name.partition("/")
        if name == "header":
            header = json.loads(payload)
        elif kind == "float":
            tensors[key] = _decode_array(payload, off)
        elif kind == "bn_mean":
            means[key] = _decode_array(payload, off)
        elif kind == "bn_var":
            vars_[key] = _decode_array(payload, off)
        elif kind == "packed":
            if len(payload) < 16:
                raise FormatError("packed layer header truncated", off)
            shape = struct.unpack_from("<4I", payload)
            n = int(np.prod(shape))
            nw = -(-n // 64)
            if len(payload) != 16 + 8 * nw + 4 * shape[0]:
                raise FormatError(f"packed layer {key} has wrong size", off)
            words = np.frombuffer(payload, "<u8", nw, 16).astype(np.uint64)[None, :]
            alphas = np.frombuffer(payload, "<f4", shape[0], 16 + 8 * nw).astype(np.float32)
            signs = unpack_bits(BitPackedTensor(words, n, shape))
            packed[key] = (pack_kernels(signs), alphas)
            sizes[key] = len(payload) - 16
        else:
            raise FormatError(f"unknown section {name!r}", off)
    if header is None:
        raise FormatError("missing header section", r.pos)
    arch = Architecture.from_dict(header["arch"])
    bn_state = {k: T.BatchNormState(means[k].shape[0], running_mean=means[k], running_var=vars_[k],
                                    initialized=True) for k in bn_keys(arch)}
    return PackedModel(arch, tensors, bn_state, packed, sizes)


def packed_forward(model: PackedModel, x):
    return forward(model.arch, model, x, "packed_eval")


# ----------------------------------------------------------------------------
# storage accounting

@dataclass
class ParamRow:
    name: str
    weights: int
    biases: int = 0
    bn: int = 0
    binarized: bool = False


def parameter_table(arch: Architecture) -> list[ParamRow]:
    """One row per weight-bearing layer; BN affine parameters are attached
    to their own rows."""
    rows = []
    for key, s in iter_layers(arch.layers):
        if s.kind in ("conv", "binary_conv"):
            rows.append(ParamRow(key, s.out_ch * s.in_ch * s.kernel ** 2, binarized=s.kind == "binary_conv"))
        elif s.kind == "linear":
            rows.append(ParamRow(key, s.out_ch * s.in_ch, s.out_ch))
        elif s.kind == "bn":
            rows.append(ParamRow(key, 0, bn=2 * s.in_ch))
    return rows


def _resnet18_table() -> list[ParamRow]:
    rows = [ParamRow("conv1", 64 * 3 * 7 * 7), ParamRow("bn1", 0, bn=128)]
    cin = 64
    for stage, cout in enumerate((64, 128, 256, 512), start=1):
        for blk in range(2):
            c_first = cin if blk == 0 else cout
            rows.append(ParamRow(f"layer{stage}.{blk}.conv1", cout * c_first * 9, binarized=True))
            rows.append(ParamRow(f"layer{stage}.{blk}.bn1", 0, bn=2 * cout))
            rows.append(ParamRow(f"layer{stage}.{blk}.conv2", cout * cout * 9, binarized=True))
            rows.append(ParamRow(f"layer{stage}.{blk}.bn2", 0, bn=2 * cout))
            if blk == 0 and c_first != cout:
                rows.append(ParamRow(f"layer{stage}.{blk}.downsample", cout * c_first))
                rows.append(ParamRow(f"layer{stage}.{blk}.downsample_bn", 0, bn=2 * cout))
        cin = cout
    rows.append(ParamRow("fc", 1000 * 512, 1000))
    return rows


RESNET18_TABLE = _resnet18_table()


@dataclass
class CompressionReport:
    ratio: float          # weights and biases
    ratio_with_bn: float  # BN affine parameters also stored in float32
    total_params: int
    binarized_params: int
    float_params: int
    bn_params: int


def compression_report(arch_or_table) -> CompressionReport:
    """``32*total / (32*float + 1*binary)`` under two counting conventions.

    The per-layer scale (one float per output channel) and the
    training-only modulation vectors are not counted.
    """
    rows = arch_or_table if isinstance(arch_or_table, list) else parameter_table(arch_or_table)
    binary = sum(r.weights for r in rows if r.binarized)
    fp = sum(r.weights + r.biases for r in rows if not r.binarized)
    bnp = sum(r.bn for r in rows)
    total = binary + fp
    ratio = 32 * total / (32 * fp + binary)
    ratio_bn = 32 * (total + bnp) / (32 * (fp + bnp) + binary)
    return CompressionReport(ratio, ratio_bn, total, binary, fp, bnp)


def compression_ratio(arch_or_table) -> float:
    return compression_report(arch_or_table).ratio


def report_dict(rep: CompressionReport) -> dict:
    return asdict(rep)
