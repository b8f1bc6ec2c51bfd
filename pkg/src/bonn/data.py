"""MNIST (IDX) and CIFAR-10 (binary batch) loaders, augmentation, subsets."""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray  # (N,) int64
    split: str
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def _open(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_idx(path) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (magic ``0x0000080N``, big-endian dims)."""
    data = _open(Path(path))
    if len(data) < 4:
        raise FormatError("file shorter than the IDX magic", 0)
    (magic,) = struct.unpack(">I", data[:4])
    if magic >> 8 != 0x08:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise FormatError("IDX dimension header truncated", 4)
    dims = struct.unpack(f">{ndim}I", data[4:head])
    count = int(np.prod(dims))
    if len(data) - head != count:
        raise FormatError(f"IDX body has {len(data) - head} bytes, header promises {count}", head)
    return np.frombuffer(data, np.uint8, count, head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def _find(dirpath: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = dirpath / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem} not found in {dirpath}")


def _load_mnist_split(dirpath: Path, prefix: str, split: str) -> Dataset:
    img_path = _find(dirpath, f"{prefix}-images-idx3-ubyte")
    lbl_path = _find(dirpath, f"{prefix}-labels-idx1-ubyte")
    images, labels = read_idx(img_path), read_idx(lbl_path)
    if images.ndim != 3:
        raise FormatError(f"{img_path.name}: expected magic 0x{IDX_IMAGES_MAGIC:08x}", 0)
    if labels.ndim != 1:
        raise FormatError(f"{lbl_path.name}: expected magic 0x{IDX_LABELS_MAGIC:08x}", 0)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels in {split} split")
    x = (images.astype(np.float32) / 255.0 - MNIST_MEAN) / MNIST_STD
    return Dataset(x[:, None].astype(np.float32), labels.astype(np.int64), split)


def load_mnist(dirpath) -> tuple[Dataset, Dataset]:
    d = Path(dirpath)
    return _load_mnist_split(d, "train", "train"), _load_mnist_split(d, "t10k", "test")


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw records of one batch file: ``(uint8 images (N,3,32,32), labels)``."""
    data = Path(path).read_bytes()
    if len(data) % CIFAR_RECORD:
        raise FormatError(
            f"{Path(path).name}: {len(data)} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
            len(data) - len(data) % CIFAR_RECORD,
        )
    recs = np.frombuffer(data, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"label byte {labels[bad[0]]} >= 10", int(bad[0]) * CIFAR_RECORD)
    return recs[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def normalize_cifar(images_u8: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / 255.0
    mean = np.asarray(CIFAR_MEAN, np.float32)[None, :, None, None]
    std = np.asarray(CIFAR_STD, np.float32)[None, :, None, None]
    return ((x - mean) / std).astype(np.float32)


def load_cifar10(dirpath) -> tuple[Dataset, Dataset]:
    d = Path(dirpath)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    parts = [read_cifar_batch(d / f"data_batch_{i}.bin") for i in range(1, 6)]
    tx, ty = read_cifar_batch(d / "test_batch.bin")
    train = Dataset(normalize_cifar(np.concatenate([p[0] for p in parts])),
                    np.concatenate([p[1] for p in parts]), "train")
    return train, Dataset(normalize_cifar(tx), ty, "test")


def save_ppm(path, image_chw: np.ndarray) -> None:
    """Write a ``(3, H, W)`` uint8 image as binary PPM (P6)."""
    img = np.ascontiguousarray(np.asarray(image_chw, np.uint8).transpose(1, 2, 0))
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def load_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise FormatError("only 8-bit binary PPM (P6) is supported", 0)
    w, h = int(fields[1]), int(fields[2])
    img = np.frombuffer(data, np.uint8, w * h * 3, pos).reshape(h, w, 3)
    return img.transpose(2, 0, 1).copy()


def crop_flip(images: np.ndarray, offsets: np.ndarray, flips: np.ndarray, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop back to the original size at ``offsets``, flip where set."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment(images: np.ndarray, policy: str, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """``cifar``: zero-pad 4, random crop, horizontal flip with p=0.5. ``none``: identity."""
    if policy == "none":
        return images
    if policy != "cifar":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    n = len(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    return crop_flip(images, offsets, flips, pad)


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic stratified sample of ``n`` items, returned in index order.

    Each class gets ``n // M`` items (remainder spread over randomly chosen
    classes). A class with too few members contributes all of them and the
    shortfall is spread over the remaining classes.
    """
    if n >= len(ds):
        return ds.take(np.arange(len(ds)))
    rng = np.random.default_rng(seed)
    m = ds.num_classes
    members = [np.flatnonzero(ds.labels == c) for c in range(m)]
    avail = np.array([len(ix) for ix in members])
    quota = np.zeros(m, dtype=int)
    remaining = n
    open_cls = [c for c in range(m) if avail[c] > 0]
    while remaining > 0 and open_cls:
        share, extra = divmod(remaining, len(open_cls))
        bonus = set(rng.permutation(open_cls)[:extra].tolist())
        for c in open_cls:
            want = share + (c in bonus)
            got = min(want, avail[c] - quota[c])
            quota[c] += got
            remaining -= got
        open_cls = [c for c in open_cls if quota[c] < avail[c]]
    picked = [rng.choice(members[c], size=quota[c], replace=False) for c in range(m)]
    return ds.take(np.sort(np.concatenate(picked)))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_files(name: str, dirpath) -> list[Path]:
    d = Path(dirpath)
    if name == "mnist":
        return [_find(d, f"{p}-{k}") for p in ("train", "t10k")
                for k in ("images-idx3-ubyte", "labels-idx1-ubyte")]
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    return [d / f"data_batch_{i}.bin" for i in range(1, 6)] + [d / "test_batch.bin"]


def load(name: str, dirpath=None) -> tuple[Dataset, Dataset]:
    dirpath = dirpath or os.environ.get("BONN_DATA_DIR")
    if not dirpath:
        raise FileNotFoundError("no data directory given and BONN_DATA_DIR is unset")
    if name == "mnist":
        return load_mnist(dirpath)
    if name == "cifar10":
        return load_cifar10(dirpath)
    raise ValueError(f"unknown dataset {name!r}")
