"""Assemble MNIST-format IDX files from digit sets shipped inside packages.

The sandbox has no route to the MNIST mirrors, but two package registries
carry real MNIST digits:

* npm ``mnist`` (1.1.0): ``src/digits/<d>.json``, 10,000 digits stored as
  pixel/255 rounded to 3 decimals (exactly invertible to uint8).
* PyPI ``mlxtend``: ``mlxtend/data/data/mnist_5k.csv.gz``, 5,000 digits
  (784 pixels + label per row).

The npm digits become the train split, the mlxtend digits the t10k split
(the two sets share no identical image).

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    pip download --no-deps mlxtend -d wheels
    python scripts/build_mnist_idx.py package/ wheels/mlxtend-*.whl OUT_DIR
"""

import gzip
import io
import json
import sys
import zipfile
from pathlib import Path

import numpy as np

from bonn.data import write_idx


def npm_digits(pkg_dir: Path):
    images, labels = [], []
    for d in range(10):
        flat = np.asarray(json.loads((pkg_dir / "src" / "digits" / f"{d}.json").read_text())["data"])
        px = np.rint(flat * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), d, np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def mlxtend_digits(wheel: Path):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main(pkg_dir, wheel, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tx, ty = npm_digits(Path(pkg_dir))
    # interleave classes so the file is not sorted by label
    order = np.random.default_rng(0).permutation(len(ty))
    write_idx(out / "train-images-idx3-ubyte", tx[order])
    write_idx(out / "train-labels-idx1-ubyte", ty[order])
    vx, vy = mlxtend_digits(Path(wheel))
    write_idx(out / "t10k-images-idx3-ubyte", vx)
    write_idx(out / "t10k-labels-idx1-ubyte", vy)
    print(f"train {len(ty)}  test {len(vy)}  -> {out}")


if __name__ == "__main__":
    main(*sys.argv[1:4])
