"""Build IDX files from the 5000-digit MNIST sample shipped inside the mlxtend wheel.

The sandbox this project was developed in has no route to the canonical MNIST
mirrors, only to a Python package index. mlxtend bundles a 5000-image MNIST
sample (500 per class) as CSV, which this script converts to standard IDX files
with a seeded, class-stratified, disjoint train/test split.

    python scripts/fetch_mnist.py --out data/mnist [--wheel path/to/mlxtend.whl]
"""

from __future__ import annotations

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from r2gconv.data import write_idx_images, write_idx_labels

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def locate_wheel(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    tmp = Path(tempfile.mkdtemp(prefix="mlxtend-"))
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "mlxtend==0.24.0", "-d", str(tmp)],
                   check=True)
    return next(tmp.glob("mlxtend-*.whl"))


def load_csv(wheel: Path) -> tuple[np.ndarray, np.ndarray]:
    with zipfile.ZipFile(wheel) as z:
        text = gzip.decompress(z.read(MEMBER)).decode("ascii")
    table = np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.uint8)


def stratified_split(labels: np.ndarray, n_test_per_class: int, seed: int):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test.append(idx[:n_test_per_class])
        train.append(idx[n_test_per_class:])
    return rng.permutation(np.concatenate(train)), rng.permutation(np.concatenate(test))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist", help="output directory (default: data/mnist)")
    ap.add_argument("--wheel", default=None, help="local mlxtend wheel (downloaded with pip if omitted)")
    ap.add_argument("--test-per-class", type=int, default=100, help="test images per class (default: 100)")
    ap.add_argument("--seed", type=int, default=0, help="split seed (default: 0)")
    args = ap.parse_args(argv)

    images, labels = load_csv(locate_wheel(args.wheel))
    tr, te = stratified_split(labels, args.test_per_class, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", tr), ("t10k", te)):
        write_idx_images(out / f"{split}-images-idx3-ubyte", images[idx])
        write_idx_labels(out / f"{split}-labels-idx1-ubyte", labels[idx])
        print(f"split={split} n={len(idx)} dir={out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
