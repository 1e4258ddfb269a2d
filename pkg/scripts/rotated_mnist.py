"""Rotated-train / upright-test MNIST: group models against a parameter-matched plain CNN.

    python scripts/rotated_mnist.py --data data/mnist --modes strict,relaxed,plain
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from r2gconv.data import load_idx, rotate_augment
from r2gconv.train import TrainConfig, evaluate, train


def load_rotated_mnist(data: str, seed: int, subset_train=None, subset_test=None):
    d = Path(data)
    tr = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte", "train").subset(subset_train)
    te = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte", "test").subset(subset_test)
    return rotate_augment(tr, seed), te


def run(data: str, modes, seed: int = 0, epochs: int = 3, subset_train=None, subset_test=None, log=print):
    tr, te = load_rotated_mnist(data, seed, subset_train, subset_test)
    errors = {}
    for mode in modes:
        t0 = time.perf_counter()
        cfg = TrainConfig(seed=seed, epochs=epochs, mode=mode)
        res = train(cfg, tr, te)
        rec = evaluate(res.model, te, epochs)
        errors[mode] = rec.top1_error_percent
        log(f"mode={mode} params={res.model.num_parameters()} widths={','.join(map(str, res.model.spec.effective_widths()))} "
            f"test_error_percent={rec.top1_error_percent:.2f} seconds={time.perf_counter() - t0:.1f}")
    return errors


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/mnist")
    ap.add_argument("--modes", default="strict,relaxed,plain")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--subset-train", type=int, default=None)
    ap.add_argument("--subset-test", type=int, default=None)
    args = ap.parse_args(argv)
    run(args.data, args.modes.split(","), args.seed, args.epochs, args.subset_train, args.subset_test)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
