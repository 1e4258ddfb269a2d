"""Quadrant-defect task: a strictly invariant model cannot beat chance, a relaxed one can.

    python scripts/symmetry_breaking.py [--n-train 2000 --epochs 6]
"""

from __future__ import annotations

import argparse
import time

from r2gconv.data import make_symmetry_breaking_set
from r2gconv.metrics import orbit_spread
from r2gconv.models import build_r2net_toy, calibrate_bn
from r2gconv.tensor import Tensor
from r2gconv.train import TrainConfig, evaluate, train


def quadrant_logit_spread(defect_scale: float = 0.0, seed: int = 0, n: int = 16) -> float:
    """Largest logit change when an image is moved to another quadrant pose, for a strict model."""
    ds = make_symmetry_breaking_set(n, defect_scale, seed)
    model = build_r2net_toy(mode="strict", num_classes=4, seed=seed)
    calibrate_bn(model, Tensor(ds.images))
    return orbit_spread(model, ds.images)


def run(n_train=2000, n_test=400, epochs=6, seed=0, lr=1e-3, sigma=0.1, modes=("relaxed", "strict"), log=print):
    tr = make_symmetry_breaking_set(n_train, 1.0, seed)
    te = make_symmetry_breaking_set(n_test, 1.0, seed + 1000)
    acc = {}
    for mode in modes:
        t0 = time.perf_counter()
        cfg = TrainConfig(seed=seed, epochs=epochs, mode=mode, sigma=sigma, num_classes=4, learning_rate=lr)
        res = train(cfg, tr, te, log=None)
        acc[mode] = 100.0 - evaluate(res.model, te).top1_error_percent
        log(f"mode={mode} quadrant_accuracy_percent={acc[mode]:.2f} seconds={time.perf_counter() - t0:.1f}")
    return acc


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--modes", default="relaxed,strict")
    args = ap.parse_args(argv)
    for scale in (0.0, 1.0):
        print(f"defect_scale={scale:g} strict_quadrant_logit_spread={quadrant_logit_spread(scale, args.seed):.3e}")
    run(args.n_train, args.n_test, args.epochs, args.seed, args.lr, args.sigma, args.modes.split(","))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
