"""``r2gconv`` command line: training, evaluation and diagnostics.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Every command first
prints its fully resolved configuration as a ``config`` line; all further
output is line-delimited ``key=value`` records.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

DATA_ENV = "R2G_DATA_DIR"
IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
HELP_WIDTH = 100


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=HELP_WIDTH, max_help_position=40)


def _widths(text: str) -> tuple:
    try:
        out = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if len(out) != 4:
        raise argparse.ArgumentTypeError("expected exactly 4 widths")
    return out


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, metavar="INT", help="random seed for every draw")
    p.add_argument("--sigma", type=float, default=0.1, metavar="FLOAT", help="std of the delta initialization")
    p.add_argument("--mode", choices=("relaxed", "strict", "plain"), default="relaxed", help="layer mode")
    p.add_argument("--precision", choices=("f32", "f64-check"), default="f32", help="numeric precision")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--widths", type=_widths, default="8,16,32,32", metavar="W0,W1,W2,W3",
                   help="per-stage channel widths")


def _data_flags(p: argparse.ArgumentParser, train: bool = True) -> None:
    if train:
        p.add_argument("--train-images", type=str, default=None, metavar="PATH",
                       help=f"IDX training images, else ${DATA_ENV}/{IDX_NAMES['train_images']}")
        p.add_argument("--train-labels", type=str, default=None, metavar="PATH",
                       help=f"IDX training labels, else ${DATA_ENV}/{IDX_NAMES['train_labels']}")
        p.add_argument("--subset-train", type=int, default=None, metavar="N", help="use the first N training samples")
    p.add_argument("--test-images", type=str, default=None, metavar="PATH",
                   help=f"IDX test images, else ${DATA_ENV}/{IDX_NAMES['test_images']}")
    p.add_argument("--test-labels", type=str, default=None, metavar="PATH",
                   help=f"IDX test labels, else ${DATA_ENV}/{IDX_NAMES['test_labels']}")
    p.add_argument("--subset-test", type=int, default=None, metavar="N", help="use the first N test samples")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=3, metavar="INT", help="training epochs")
    p.add_argument("--batch-size", type=int, default=64, metavar="INT", help="minibatch size")
    p.add_argument("--lr", type=float, default=1e-3, metavar="FLOAT", help="learning rate")
    p.add_argument("--optimizer", choices=("adam", "sgd-momentum"), default="adam", help="optimizer")
    p.add_argument("--augment", choices=("rotate", "none"), default="rotate",
                   help="quarter-turn augmentation of the training set")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="r2gconv", formatter_class=_formatter,
                                 description="Relaxed rotation-equivariant group convolutions on C4.")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=_formatter)
        _shared(p)
        return p

    p = add("train", "train a toy classifier on IDX data")
    _model_flags(p)
    _train_flags(p)
    _data_flags(p)
    p.add_argument("--ee-probes", type=int, default=0, metavar="INT",
                   help="probes for a per-epoch equivariance error (0 disables)")
    p.add_argument("--out", type=str, default=None, metavar="PATH", help="checkpoint output path")

    p = add("eval", "evaluate a checkpoint on IDX test data")
    p.add_argument("--ckpt", type=str, required=True, metavar="PATH", help="checkpoint to evaluate")
    p.add_argument("--batch-size", type=int, default=256, metavar="INT", help="evaluation batch size")
    _data_flags(p, train=False)

    p = add("equiv-check", "empirical equivariance error and bound checks")
    p.add_argument("--ckpt", type=str, default=None, metavar="PATH",
                   help="checkpoint to audit (a fresh model from --mode/--sigma/--widths if omitted)")
    _model_flags(p)
    p.add_argument("--probes", type=int, default=16, metavar="INT", help="probe count (half natural, half Gaussian)")
    p.add_argument("--per-layer", action="store_true", help="also report every intermediate stage")
    p.add_argument("--test-images", type=str, default=None, metavar="PATH",
                   help="IDX images for natural probes (synthetic images if omitted)")

    p = add("param-count", "per-layer trainable parameter table")
    p.add_argument("--model", choices=("r2net-toy",), default="r2net-toy", help="model family")
    _model_flags(p)
    p.add_argument("--in-channels", type=int, default=1, metavar="INT", help="input channels")
    p.add_argument("--num-classes", type=int, default=10, metavar="INT", help="classifier outputs")
    p.add_argument("--lifting-k", type=int, default=4, metavar="INT", help="lifting kernel size")

    p = add("build-filters", "expand an initial filter into its relaxed bank")
    p.add_argument("--flavor", choices=("lifting", "pointwise", "depthwise"), default="depthwise",
                   help="filter flavor")
    p.add_argument("--k", type=int, default=3, metavar="INT", help="kernel size (forced to 1 for pointwise)")
    p.add_argument("--ci", type=int, default=1, metavar="INT", help="input channels")
    p.add_argument("--co", type=int, default=1, metavar="INT", help="output channels")
    p.add_argument("--dump", type=str, default=None, metavar="PATH", help="write k_init, delta and k_rel here")

    p = add("gradcheck", "central finite-difference gradient checks")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--op", type=str, default=None, metavar="NAME", help="check one op ('all' for every op)")
    g.add_argument("--model", action="store_true", help="spot-check a whole model instead of ops")
    p.add_argument("--trials", type=int, default=3, metavar="INT", help="random trials per op")
    p.add_argument("--tol", type=float, default=1e-5, metavar="FLOAT", help="relative error tolerance")

    p = add("sigma-sweep", "train one relaxed model per sigma and compare")
    p.add_argument("--sigmas", type=_floats, default="0.1,0.8", metavar="S1,S2,...", help="sigma values")
    p.add_argument("--seeds", type=_ints, default=None, metavar="A,B,...", help="seeds (default: --seed)")
    _model_flags(p)
    _train_flags(p)
    _data_flags(p)
    return ap


def _echo_config(args) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}

    def fmt(v):
        if isinstance(v, (list, tuple)):
            return ",".join(str(x) for x in v)
        return "none" if v is None else str(v)

    print("config " + " ".join(f"{k}={fmt(v)}" for k, v in items.items()), flush=True)


def _resolve_paths(args) -> None:
    base = os.environ.get(DATA_ENV)
    for key, name in IDX_NAMES.items():
        if hasattr(args, key) and getattr(args, key) is None and base:
            setattr(args, key, str(Path(base) / name))


def _need(args, *keys) -> None:
    missing = [k for k in keys if getattr(args, k, None) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise FileNotFoundError(f"no path for {flags} (pass the flag or set {DATA_ENV})")


def _load_sets(args):
    from .data import load_idx, rotate_augment
    _need(args, "train_images", "train_labels", "test_images", "test_labels")
    tr = load_idx(args.train_images, args.train_labels, "train").subset(args.subset_train)
    te = load_idx(args.test_images, args.test_labels, "test").subset(args.subset_test)
    if args.augment == "rotate":
        tr = rotate_augment(tr, args.seed)
    return tr, te


def _train_config(args, **kw):
    from .train import TrainConfig
    return TrainConfig(seed=args.seed, epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                       optimizer=args.optimizer, sigma=args.sigma, mode=args.mode, widths=args.widths,
                       train_images=args.train_images, train_labels=args.train_labels,
                       test_images=args.test_images, test_labels=args.test_labels,
                       subset_train=args.subset_train, subset_test=args.subset_test, **kw)


def cmd_train(args) -> None:
    from .train import train
    tr, te = _load_sets(args)
    cfg = _train_config(args, out=args.out, ee_probes=args.ee_probes)
    res = train(cfg, tr, te, log=lambda line: print(line, flush=True))
    if args.out:
        print(f"checkpoint path={args.out} steps={res.steps}")


def cmd_eval(args) -> None:
    from .checkpoint import load_checkpoint
    from .data import load_idx
    from .train import evaluate
    _need(args, "test_images", "test_labels")
    model, meta = load_checkpoint(args.ckpt)
    te = load_idx(args.test_images, args.test_labels, "test").subset(args.subset_test)
    print(evaluate(model, te, int(meta.get("epoch", 0)), "test", args.batch_size).line())


def _probe_model(args):
    from .checkpoint import load_checkpoint
    from .models import build_r2net_toy, calibrate_bn
    from .tensor import Tensor
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
        return model, None
    model = build_r2net_toy(args.widths, args.mode, args.sigma, seed=args.seed)
    return model, lambda probes: calibrate_bn(model, Tensor(probes.inputs))


def cmd_equiv_check(args) -> None:
    from .data import make_symmetry_breaking_set, read_idx_images
    from .metrics import ProbeSet, audit, equivariance_records, stage_fn
    from .tensor import Tensor
    model, calibrate = _probe_model(args)
    if args.test_images:
        natural = read_idx_images(args.test_images).astype(np.float64)[:, None] / 255.0
    else:
        natural = make_symmetry_breaking_set(64, 1.0, args.seed).images
    half = args.probes // 2
    probes = ProbeSet.make(shape=natural.shape[1:], natural=natural, n_natural=args.probes - half,
                           n_gaussian=half, seed=args.seed)
    if calibrate:
        calibrate(probes)
    model.eval()
    targets = [("model", model)]
    if args.per_layer:
        names = [n for n, _ in model.trace(Tensor(probes.inputs[:1]))]
        targets = [(n, stage_fn(model, n)) for n in names[:-1]] + targets
    for name, phi in targets:
        recs = equivariance_records(phi, probes)
        for g in probes.group:
            sel = [r for r in recs if r.g == g]
            worst = max(sel, key=lambda r: r.error)
            print(f"record name={name} g={g} error={worst.error:.6e} norm={worst.norm:.6e}")
    rep = audit("model", model, probes)
    for line in rep.lines():
        print(line)


def cmd_param_count(args) -> None:
    from .models import build_r2net_toy, param_count, r2gconv_formula
    model = build_r2net_toy(args.widths, args.mode, args.sigma, args.num_classes, seed=args.seed,
                            in_channels=args.in_channels, lifting_k=args.lifting_k,
                            lifting_padding=args.lifting_k if args.lifting_k % 2 == 0 else args.lifting_k // 2)
    table = param_count(model)
    relaxed = args.mode == "relaxed"
    for row, line in zip(table.rows, table.lines()):
        name, kind, ci, co, k, stride, n = row
        extra = ""
        if kind == "gcba" and args.mode != "plain":
            expected = r2gconv_formula(ci, co, k, relaxed) + 2 * co
            extra = f" formula={expected} formula_ok={str(expected == n).lower()}"
        elif kind == "lifting":
            expected = ci * co * k * k + (16 if relaxed else 0) + 2 * co
            extra = f" formula={expected} formula_ok={str(expected == n).lower()}"
        print(line + extra)
    print(table.lines()[-1])


def cmd_build_filters(args) -> None:
    from .checkpoint import save_dump
    from .filters import build_relaxed_filters
    from .group import PerturbationDelta
    from .tensor import Tensor
    rng = np.random.default_rng(args.seed)
    k = 1 if args.flavor == "pointwise" else args.k
    shape = {"lifting": (args.co, args.ci, k, k), "pointwise": (args.co, args.ci, 4, 1, 1),
             "depthwise": (args.co, 1, 1, k, k)}[args.flavor]
    k_init = Tensor(rng.standard_normal(shape), name="k_init")
    delta = PerturbationDelta.zeros() if args.mode == "strict" else PerturbationDelta.init(args.sigma, rng)
    bank = build_relaxed_filters(k_init, delta.value, args.flavor)
    strict = build_relaxed_filters(k_init, PerturbationDelta.zeros().value, args.flavor)
    from .filters import strictness_gap
    print(f"bank flavor={args.flavor} k_init_shape={'x'.join(map(str, shape))} "
          f"k_rel_shape={'x'.join(map(str, bank.shape))} strictness_gap={strictness_gap(bank, strict):.6e}")
    if args.dump:
        save_dump(args.dump, {"k_init": k_init.data, "delta": delta.value.data, "k_rel": bank.data})
        print(f"dump path={args.dump} tensors=3")


def cmd_gradcheck(args) -> None:
    from .gradcheck import OP_CASES, model_spot_check, run_op_check
    failed = 0
    if args.model:
        from .data import make_symmetry_breaking_set
        from .models import build_r2net_toy
        model = build_r2net_toy((4, 4, 4, 4), "relaxed" if args.mode == "plain" else args.mode, args.sigma,
                                num_classes=4, seed=args.seed).astype(np.float64)
        ds = make_symmetry_breaking_set(4, 1.0, args.seed)
        for t in range(args.trials):
            for r in model_spot_check(model, ds.images, ds.labels, seed=args.seed + t):
                ok = r.passed(max(args.tol, 1e-4))
                failed += not ok
                print(f"check name={r.name} trial={t} rel_error={r.rel_error:.3e} passed={str(ok).lower()}")
    else:
        ops = sorted(OP_CASES) if args.op in (None, "all") else [args.op]
        for op in ops:
            for t in range(args.trials):
                for r in run_op_check(op, args.seed + t):
                    ok = r.passed(args.tol)
                    failed += not ok
                    print(f"check name={r.name} trial={t} rel_error={r.rel_error:.3e} passed={str(ok).lower()}")
    print(f"summary failed={failed}")
    if failed:
        raise RuntimeError(f"{failed} gradient checks above tolerance {args.tol}")


def cmd_sigma_sweep(args) -> None:
    from .train import sigma_sweep
    if len(args.sigmas) < 1:
        raise ValueError("--sigmas needs at least one value")
    tr, te = _load_sets(args)
    cfg = _train_config(args)
    rows = sigma_sweep(cfg, args.sigmas, tr, te, seeds=args.seeds, log=lambda line: print(line, flush=True))
    for s in args.sigmas:
        errs = sorted(r.test_error for r in rows if r.sigma == s)
        print(f"summary sigma={s:g} median_test_error_percent={float(np.median(errs)):.2f} runs={len(errs)}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "equiv-check": cmd_equiv_check,
    "param-count": cmd_param_count,
    "build-filters": cmd_build_filters,
    "gradcheck": cmd_gradcheck,
    "sigma-sweep": cmd_sigma_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _resolve_paths(args)
    _echo_config(args)
    from .tensor import precision
    try:
        with precision(args.precision):
            COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - every failure becomes one structured line
        kind = getattr(e, "kind", type(e).__name__)
        print(f"error kind={kind} message={str(e)!r}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
