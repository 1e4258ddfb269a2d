"""Deterministic desk-scale training, evaluation and sigma sweeps."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import save_checkpoint
from .data import LabeledImageSet
from .metrics import ProbeSet, equivariance_error
from .models import R2NetToy, build_r2net_toy, calibrate_bn
from .nn import Module
from .tensor import Tensor, backward, no_grad, softmax_cross_entropy

OPTIMIZERS = ("adam", "sgd-momentum")


class DivergenceError(RuntimeError):
    kind = "divergence"

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch, self.step, self.loss = epoch, step, loss
        super().__init__(f"divergence: loss={loss} at epoch={epoch} step={step}")


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    sigma: float = 0.1
    mode: str = "relaxed"
    widths: tuple = (8, 16, 32, 32)
    num_classes: int = 10
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    subset_train: int | None = None
    subset_test: int | None = None
    out: str | None = None
    ee_probes: int = 0
    loss_limit: float = 1e4

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        self.widths = tuple(int(w) for w in self.widths)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    top1_error_percent: float
    empirical_ee: float | None = None
    wall_seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.top1_error_percent <= 100.0:
            raise ValueError("top1 error must lie in [0, 100]")

    def line(self) -> str:
        ee = "na" if self.empirical_ee is None else f"{self.empirical_ee:.6e}"
        return (f"epoch={self.epoch} split={self.split} loss={self.loss:.6f} "
                f"top1_error_percent={self.top1_error_percent:.2f} empirical_ee={ee} "
                f"wall_seconds={self.wall_seconds:.2f}")

    @classmethod
    def parse(cls, line: str) -> "MetricsRecord":
        kv = dict(tok.split("=", 1) for tok in line.split())
        ee = None if kv["empirical_ee"] == "na" else float(kv["empirical_ee"])
        return cls(int(kv["epoch"]), kv["split"], float(kv["loss"]), float(kv["top1_error_percent"]),
                   ee, float(kv["wall_seconds"]))


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params, self.lr, self.momentum = list(params), lr, momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def state(self) -> dict[str, np.ndarray]:
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = list(params), lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t, dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"], out[f"v.{i}"] = m, v
        return out


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    return SGD(params, cfg.learning_rate, cfg.momentum)


def build_model(cfg: TrainConfig, image_size: int = 28, in_channels: int = 1) -> R2NetToy:
    return build_r2net_toy(cfg.widths, cfg.mode, cfg.sigma, cfg.num_classes, seed=cfg.seed,
                           image_size=image_size, in_channels=in_channels)


def predict(model: Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out, axis=0)


def evaluate(model: Module, ds: LabeledImageSet, epoch: int = 0, split: str = "test",
             batch_size: int = 256) -> MetricsRecord:
    """Top-1 error over the whole set; argmax ties resolve to the lowest class index."""
    t0 = time.perf_counter()
    logits = predict(model, ds.images, batch_size)
    n_classes = logits.shape[1]
    if ds.labels.size and ds.labels.max() >= n_classes:
        raise ValueError(f"label {ds.labels.max()} outside the model's {n_classes} classes")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(ds)), ds.labels].mean())
    err = float(100.0 * np.mean(np.argmax(logits, axis=1) != ds.labels))
    return MetricsRecord(epoch, split, loss, err, None, time.perf_counter() - t0)


def model_ee(model: R2NetToy, natural: np.ndarray, n_probes: int, seed: int) -> float:
    half = n_probes // 2
    probes = ProbeSet.make(shape=natural.shape[1:], natural=natural, n_natural=n_probes - half,
                           n_gaussian=half, seed=seed)
    model.eval()
    return equivariance_error(model, probes)


@dataclass
class TrainResult:
    model: R2NetToy
    records: list = field(default_factory=list)
    steps: int = 0


def train(cfg: TrainConfig, train_set: LabeledImageSet, test_set: LabeledImageSet | None = None,
          log=None, step_hook=None) -> TrainResult:
    """Train from scratch; everything random derives from ``cfg.seed``.

    ``log`` receives each MetricsRecord line as it is produced; ``step_hook``
    is called as ``step_hook(step, model)`` after every optimizer step.
    """
    h = train_set.images.shape[-1]
    model = build_model(cfg, h, train_set.images.shape[1])
    params = model.parameters()
    opt = make_optimizer(cfg, params)
    order_rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(model)
    n = len(train_set)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        perm = order_rng.permutation(n)
        total, correct, seen = 0.0, 0, 0
        for b, i in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[i:i + cfg.batch_size]
            x, y = Tensor(train_set.images[idx]), train_set.labels[idx]
            model.zero_grad()
            logits = model(x)
            loss = softmax_cross_entropy(logits, y)
            lv = float(loss.data)
            if not math.isfinite(lv) or lv > cfg.loss_limit:
                raise DivergenceError(epoch, b, lv)
            backward(loss)
            opt.step()
            step += 1
            if step_hook is not None:
                step_hook(step, model)
            total += lv * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            seen += len(idx)
        rec = MetricsRecord(epoch, "train", total / seen, 100.0 * (1 - correct / seen), None,
                            time.perf_counter() - t0)
        result.records.append(rec)
        if log:
            log(rec.line())
        if test_set is not None:
            rec = evaluate(model, test_set, epoch)
            if cfg.ee_probes:
                rec.empirical_ee = model_ee(model, test_set.images, cfg.ee_probes, cfg.seed)
            result.records.append(rec)
            if log:
                log(rec.line())
    result.steps = step
    model.eval()
    if cfg.out:
        save_checkpoint(cfg.out, model, {"seed": cfg.seed, "epoch": cfg.epochs, "optimizer": cfg.optimizer,
                                         "steps": step, "config": _jsonable(cfg)}, opt.state())
    return result


def _jsonable(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["widths"] = list(d["widths"])
    return d


@dataclass
class SweepRow:
    sigma: float
    seed: int
    test_error: float
    ee_init: float
    ee_final: float

    def line(self) -> str:
        return (f"sigma={self.sigma:g} seed={self.seed} test_error_percent={self.test_error:.2f} "
                f"ee_init={self.ee_init:.6e} ee_final={self.ee_final:.6e}")


def init_ee(cfg: TrainConfig, calib: np.ndarray, probes: ProbeSet) -> float:
    """EE of the freshly initialized model, batch norm filled from ``calib``."""
    model = build_model(cfg, calib.shape[-1], calib.shape[1])
    calibrate_bn(model, Tensor(calib))
    return equivariance_error(model, probes)


def sigma_sweep(cfg: TrainConfig, sigmas, train_set: LabeledImageSet, test_set: LabeledImageSet,
                seeds=None, n_probes: int = 16, log=None) -> list[SweepRow]:
    """One relaxed model per (sigma, seed); with a shared seed delta = sigma * z for a common z."""
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("need at least one sigma")
    rows = []
    for seed in (seeds or [cfg.seed]):
        half = n_probes // 2
        probes = ProbeSet.make(shape=test_set.images.shape[1:], natural=test_set.images,
                               n_natural=n_probes - half, n_gaussian=half, seed=seed)
        for s in sigmas:
            c = replace(cfg, sigma=float(s), seed=seed, mode="relaxed", out=None)
            # calibrating on the probes keeps the Gaussian half of them in range
            ee0 = init_ee(c, probes.inputs, probes)
            res = train(c, train_set, None)
            err = evaluate(res.model, test_set).top1_error_percent
            row = SweepRow(float(s), seed, err, ee0, equivariance_error(res.model, probes))
            rows.append(row)
            if log:
                log(row.line())
    return rows
