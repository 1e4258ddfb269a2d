"""Toy-scale classifiers assembled from the layer zoo, plus parameter accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import functional as F
from .layers import GCBA, MODES, PlainConvBNAct, R2Lifting, R2NetBlock, TransferBlock
from .nn import BatchNorm, Linear, Module, kaiming_uniform
from .tensor import Tensor, global_avg_pool, no_grad, silu

KINDS = ("lifting", "pgconv", "dgconv", "r2gconv", "gcba", "bottleneck", "r2net_block",
         "gsppf", "gconcat", "r2gup", "transfer", "stem", "head")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    ci: int
    co: int
    k: int = 1
    stride: int = 1
    mode: str = "relaxed"


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model bit-for-bit from a seed.

    The default lifting kernel (4, padding 4) turns a 28x28 image into 33x33,
    after which every stride-2 stage lands on odd sizes (17, 9, 5, 3). A
    stride-2 conv is only exactly rotation-equivariant when its sampling
    lattice is centred, i.e. when (h + 2p - k) is divisible by the stride.
    """

    name: str = "r2net-toy"
    widths: tuple = (8, 16, 32, 32)
    mode: str = "relaxed"
    sigma: float = 0.1
    num_classes: int = 10
    in_channels: int = 1
    image_size: int = 28
    lifting_k: int = 4
    lifting_padding: int = 4
    n_bottlenecks: int = 1
    seed: int = 0
    plain_widths: tuple | None = None  # resolved by build_r2net_toy in plain mode

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.plain_widths is not None:
            self.plain_widths = tuple(int(w) for w in self.plain_widths)
        self.validate()

    def validate(self) -> None:
        if len(self.widths) != 4:
            raise ValueError(f"widths must have 4 entries (one per stage), got {self.widths}")
        if any(w <= 0 or w % 2 for w in self.widths):
            raise ValueError(f"widths must be positive and even, got {self.widths}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.num_classes < 1 or self.in_channels < 1 or self.image_size < 1:
            raise ValueError("num_classes, in_channels and image_size must be positive")

    def effective_widths(self) -> tuple:
        return self.plain_widths if self.mode == "plain" and self.plain_widths else self.widths

    def layers(self) -> list[LayerSpec]:
        w = self.effective_widths()
        m = self.mode
        out = [LayerSpec("stem", "stem" if m == "plain" else "lifting", self.in_channels, w[0],
                         self.lifting_k, 1, m)]
        prev = w[0]
        for s, width in enumerate(w):
            out.append(LayerSpec(f"stage{s}.down", "gcba", prev, width, 3, 2, m))
            out.append(LayerSpec(f"stage{s}.block", "r2net_block", width, width, 3, 1, m))
            prev = width
        out.append(LayerSpec("transfer", "transfer", prev, prev, 1, 1, m))
        out.append(LayerSpec("head", "head", prev, self.num_classes, 1, 1, m))
        return out

    def spatial_sizes(self) -> list[int]:
        h = self.image_size + 2 * self.lifting_padding - self.lifting_k + 1
        sizes = [h]
        for _ in range(4):
            h = (h + 2 - 3) // 2 + 1
            sizes.append(h)
        return sizes

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        raw = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(**raw)


class PlainStem(Module):
    """Ordinary k x k conv + BN + SiLU; the plain-mode stand-in for R2Lifting."""

    def __init__(self, ci: int, co: int, k: int, padding: int, rng: np.random.Generator):
        self.ci, self.co, self.k, self.padding = ci, co, k, padding
        self.weight = Tensor(kaiming_uniform(rng, (co, ci, k, k), ci * k * k), requires_grad=True)
        self.bn = BatchNorm(co)

    def forward(self, x: Tensor) -> Tensor:
        return silu(self.bn(F.conv2d(x, self.weight, 1, self.padding)))


class R2NetToy(Module):
    """lifting -> 4 x (stride-2 GCBA3x3 -> R2Net block) -> transfer -> GAP -> linear."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        m, s = spec.mode, spec.sigma
        w = spec.effective_widths()
        if m == "plain":
            self.stem = PlainStem(spec.in_channels, w[0], spec.lifting_k, spec.lifting_padding, rng)
        else:
            self.stem = R2Lifting(spec.in_channels, w[0], spec.lifting_k, 1, spec.lifting_padding,
                                  mode=m, sigma=s, rng=rng)
        self.downs, self.blocks = [], []
        prev = w[0]
        for width in w:
            if m == "plain":
                self.downs.append(PlainConvBNAct(prev, width, 3, 2, rng))
            else:
                self.downs.append(GCBA(prev, width, 3, 2, m, s, rng))
            self.blocks.append(R2NetBlock(width, width, spec.n_bottlenecks, m, s, rng))
            prev = width
        self.transfer = TransferBlock(prev, prev, m, rng)
        self.head = Linear(prev, spec.num_classes, rng)

    def trace(self, x: Tensor) -> list[tuple[str, Tensor]]:
        """Forward pass returning every named stage output, logits last."""
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected input (b, {self.spec.in_channels}, h, w), got {x.shape}")
        out = []
        f = self.stem(x)
        out.append(("stem", f))
        for i, (down, block) in enumerate(zip(self.downs, self.blocks)):
            f = down(f)
            out.append((f"stage{i}.down", f))
            f = block(f)
            out.append((f"stage{i}.block", f))
        p = self.transfer(f)
        out.append(("transfer", p))
        out.append(("logits", self.head(global_avg_pool(p))))
        return out

    def forward(self, x: Tensor) -> Tensor:
        return self.trace(x)[-1][1]

    def deltas(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if n.endswith("delta")]


def _plain_widths(widths: tuple, mult: float) -> tuple:
    return tuple(max(2, 2 * int(round(w * mult / 2))) for w in widths)


def match_plain_widths(spec: ModelSpec, tol: float = 0.10) -> tuple:
    """Scale widths so the plain model's trainable count is as close as possible to the group model's."""
    target = R2NetToy(replace(spec, mode="relaxed", plain_widths=None)).num_parameters()
    best, best_gap = None, np.inf
    for mult in np.arange(0.5, 4.0001, 0.0625):
        w = _plain_widths(spec.widths, float(mult))
        n = R2NetToy(replace(spec, mode="plain", plain_widths=w)).num_parameters()
        gap = abs(n - target) / target
        if gap < best_gap:
            best, best_gap = w, gap
    if best_gap > tol:
        raise ValueError(f"no plain width multiplier within {tol:.0%} of {target} parameters")
    return best


def build_r2net_toy(widths=(8, 16, 32, 32), mode: str = "relaxed", sigma: float = 0.1,
                    num_classes: int = 10, **kw) -> R2NetToy:
    spec = ModelSpec(widths=tuple(widths), mode=mode, sigma=sigma, num_classes=num_classes, **kw)
    if mode == "plain" and spec.plain_widths is None:
        spec.plain_widths = match_plain_widths(spec)
    return R2NetToy(spec)


@dataclass
class ParamTable:
    total: int
    rows: list = field(default_factory=list)  # (name, kind, ci, co, k, stride, count)

    def lines(self) -> list[str]:
        out = [f"name={r[0]} kind={r[1]} ci={r[2]} co={r[3]} k={r[4]} stride={r[5]} params={r[6]}"
               for r in self.rows]
        out.append(f"name=total params={self.total}")
        return out


def param_count(model: R2NetToy) -> ParamTable:
    """Trainable scalars, total and per top-level layer.

    Frozen tensors (strict-mode delta, BN running buffers) are not counted,
    so the total is exactly what an optimizer would update.
    """
    modules = [model.stem]
    for d, b in zip(model.downs, model.blocks):
        modules += [d, b]
    modules += [model.transfer, model.head]
    rows = []
    for ls, mod in zip(model.spec.layers(), modules):
        rows.append((ls.name, ls.kind, ls.ci, ls.co, ls.k, ls.stride, mod.num_parameters()))
    total = sum(r[-1] for r in rows)
    assert total == model.num_parameters()
    return ParamTable(total, rows)


def r2gconv_formula(ci: int, co: int, k: int, trainable_delta: bool = True) -> int:
    """Closed-form count of one R2GConv: 4*ci*co pointwise + k^2*co depthwise + 16 for delta."""
    return 4 * ci * co + k * k * co + (16 if trainable_delta else 0)


def r2gconv_ratio(ci: int, k: int) -> float:
    """Parameter ratio of a pointwise+depthwise R2GConv to a dense group conv (delta ignored)."""
    return 1.0 / (k * k) + 1.0 / (4 * ci)


def batchnorms(model: Module):
    for _, child in model.children():
        if isinstance(child, BatchNorm):
            yield child
        yield from batchnorms(child)


def calibrate_bn(model: Module, x: Tensor) -> None:
    """Set every BN running statistic to the batch statistics of ``x`` (one pass, no grad)."""
    bns = list(batchnorms(model))
    saved = [b.momentum for b in bns]
    for b in bns:
        b.momentum = 1.0
    model.train()
    with no_grad():
        model(x)
    for b, mom in zip(bns, saved):
        b.momentum = mom
    model.eval()
