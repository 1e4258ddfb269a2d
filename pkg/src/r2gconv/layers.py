"""Relaxed rotation-equivariant layers and their plain-CNN counterparts.

Group feature maps have shape (batch, channels, 4, h, w). Every group layer
takes a ``mode``:

* ``relaxed``: delta is a trainable (4, 2, 2) tensor drawn from N(0, sigma^2)
* ``strict``:  delta is frozen at exactly zero, giving C4 equivariance
* ``plain``:   no group axis at all (handled by the ``Plain*`` classes and
  the ``conv_block`` factory)
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .filters import build_relaxed_filters
from .nn import BatchNorm, Module, kaiming_uniform
from .tensor import Tensor, concat, max_along, silu

MODES = ("relaxed", "strict", "plain")


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def make_delta(mode: str, sigma: float, rng: np.random.Generator) -> Tensor:
    if mode == "relaxed":
        return Tensor(rng.standard_normal((4, 2, 2)) * sigma, requires_grad=True, name="delta")
    if mode == "strict":
        return Tensor(np.zeros((4, 2, 2)), name="delta")
    raise ValueError(f"no perturbation factor in {mode!r} mode")


def _group_shape(f: Tensor) -> tuple:
    if f.ndim != 5 or f.shape[2] != 4:
        raise ValueError(f"expected a group feature map (b, c, 4, h, w), got {f.shape}")
    return f.shape


class R2Lifting(Module):
    """Lift a planar image (b, ci, h, w) to a group feature map (b, co, 4, h', w').

    With ``norm`` the conv is followed by a group batch norm and SiLU.
    """

    def __init__(self, ci: int, co: int, k: int = 3, stride: int = 1, padding: int | None = None,
                 mode: str = "relaxed", sigma: float = 0.1, rng: np.random.Generator | None = None,
                 norm: bool = True):
        rng = rng or np.random.default_rng(0)
        self.ci, self.co, self.k, self.stride = ci, co, k, stride
        self.padding = k // 2 if padding is None else padding
        self.mode = _check_mode(mode)
        self.weight = Tensor(kaiming_uniform(rng, (co, ci, k, k), ci * k * k), requires_grad=True)
        self.delta = make_delta(mode, sigma, rng)
        self.bn = BatchNorm(co) if norm else None

    def filters(self) -> Tensor:
        return build_relaxed_filters(self.weight, self.delta, "lifting")

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.ci:
            raise ValueError(f"R2Lifting expects (b, {self.ci}, h, w), got {x.shape}")
        b = x.shape[0]
        bank = self.filters().reshape(4 * self.co, self.ci, self.k, self.k)
        y = F.conv2d(x, bank, self.stride, self.padding)
        y = y.reshape(b, self.co, 4, *y.shape[-2:])
        if self.bn is not None:
            y = silu(self.bn(y))
        return y


class R2GConv(Module):
    """Pointwise group conv followed by depthwise group conv, sharing one delta.

    With ``transposed`` the depthwise stage is a grouped transposed conv
    (the upsampling variant).
    """

    def __init__(self, ci: int, co: int, k: int = 3, stride: int = 1, mode: str = "relaxed",
                 sigma: float = 0.1, rng: np.random.Generator | None = None, transposed: bool = False):
        rng = rng or np.random.default_rng(0)
        self.ci, self.co, self.k, self.stride = ci, co, k, stride
        self.mode = _check_mode(mode)
        self.transposed = transposed
        self.pw_weight = Tensor(kaiming_uniform(rng, (co, ci, 4, 1, 1), 4 * ci), requires_grad=True)
        self.dw_weight = Tensor(kaiming_uniform(rng, (co, 1, 1, k, k), k * k), requires_grad=True)
        self.delta = make_delta(mode, sigma, rng)

    def pointwise(self, f: Tensor) -> Tensor:
        b, ci, _, h, w = _group_shape(f)
        if ci != self.ci:
            raise ValueError(f"R2PGConv expects {self.ci} input channels, got {ci}")
        bank = build_relaxed_filters(self.pw_weight, self.delta, "pointwise")
        y = F.conv2d(f.reshape(b, 4 * ci, h, w), bank.reshape(4 * self.co, 4 * ci, 1, 1))
        return y.reshape(b, self.co, 4, h, w)

    def depthwise(self, f: Tensor) -> Tensor:
        b, c, _, h, w = _group_shape(f)
        if c != self.co:
            raise ValueError(f"R2DGConv expects {self.co} channels, got {c}")
        bank = build_relaxed_filters(self.dw_weight, self.delta, "depthwise")
        bank = bank.reshape(4 * c, 1, self.k, self.k)
        x = f.reshape(b, 4 * c, h, w)
        if self.transposed:
            y = F.conv2d_transposed(x, bank, self.stride, 0, groups=4 * c)
        else:
            y = F.conv2d(x, bank, self.stride, self.k // 2, groups=4 * c)
        return y.reshape(b, c, 4, *y.shape[-2:])

    def forward(self, f: Tensor) -> Tensor:
        return self.depthwise(self.pointwise(f))


class R2GUp(R2GConv):
    """2x spatial upsampling: pointwise stage, then a 2x2 stride-2 transposed depthwise stage."""

    def __init__(self, ci: int, co: int, mode: str = "relaxed", sigma: float = 0.1,
                 rng: np.random.Generator | None = None):
        super().__init__(ci, co, k=2, stride=2, mode=mode, sigma=sigma, rng=rng, transposed=True)


class GCBA(Module):
    """R2GConv -> group batch norm -> SiLU; stride lives in the depthwise stage."""

    def __init__(self, ci: int, co: int, k: int = 3, stride: int = 1, mode: str = "relaxed",
                 sigma: float = 0.1, rng: np.random.Generator | None = None):
        self.ci, self.co = ci, co
        self.conv = R2GConv(ci, co, k, stride, mode, sigma, rng)
        self.bn = BatchNorm(co)

    def forward(self, f: Tensor) -> Tensor:
        return silu(self.bn(self.conv(f)))


class PlainConvBNAct(Module):
    """Ordinary separable conv (1x1 then depthwise k x k) -> batch norm -> SiLU on (b, c, h, w)."""

    def __init__(self, ci: int, co: int, k: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.ci, self.co, self.k, self.stride = ci, co, k, stride
        self.pw_weight = Tensor(kaiming_uniform(rng, (co, ci, 1, 1), ci), requires_grad=True)
        self.dw_weight = Tensor(kaiming_uniform(rng, (co, 1, k, k), k * k), requires_grad=True)
        self.bn = BatchNorm(co)

    def forward(self, x: Tensor) -> Tensor:
        y = F.conv2d(x, self.pw_weight)
        y = F.conv2d(y, self.dw_weight, self.stride, self.k // 2, groups=self.co)
        return silu(self.bn(y))


def conv_block(ci: int, co: int, k: int = 3, stride: int = 1, mode: str = "relaxed",
               sigma: float = 0.1, rng: np.random.Generator | None = None) -> Module:
    if _check_mode(mode) == "plain":
        return PlainConvBNAct(ci, co, k, stride, rng)
    return GCBA(ci, co, k, stride, mode, sigma, rng)


class Bottleneck(Module):
    """Two 3x3 conv blocks with an identity residual."""

    def __init__(self, c: int, mode: str = "relaxed", sigma: float = 0.1,
                 rng: np.random.Generator | None = None, hidden_ratio: float = 1.0):
        hidden = max(1, int(round(c * hidden_ratio)))
        self.ci = self.co = c
        self.cv1 = conv_block(c, hidden, 3, 1, mode, sigma, rng)
        self.cv2 = conv_block(hidden, c, 3, 1, mode, sigma, rng)

    def forward(self, f: Tensor) -> Tensor:
        return f + self.cv2(self.cv1(f))


class R2NetBlock(Module):
    """Split channels in half, run one half through a bottleneck chain, fuse everything.

    The untouched half, the input half and every bottleneck output are
    concatenated on the channel axis and fused by a 1x1 conv block to ``co``.
    """

    def __init__(self, ci: int, co: int | None = None, n_bottlenecks: int = 1, mode: str = "relaxed",
                 sigma: float = 0.1, rng: np.random.Generator | None = None, hidden_ratio: float = 1.0):
        if ci % 2:
            raise ValueError(f"R2NetBlock needs an even channel count, got {ci}")
        co = ci if co is None else co
        self.ci, self.co, self.half = ci, co, ci // 2
        self.bottlenecks = [Bottleneck(self.half, mode, sigma, rng, hidden_ratio) for _ in range(n_bottlenecks)]
        self.fuse = conv_block((2 + n_bottlenecks) * self.half, co, 1, 1, mode, sigma, rng)

    def forward(self, f: Tensor) -> Tensor:
        a, b = f[:, :self.half], f[:, self.half:]
        parts = [a, b]
        for m in self.bottlenecks:
            b = m(b)
            parts.append(b)
        return self.fuse(concat(parts, axis=1))


class GSPPF(Module):
    """Spatial pyramid pooling on group feature maps.

    1x1 group conv to ci/2 channels (+BN+SiLU), three chained k x k stride-1 max
    pools applied to every group slice, concatenation of the four stages, then
    a 1x1 conv shared across group slices (+bias+SiLU) back to ``co``.
    """

    def __init__(self, ci: int, co: int, pool_k: int = 5, mode: str = "strict",
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.grouped = _check_mode(mode) != "plain"
        self.ci, self.co, self.pool_k = ci, co, pool_k
        hidden = ci // 2
        self.hidden = hidden
        if self.grouped:
            self.cv1_weight = Tensor(kaiming_uniform(rng, (hidden, ci, 4, 1, 1), 4 * ci), requires_grad=True)
        else:
            self.cv1_weight = Tensor(kaiming_uniform(rng, (hidden, ci, 1, 1), ci), requires_grad=True)
        self.cv1_bn = BatchNorm(hidden)
        self.cv2_weight = Tensor(kaiming_uniform(rng, (co, 4 * hidden, 1, 1), 4 * hidden), requires_grad=True)
        self.cv2_bias = Tensor(np.zeros(co), requires_grad=True)

    def _cv1(self, f: Tensor) -> Tensor:
        if not self.grouped:
            return F.conv2d(f, self.cv1_weight)
        b, ci, _, h, w = _group_shape(f)
        zero = Tensor(np.zeros((4, 2, 2)), dtype=self.cv1_weight.dtype)
        bank = build_relaxed_filters(self.cv1_weight, zero, "pointwise")
        y = F.conv2d(f.reshape(b, 4 * ci, h, w), bank.reshape(4 * self.hidden, 4 * ci, 1, 1))
        return y.reshape(b, self.hidden, 4, h, w)

    def _cv2(self, f: Tensor) -> Tensor:
        if not self.grouped:
            return F.conv2d(f, self.cv2_weight) + self.cv2_bias.reshape(1, self.co, 1, 1)
        b, c, _, h, w = f.shape
        # same 1x1 weights for every group slice: fold the group axis into batch
        x = f.transpose(0, 2, 1, 3, 4).reshape(b * 4, c, h, w)
        y = F.conv2d(x, self.cv2_weight) + self.cv2_bias.reshape(1, self.co, 1, 1)
        return y.reshape(b, 4, self.co, h, w).transpose(0, 2, 1, 3, 4)

    def forward(self, f: Tensor) -> Tensor:
        h, w = f.shape[-2:]
        pad = self.pool_k // 2
        if min(h, w) < self.pool_k:
            raise ValueError(f"spatial dims {h}x{w} too small for pool size {self.pool_k}")
        y = silu(self.cv1_bn(self._cv1(f)))
        stages = [y]
        for _ in range(3):
            stages.append(F.max_pool2d(stages[-1], self.pool_k, 1, pad))
        return silu(self._cv2(concat(stages, axis=1)))


def gconcat(fs) -> Tensor:
    """Channel concatenation of group feature maps with matching batch/group/space dims."""
    fs = list(fs)
    if not fs:
        raise ValueError("gconcat needs at least one feature map")
    ref = fs[0].shape
    for f in fs[1:]:
        if f.ndim != len(ref) or f.shape[0] != ref[0] or f.shape[2:] != ref[2:]:
            raise ValueError(f"gconcat dim mismatch: {ref} vs {f.shape}")
    return fs[0] if len(fs) == 1 else concat(fs, axis=1)


class GConcat(Module):
    def forward(self, *fs: Tensor) -> Tensor:
        return gconcat(fs)


class TransferBlock(Module):
    """Group feature map (b, c, 4, h, w) -> planar map (b, co, h, w).

    Max over the group axis (invariant to the cyclic shift), then a plain 1x1
    conv with bias, batch norm and SiLU. In plain mode the max is skipped.
    """

    def __init__(self, ci: int, co: int, mode: str = "relaxed", rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.grouped = _check_mode(mode) != "plain"
        self.ci, self.co = ci, co
        self.weight = Tensor(kaiming_uniform(rng, (co, ci, 1, 1), ci), requires_grad=True)
        self.bias = Tensor(np.zeros(co), requires_grad=True)
        self.bn = BatchNorm(co)

    def forward(self, f: Tensor) -> Tensor:
        if self.grouped:
            _group_shape(f)
            f = max_along(f, 2)
        y = F.conv2d(f, self.weight) + self.bias.reshape(1, self.co, 1, 1)
        return silu(self.bn(y))
