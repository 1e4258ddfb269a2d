"""A small module system: parameter registration, train/eval, state dicts."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, matmul, silu


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Every Tensor attribute, trainable or frozen, plus buffers, in definition order."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_tensors(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={missing} unexpected={extra}")
        for name, t in own.items():
            if tuple(state[name].shape) != t.shape:
                raise ValueError(f"shape mismatch for {name}: expected {t.shape}, got {tuple(state[name].shape)}")
        for name, t in own.items():
            t.data = np.array(state[name], dtype=t.dtype)

    def astype(self, dtype) -> "Module":
        """Convert every tensor in place (used for f64 gradient checks)."""
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in) if fan_in else 0.0
    return rng.uniform(-bound, bound, size=shape)


class BatchNorm(Module):
    """Per-channel normalization; for group feature maps stats span batch, group and space."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.num_batches_tracked = Tensor(np.zeros(()))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            self.num_batches_tracked.data = self.num_batches_tracked.data + 1
            return F.batch_norm(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                                True, self.momentum, self.eps)
        if self.num_batches_tracked.data <= 0:
            raise RuntimeError("batch norm in eval mode before any training batch populated its running statistics")
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                            False, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = 1 / math.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class SiLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return silu(x)
