"""The rotation group C4, its relaxed counterpart R4 and their actions.

Group elements are plain ints 0..3 (powers of the 90 degree generator).
Positive powers rotate counterclockwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, cyclic_shift, rot90

C4 = (0, 1, 2, 3)
GROUP_AXIS = 2  # (batch, channels, group, height, width)

# cos/sin of i * pi/2 snapped to exact integers
_STRICT = np.array([
    [[1, 0], [0, 1]],
    [[0, -1], [1, 0]],
    [[-1, 0], [0, -1]],
    [[0, 1], [-1, 0]],
], dtype=np.int8)


def _check(i: int) -> int:
    if i not in C4:
        raise ValueError(f"C4 element must be one of 0..3, got {i!r}")
    return int(i)


def compose(i: int, j: int) -> int:
    return (_check(i) + _check(j)) % 4


def inverse(i: int) -> int:
    return (4 - _check(i)) % 4


def strict_affine(i: int, dtype=np.float64) -> np.ndarray:
    """2x2 rotation matrix for c^i with entries exactly in {-1, 0, 1}."""
    return _STRICT[_check(i)].astype(dtype)


def relaxed_affine(i: int, delta):
    """strict_affine(i) + delta[i].

    ``delta`` may be a (4, 2, 2) array or a Tensor; with a Tensor the result
    is a differentiable Tensor.
    """
    if isinstance(delta, Tensor):
        return delta[_check(i)] + Tensor(strict_affine(i), dtype=delta.dtype)
    delta = np.asarray(delta)
    return strict_affine(i, delta.dtype if delta.dtype.kind == "f" else np.float64) + delta[_check(i)]


def act_on_coords(matrix, coords) -> np.ndarray:
    """Map each (u, v) row of ``coords`` by matrix-vector multiplication."""
    m = np.asarray(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=np.float64)
    c = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    return c @ m.T


@dataclass
class PerturbationDelta:
    """The learnable 4x2x2 perturbation of the four C4 rotation matrices."""

    value: Tensor
    sigma: float

    @classmethod
    def init(cls, sigma: float, rng: np.random.Generator, trainable: bool = True,
             dtype=None) -> "PerturbationDelta":
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        draw = rng.standard_normal((4, 2, 2)) * sigma
        return cls(Tensor(draw, requires_grad=trainable, dtype=dtype, name="delta"), float(sigma))

    @classmethod
    def zeros(cls, dtype=None) -> "PerturbationDelta":
        return cls(Tensor(np.zeros((4, 2, 2)), requires_grad=False, dtype=dtype, name="delta"), 0.0)

    def matrices(self) -> np.ndarray:
        return np.stack([relaxed_affine(i, self.value.data) for i in C4])


def _require_square(x) -> None:
    h, w = x.shape[-2:]
    if h != w:
        raise ValueError(f"exact C4 actions need square spatial dims, got {h}x{w}")


def act_on_input(g: int, x):
    """Rotate the last two axes of ``x`` by g quarter turns (a pixel permutation)."""
    _check(g)
    _require_square(x)
    if isinstance(x, Tensor):
        return rot90(x, g)
    return np.ascontiguousarray(np.rot90(x, g, axes=(-2, -1)))


def act_on_group_feature(g: int, f):
    """Regular representation on (b, c, 4, h, w): rotate space, shift the group axis by g."""
    _check(g)
    _require_square(f)
    if f.shape[GROUP_AXIS] != 4:
        raise ValueError(f"group axis must have extent 4, got shape {f.shape}")
    if isinstance(f, Tensor):
        return cyclic_shift(rot90(f, g), GROUP_AXIS, g)
    return np.roll(np.rot90(f, g, axes=(-2, -1)), g, axis=GROUP_AXIS)


def act_identity(g: int, y):
    return y


def to_tensor(x) -> Tensor:
    return as_tensor(x)
