"""Expansion of an initial filter into its four relaxed rotated copies.

For each element i of R4 a 2x3 affine matrix [A_i^c + delta_i | 0] is
repeated over the output channels, turned into a sampling grid and used to
bilinearly resample the initial filter. The four results are stacked on a new
group axis (axis 1). Filters whose input already carries a group axis
(pointwise) additionally get that axis cyclically shifted by i, so that the
delta = 0 limit is an ordinary regular-representation group convolution.
"""

from __future__ import annotations

import numpy as np

from .functional import affine_grid, grid_sample
from .group import C4, relaxed_affine
from .tensor import Tensor, broadcast_to, concat, cyclic_shift, stack

FLAVORS = ("lifting", "pointwise", "depthwise")


def _check_shape(k_init: Tensor, flavor: str) -> None:
    s = k_init.shape
    ok = {
        "lifting": len(s) == 4 and s[2] == s[3],
        "pointwise": len(s) == 5 and s[2] == 4 and s[3:] == (1, 1),
        "depthwise": len(s) == 5 and s[1:3] == (1, 1) and s[3] == s[4],
    }
    if flavor not in ok:
        raise ValueError(f"unknown filter flavor {flavor!r}; expected one of {FLAVORS}")
    if not ok[flavor]:
        raise ValueError(f"initial filter shape {s} does not match the {flavor} flavor")


def build_relaxed_filters(k_init: Tensor, delta: Tensor, flavor: str) -> Tensor:
    """Group-expanded filter bank.

    lifting    (co, ci, k, k)       -> (co, 4, ci, k, k)
    pointwise  (co, ci, 4, 1, 1)    -> (co, 4, ci, 4, 1, 1)
    depthwise  (co, 1, 1, k, k)     -> (co, 4, 1, 1, k, k)
    """
    _check_shape(k_init, flavor)
    if delta.shape != (4, 2, 2):
        raise ValueError(f"delta must have shape (4, 2, 2), got {delta.shape}")
    s = k_init.shape
    co, k = s[0], s[-1]
    planes = k_init.reshape(co, int(np.prod(s[1:-2])), k, k)
    zero_col = Tensor(np.zeros((2, 1)), dtype=delta.dtype)
    banks = []
    for i in C4:
        theta = concat([relaxed_affine(i, delta), zero_col], axis=1)
        theta = broadcast_to(theta.reshape(1, 2, 3), (co, 2, 3))
        grid = affine_grid(theta, planes.shape)
        sampled = grid_sample(planes, grid).reshape(s)
        if flavor == "pointwise":
            sampled = cyclic_shift(sampled, 2, i)
        banks.append(sampled)
    return stack(banks, axis=1)


def strictness_gap(k_rel_relaxed, k_rel_strict) -> float:
    """Max-abs difference between a relaxed bank and its delta = 0 counterpart."""
    a = k_rel_relaxed.data if isinstance(k_rel_relaxed, Tensor) else np.asarray(k_rel_relaxed)
    b = k_rel_strict.data if isinstance(k_rel_strict, Tensor) else np.asarray(k_rel_strict)
    if a.shape != b.shape:
        raise ValueError(f"bank shapes differ: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) if a.size else 0.0
