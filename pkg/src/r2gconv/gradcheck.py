"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.rel_error <= tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-30)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-6,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn().data)
        flat[i] = orig - eps
        down = float(loss_fn().data)
        flat[i] = orig
        out[n] = (up - down) / (2 * eps)
    return out


def check_gradients(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    names: Sequence[str] | None = None) -> list[GradCheckResult]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    Inputs should be float64 for meaningful tolerances. ``max_entries``
    limits the check to a random subset of each input's entries.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    backward(loss_fn())
    results = []
    for n, t in enumerate(inputs):
        size = t.data.size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        else:
            idx = np.arange(size)
        analytic = np.zeros(size) if t.grad is None else t.grad.reshape(-1)
        numeric = numeric_grad(loss_fn, t, eps, list(idx))
        name = names[n] if names else (t.name or f"input{n}")
        results.append(GradCheckResult(name, rel_error(analytic[idx], numeric), len(idx)))
    return results


# ----------------------------------------------------------------------
# a registry of per-op checks, shared by the CLI and the test suite
# ----------------------------------------------------------------------

def _projection(out: Tensor, rng: np.random.Generator) -> Tensor:
    w = Tensor(rng.standard_normal(out.shape))
    return out, w


def _dot(out: Tensor, w: Tensor) -> Tensor:
    from .tensor import tsum
    return tsum(out * w)


def _off_lattice(coords: np.ndarray, size: int, margin: float = 0.05) -> np.ndarray:
    """Nudge normalized coords so their pixel positions stay ``margin`` away from integers."""
    pix = (coords + 1) * (size - 1) / 2
    frac = pix - np.floor(pix)
    frac = np.clip(frac, margin, 1 - margin)
    return (np.floor(pix) + frac) * 2 / (size - 1) - 1


def _case_conv2d(rng):
    from .functional import conv2d
    stride, padding, groups = rng.integers(1, 3), rng.integers(0, 2), int(rng.choice([1, 2]))
    x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True, name="x")
    w = Tensor(rng.standard_normal((4, 4 // groups, 3, 3)), requires_grad=True, name="w")
    _, r = _projection(conv2d(x, w, stride, padding, groups), rng)
    return (lambda: _dot(conv2d(x, w, stride, padding, groups), r)), [x, w]


def _case_conv2d_transposed(rng):
    from .functional import conv2d_transposed
    stride, groups = rng.integers(1, 3), int(rng.choice([1, 2]))
    y = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True, name="y")
    w = Tensor(rng.standard_normal((4, 4 // groups, 2, 2)), requires_grad=True, name="w")
    _, r = _projection(conv2d_transposed(y, w, stride, 0, groups), rng)
    return (lambda: _dot(conv2d_transposed(y, w, stride, 0, groups), r)), [y, w]


def _case_grid_sample(rng):
    from .functional import grid_sample
    x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True, name="input")
    g = _off_lattice(rng.uniform(-1.2, 1.2, (2, 4, 4, 2)), 5)
    grid = Tensor(g, requires_grad=True, name="grid")
    _, r = _projection(grid_sample(x, grid), rng)
    return (lambda: _dot(grid_sample(x, grid), r)), [x, grid]


def _case_affine_grid(rng):
    from .functional import affine_grid
    theta = Tensor(rng.standard_normal((2, 2, 3)), requires_grad=True, name="theta")
    _, r = _projection(affine_grid(theta, (2, 1, 3, 4)), rng)
    return (lambda: _dot(affine_grid(theta, (2, 1, 3, 4)), r)), [theta]


def _smooth_delta(rng, k: int, sigma: float = 0.1) -> np.ndarray:
    """A delta whose sampled filter coordinates all stay clear of interpolation-cell edges."""
    from .functional import lattice
    from .group import strict_affine
    u = lattice(k, np.float64)
    pts = np.stack(np.meshgrid(u, u, indexing="xy"), -1).reshape(-1, 2)
    # the origin maps to itself for every delta, so its kink never moves
    pts = pts[np.abs(pts).sum(axis=1) > 0]
    for _ in range(1000):
        d = rng.standard_normal((4, 2, 2)) * sigma
        ok = True
        for i in range(4):
            pix = (pts @ (strict_affine(i) + d[i]).T + 1) * (k - 1) / 2
            frac = np.abs(pix - np.rint(pix))
            if frac.min() < 0.02:
                ok = False
                break
        if ok:
            return d
    raise RuntimeError("could not draw a delta away from cell boundaries")


def _case_build_filters(rng, flavor="depthwise"):
    from .filters import build_relaxed_filters
    k = 3 if flavor != "pointwise" else 1
    shape = {"lifting": (2, 3, k, k), "pointwise": (2, 3, 4, 1, 1), "depthwise": (2, 1, 1, k, k)}[flavor]
    kin = Tensor(rng.standard_normal(shape), requires_grad=True, name="k_init")
    delta = Tensor(_smooth_delta(rng, max(k, 2)) if k > 1 else rng.standard_normal((4, 2, 2)) * 0.1,
                   requires_grad=True, name="delta")
    _, r = _projection(build_relaxed_filters(kin, delta, flavor), rng)
    return (lambda: _dot(build_relaxed_filters(kin, delta, flavor), r)), [kin, delta]


def _case_batch_norm(rng):
    from .functional import batch_norm
    x = Tensor(rng.standard_normal((3, 2, 4, 3, 3)), requires_grad=True, name="x")
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True, name="gamma")
    beta = Tensor(rng.standard_normal(2), requires_grad=True, name="beta")
    _, r = _projection(x, rng)
    return (lambda: _dot(batch_norm(x, gamma, beta, None, None, True), r)), [x, gamma, beta]


def _case_max_pool(rng):
    from .functional import max_pool2d
    # a permutation of well-separated values has no ties
    x = Tensor(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1, requires_grad=True, name="x")
    _, r = _projection(max_pool2d(x, 3, 1, 1), rng)
    return (lambda: _dot(max_pool2d(x, 3, 1, 1), r)), [x]


def _case_unary(op):
    def case(rng):
        from . import tensor as T
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="x")
        f = {"silu": T.silu, "square": T.square, "neg": T.neg,
             "scale": lambda a: T.scale(a, 1.7), "reshape": lambda a: T.reshape(a, (2, 6)),
             "transpose": lambda a: T.transpose(a, (1, 0)), "cyclic_shift": lambda a: T.cyclic_shift(a, 1, 1),
             "global_avg_pool": lambda a: T.global_avg_pool(T.reshape(a, (1, 1, 3, 4))),
             "max_along": lambda a: T.max_along(a, 1), "rot90": lambda a: T.rot90(T.reshape(a, (1, 2, 6)).reshape(1, 3, 4)[:, :3, :3], 1)}[op]
        _, r = _projection(f(x), rng)
        return (lambda: _dot(f(x), r)), [x]
    return case


def _case_binary(op):
    def case(rng):
        from . import tensor as T
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="a")
        b = Tensor(rng.standard_normal((4, 2) if op == "matmul" else (3, 4) if op != "add" else (4,)),
                   requires_grad=True, name="b")
        f = {"add": T.add, "mul": T.mul, "matmul": T.matmul,
             "concat": lambda p, q: T.concat([p, q], axis=0)}[op]
        _, r = _projection(f(a, b), rng)
        return (lambda: _dot(f(a, b), r)), [a, b]
    return case


def _case_cross_entropy(rng):
    from .tensor import softmax_cross_entropy
    z = Tensor(rng.standard_normal((5, 10)), requires_grad=True, name="logits")
    y = rng.integers(0, 10, 5)
    return (lambda: softmax_cross_entropy(z, y)), [z]


OP_CASES = {
    "conv2d": _case_conv2d,
    "conv2d_transposed": _case_conv2d_transposed,
    "affine_grid": _case_affine_grid,
    "grid_sample": _case_grid_sample,
    "build_filters_lifting": lambda rng: _case_build_filters(rng, "lifting"),
    "build_filters_pointwise": lambda rng: _case_build_filters(rng, "pointwise"),
    "build_filters_depthwise": lambda rng: _case_build_filters(rng, "depthwise"),
    "batch_norm": _case_batch_norm,
    "max_pool2d": _case_max_pool,
    "softmax_cross_entropy": _case_cross_entropy,
    **{op: _case_unary(op) for op in ("silu", "square", "neg", "scale", "reshape", "transpose",
                                      "cyclic_shift", "global_avg_pool", "max_along", "rot90")},
    **{op: _case_binary(op) for op in ("add", "mul", "matmul", "concat")},
}


def run_op_check(op: str, seed: int = 0, eps: float = 1e-6) -> list[GradCheckResult]:
    """Finite-difference check of one registered op in float64."""
    from .tensor import precision
    if op not in OP_CASES:
        raise KeyError(f"unknown op {op!r}; choose from {sorted(OP_CASES)}")
    rng = np.random.default_rng(seed)
    with precision("f64-check"):
        loss_fn, inputs = OP_CASES[op](rng)
        res = check_gradients(loss_fn, inputs, eps=eps)
    for r in res:
        r.name = f"{op}.{r.name}"
    return res


def model_spot_check(model, x: np.ndarray, labels: np.ndarray, n_params: int = 5, seed: int = 0,
                     eps: float = 1e-6) -> list[GradCheckResult]:
    """Check ``n_params`` random scalar parameters (one of them a delta entry if any exist).

    The model must already be float64 (``model.astype(np.float64)``); BN runs
    in training mode so every parameter influences the loss smoothly.
    """
    from .tensor import precision, softmax_cross_entropy
    rng = np.random.default_rng(seed)
    named = list(model.named_parameters())
    deltas = [(n, t) for n, t in named if n.endswith("delta")]
    picks = []
    if deltas:
        picks.append(deltas[rng.integers(len(deltas))])
    while len(picks) < n_params:
        n, t = named[rng.integers(len(named))]
        if all(n != p[0] for p in picks):
            picks.append((n, t))
    model.train()
    with precision("f64-check"):
        xt = Tensor(np.asarray(x, dtype=np.float64))

        def loss_fn():
            return softmax_cross_entropy(model(xt), labels)

        for _, t in named:
            t.grad = None
        backward(loss_fn())
        results = []
        for name, t in picks:
            i = int(rng.integers(t.size))
            analytic = t.grad.reshape(-1)[i]
            numeric = numeric_grad(loss_fn, t, eps, [i])[0]
            results.append(GradCheckResult(f"{name}[{i}]", rel_error(np.array([analytic]), np.array([numeric])), 1))
    return results
