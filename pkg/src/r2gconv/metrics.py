"""Empirical equivariance error, Lipschitz probing and the two bound checks.

Every quantity is a maximum over a finite, seeded probe set, so it is a lower
bound on the corresponding supremum. Each probe runs as its own batch of one,
which makes results independent of probe order and batch grouping.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .group import C4, act_on_group_feature, act_on_input
from .models import calibrate_bn
from .tensor import Tensor, no_grad

Action = Callable[[int, np.ndarray], np.ndarray]
Phi = Callable[[Tensor], Tensor]


def rotate_action(g: int, y: np.ndarray) -> np.ndarray:
    return act_on_input(g, y)


def group_action(g: int, y: np.ndarray) -> np.ndarray:
    return act_on_group_feature(g, y)


def identity_action(g: int, y: np.ndarray) -> np.ndarray:
    return y


def action_for(y) -> Action:
    """Pick the output action from the rank: group map, planar map or flat vector."""
    nd = len(y.shape)
    if nd == 5:
        return group_action
    if nd == 4:
        return rotate_action
    return identity_action


@dataclass
class ProbeSet:
    inputs: np.ndarray  # (n, c, h, w) float64
    seed: int
    group: tuple = C4

    def __post_init__(self):
        if self.inputs.ndim != 4 or len(self.inputs) == 0:
            raise ValueError(f"probe inputs must be a non-empty (n, c, h, w) array, got {self.inputs.shape}")
        if self.inputs.shape[-1] != self.inputs.shape[-2]:
            raise ValueError("probes must be square")

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def make(cls, shape=(1, 28, 28), natural: np.ndarray | None = None, n_natural: int = 8,
             n_gaussian: int = 8, seed: int = 0) -> "ProbeSet":
        """``n_natural`` rows drawn from ``natural`` plus ``n_gaussian`` unit-Gaussian inputs."""
        rng = np.random.default_rng(seed)
        parts = []
        if natural is not None and n_natural:
            natural = np.asarray(natural, dtype=np.float64)
            idx = rng.choice(len(natural), size=min(n_natural, len(natural)), replace=False)
            parts.append(natural[np.sort(idx)].reshape(-1, *shape))
        if n_gaussian:
            parts.append(rng.standard_normal((n_gaussian, *shape)))
        return cls(np.concatenate(parts, axis=0), seed)

    def permuted(self, seed: int) -> "ProbeSet":
        order = np.random.default_rng(seed).permutation(len(self))
        return ProbeSet(self.inputs[order], self.seed, self.group)


@dataclass
class BoundCheck:
    name: str
    holds: bool
    slack: float


@dataclass
class EquivarianceReport:
    name: str
    ee: float
    epsilon: float
    lipschitz_k: float
    sup_distance_c: float
    bound_checks: list = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"summary name={self.name} ee={self.ee:.6e} epsilon={self.epsilon:.6e} "
               f"k_hat={self.lipschitz_k:.6e} c_hat={self.sup_distance_c:.6e}"]
        for b in self.bound_checks:
            out.append(f"bound name={b.name} holds={str(b.holds).lower()} slack={b.slack:.6e}")
        return out


def _run(phi: Phi, x: np.ndarray) -> np.ndarray:
    with no_grad():
        y = phi(Tensor(x[None]))
    return np.asarray(y.data, dtype=np.float64)[0]


def _batched(action: Action, g: int, a: np.ndarray) -> np.ndarray:
    # actions act on batched layouts; add and strip a batch axis
    return action(g, a[None])[0]


@dataclass
class ErrorRecord:
    probe: int
    g: int
    error: float
    norm: float


def equivariance_records(phi: Phi, probes: ProbeSet, output_action: Action | None = None,
                         input_action: Action = rotate_action) -> list[ErrorRecord]:
    out = []
    for n, x in enumerate(probes.inputs):
        y = _run(phi, x)
        act = output_action or action_for(y[None])
        for g in probes.group:
            lhs = _batched(act, g, y)
            rhs = _run(phi, _batched(input_action, g, x))
            if lhs.shape != rhs.shape:
                raise ValueError(f"shape mismatch: acted output {lhs.shape} vs output of acted input {rhs.shape}")
            out.append(ErrorRecord(n, g, float(np.linalg.norm(lhs - rhs)), float(np.linalg.norm(y))))
    return out


def equivariance_error(phi: Phi, probes: ProbeSet, output_action: Action | None = None,
                       input_action: Action = rotate_action) -> float:
    """max over probes x and g of ||rho_Y(g) phi(x) - phi(rho_X(g) x)||_2."""
    return max(r.error for r in equivariance_records(phi, probes, output_action, input_action))


def _ratio_max(outs: Sequence[np.ndarray], ins: Sequence[np.ndarray], pairs) -> float:
    best, seen = 0.0, 0
    for i, j in pairs:
        dx = float(np.linalg.norm(ins[i] - ins[j]))
        if dx < 1e-8:
            continue
        seen += 1
        best = max(best, float(np.linalg.norm(outs[i] - outs[j])) / dx)
    if not seen:
        raise ValueError("every probe pair is degenerate (||x - y|| < 1e-8)")
    return best


def lipschitz_probe(phi: Phi, probes: ProbeSet, num_pairs: int | None = None, seed: int = 0) -> float:
    """max ||phi(x) - phi(y)|| / ||x - y|| over sampled probe pairs."""
    if len(probes) < 2:
        raise ValueError("need at least two probes")
    pairs = list(combinations(range(len(probes)), 2))
    if num_pairs is not None and num_pairs < len(pairs):
        pick = np.random.default_rng(seed).choice(len(pairs), num_pairs, replace=False)
        pairs = [pairs[i] for i in np.sort(pick)]
    outs = [_run(phi, x) for x in probes.inputs]
    return _ratio_max(outs, list(probes.inputs), pairs)


def _orbit(phi: Phi, probes: ProbeSet, input_action: Action):
    """Inputs x and g.x for every probe and g, with their outputs; index (n, g) -> n*4 + g."""
    ins, outs = [], []
    for x in probes.inputs:
        for g in probes.group:
            gx = _batched(input_action, g, x)
            ins.append(gx)
            outs.append(_run(phi, gx))
    return ins, outs


def prop1_check(phi: Phi, probes: ProbeSet, output_action: Action | None = None,
                input_action: Action = rotate_action, tol: float = 1e-6) -> tuple[BoundCheck, float, float]:
    """Check ||rho_Y(g) phi(x) - phi(x)|| <= k ||rho_X(g) x - x|| + EE on every probe and g.

    k is the empirical Lipschitz estimate over all pairs of the probe set and
    its orbit (so it includes every (x, g.x) pair) and EE the empirical
    equivariance error on the same set. Returns (check, k, EE).
    """
    ins, outs = _orbit(phi, probes, input_action)
    ng = len(probes.group)
    k_hat = _ratio_max(outs, ins, combinations(range(len(ins)), 2))
    act = output_action or action_for(outs[0][None])
    ee = 0.0
    for n in range(len(probes)):
        y = outs[n * ng]
        for gi, g in enumerate(probes.group):
            ee = max(ee, float(np.linalg.norm(_batched(act, g, y) - outs[n * ng + gi])))
    slack = np.inf
    for n in range(len(probes)):
        x, y = ins[n * ng], outs[n * ng]
        for g in probes.group:
            lhs = float(np.linalg.norm(_batched(act, g, y) - y))
            rhs = k_hat * float(np.linalg.norm(_batched(input_action, g, x) - x)) + ee
            slack = min(slack, rhs - lhs)
    return BoundCheck("prop1", bool(slack >= -tol), float(slack)), k_hat, ee


def prop2_check(phi_a: Phi, phi_b: Phi, probes: ProbeSet, output_action: Action | None = None,
                input_action: Action = rotate_action, tol: float = 1e-6) -> tuple[BoundCheck, float]:
    """Check |EE(A) - EE(B)| <= 2c + EE(A), with c = max ||phi_A - phi_B|| over probes and their orbit.

    Returns (check, c).
    """
    ins_a, outs_a = _orbit(phi_a, probes, input_action)
    _, outs_b = _orbit(phi_b, probes, input_action)
    if outs_a[0].shape != outs_b[0].shape:
        raise ValueError(f"output shapes differ: {outs_a[0].shape} vs {outs_b[0].shape}")
    c_hat = max(float(np.linalg.norm(a - b)) for a, b in zip(outs_a, outs_b))
    ee_a = equivariance_error(phi_a, probes, output_action, input_action)
    ee_b = equivariance_error(phi_b, probes, output_action, input_action)
    slack = 2 * c_hat + ee_a - abs(ee_a - ee_b)
    return BoundCheck("prop2", bool(slack >= -tol), float(slack)), c_hat


def audit(name: str, phi: Phi, probes: ProbeSet, reference: Phi | None = None, epsilon: float = 0.0,
          output_action: Action | None = None) -> EquivarianceReport:
    """EE, k, c and both bound checks for one model (prop2 against ``reference``, default itself)."""
    p1, k_hat, ee = prop1_check(phi, probes, output_action)
    p2, c_hat = prop2_check(phi, reference or phi, probes, output_action)
    return EquivarianceReport(name, ee, epsilon, k_hat, c_hat, [p1, p2])


def stage_fn(model, stage: str) -> Phi:
    """A callable returning one named stage output of ``model.trace``."""
    def phi(x: Tensor) -> Tensor:
        for name, y in model.trace(x):
            if name == stage:
                return y
        raise KeyError(f"no stage named {stage!r}")
    return phi


@contextlib.contextmanager
def scaled_delta(model, t: float):
    """Multiply every delta of ``model`` by ``t`` inside the block, restoring it afterwards."""
    saved = [(d, d.data.copy()) for _, d in model.deltas()]
    try:
        for d, v in saved:
            d.data = (v * t).astype(v.dtype)
        yield model
    finally:
        for d, v in saved:
            d.data = v


def orbit_spread(model, images: np.ndarray, batch_size: int = 256) -> float:
    """max over images x and g of ||logits(g.x) - logits(x)||_inf.

    Zero means the model assigns one logit vector to every quarter-turn pose
    of an image, so it cannot tell those poses apart.
    """
    images = np.asarray(images)
    model.eval()
    worst = 0.0
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            ref = np.asarray(model(Tensor(x)).data, dtype=np.float64)
            for g in C4[1:]:
                y = np.asarray(model(Tensor(act_on_input(g, x))).data, dtype=np.float64)
                worst = max(worst, float(np.max(np.abs(y - ref))))
    return worst


def delta_scale_sweep(model, probes: ProbeSet, scales=(0.0, 0.25, 0.5, 1.0), calib: np.ndarray | None = None,
                      output_action: Action | None = None) -> list[float]:
    """Empirical EE with every delta multiplied by each scale in turn.

    With ``calib`` the batch-norm running statistics are refilled from that
    fixed batch at every scale, so each point is the model a user would get
    by training at that perturbation level, not one normalized for another.
    """
    out = []
    for t in scales:
        with scaled_delta(model, t):
            if calib is not None:
                calibrate_bn(model, Tensor(calib))
            out.append(equivariance_error(model, probes, output_action))
    if calib is not None:
        calibrate_bn(model, Tensor(calib))
    return out
