import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from r2gconv import functional as F
from r2gconv.gradcheck import OP_CASES, check_gradients, run_op_check
from r2gconv.group import strict_affine
from r2gconv.tensor import (NonFiniteError, Tensor, backward, concat, cyclic_shift, max_along, no_grad,
                            precision, silu, softmax_cross_entropy, square, tsum)


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- storage

def test_default_storage_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_f64_check_mode_switches_storage():
    with precision("f64-check"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_unknown_precision_rejected():
    with pytest.raises(ValueError):
        with precision("f16"):
            pass


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_storage_is_an_error(bad):
    with pytest.raises(NonFiniteError):
        Tensor([1.0, bad])


def test_grad_matches_shape():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    backward(tsum(x * x))
    assert x.grad.shape == x.shape


# ---------------------------------------------------------------- conv2d

def test_conv_unit_kernel_scales():
    y = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    assert y.shape == (1, 1, 3, 3)
    assert np.all(y.data == 2)


def test_conv_hand_sum():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    w = Tensor(np.eye(2).reshape(1, 1, 2, 2))
    assert F.conv2d(x, w).data.reshape(-1).tolist() == [5.0]


def test_pointwise_group_reshape_contract():
    ci, co, h = 3, 5, 6
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4 * ci, h, h)))
    w = Tensor(np.random.default_rng(1).standard_normal((4 * co, 4 * ci, 1, 1)))
    y = F.conv2d(x, w).reshape(2, co, 4, h, h)
    assert y.shape == (2, co, 4, h, h)


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 2, 1), (8, 3, 2, 1), (5, 1, 1, 0), (9, 4, 3, 2)])
def test_conv_output_size(h, k, s, p):
    y = F.conv2d(Tensor(np.zeros((1, 2, h, h))), Tensor(np.zeros((3, 2, k, k))), s, p)
    assert y.shape[-1] == (h + 2 * p - k) // s + 1


def test_conv_rejects_bad_groups():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 1, 1))), groups=2)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 1, 1))))


def _np_conv_oracle(x, w, stride, padding, groups):
    n, ci, h, wd = x.shape
    co, cig, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    cog = co // groups
    for o in range(co):
        gi = o // cog
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, gi * cig:(gi + 1) * cig, i * stride:i * stride + k, j * stride:j * stride + k]
                out[:, o, i, j] = (patch * w[o]).sum(axis=(1, 2, 3))
    return out


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]), st.integers(1, 2), st.integers(0, 1))
def test_conv_matches_loop_oracle(seed, groups, stride, padding):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 6, 6))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    with precision("f64-check"):
        y = F.conv2d(Tensor(x), Tensor(w), stride, padding, groups).data
    np.testing.assert_allclose(y, _np_conv_oracle(x, w, stride, padding, groups), rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((2, 2, 5, 5))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    lhs = F.conv2d(Tensor(a * x + b * y), w, 1, 1).data.astype(np.float64)
    rhs = a * F.conv2d(Tensor(x), w, 1, 1).data + b * F.conv2d(Tensor(y), w, 1, 1).data
    scale = max(np.abs(lhs).max(), 1.0)
    assert np.abs(lhs - rhs).max() <= 1e-5 * scale


# ---------------------------------------------------------------- transposed conv

def test_transposed_stride2_scatter():
    y = F.conv2d_transposed(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)),
                            Tensor(np.ones((1, 1, 1, 1))), stride=2)
    assert y.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(y.data[0, 0], [[1, 0, 2], [0, 0, 0], [3, 0, 4]])


def test_transposed_unit_weight_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 4)).astype(np.float32)
    w = np.zeros((2, 2, 1, 1), dtype=np.float32)
    w[0, 0] = w[1, 1] = 1
    np.testing.assert_array_equal(F.conv2d_transposed(Tensor(x), Tensor(w)).data, x)


@given(st.integers(0, 10_000), st.sampled_from([1, 2]), st.integers(1, 3), st.integers(0, 1))
def test_adjoint_identity(seed, groups, stride, padding):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((6, 4 // groups, 3, 3))
    cx = F.conv2d(Tensor(x), Tensor(w), stride, padding, groups)
    y = rng.standard_normal(cx.shape)
    back = F.conv2d_transposed(Tensor(y), Tensor(w), stride, padding, groups)
    # the transposed output can be smaller than x when the stride skips trailing rows
    h = back.shape[-1]
    lhs = float(np.sum(cx.data.astype(np.float64) * y))
    rhs = float(np.sum(x[..., :h, :h] * back.data))
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


# ---------------------------------------------------------------- affine grid / sampling

def test_identity_affine_grid():
    theta = Tensor(np.array([[[1.0, 0, 0], [0, 1.0, 0]]]))
    g = F.affine_grid(theta, (1, 1, 3, 3)).data[0]
    np.testing.assert_array_equal(g[..., 0], np.tile([-1, 0, 1], (3, 1)))
    np.testing.assert_array_equal(g[..., 1], np.tile([[-1], [0], [1]], (1, 3)))


def test_quarter_turn_grid_stays_on_lattice():
    theta = Tensor(np.concatenate([strict_affine(1), np.zeros((2, 1))], 1)[None])
    g = F.affine_grid(theta, (1, 1, 3, 3)).data
    assert set(np.unique(g)) <= {-1.0, 0.0, 1.0}
    base = F.affine_grid(Tensor(np.array([[[1.0, 0, 0], [0, 1.0, 0]]])), (1, 1, 3, 3)).data
    # (x, y) -> (-y, x)
    np.testing.assert_array_equal(g[..., 0], -base[..., 1])
    np.testing.assert_array_equal(g[..., 1], base[..., 0])


def test_perturbed_grid_matches_matrix_product():
    m = np.eye(2) + 0.1
    theta = np.concatenate([m, np.zeros((2, 1))], 1)[None]
    with precision("f64-check"):
        g = F.affine_grid(Tensor(theta), (1, 1, 4, 5)).data[0]
    xs, ys = np.linspace(-1, 1, 5), np.linspace(-1, 1, 4)
    for r, yv in enumerate(ys):
        for c, xv in enumerate(xs):
            np.testing.assert_allclose(g[r, c], m @ [xv, yv], rtol=0, atol=1e-15)


def test_identity_sampling_is_exact():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 4)).astype(np.float32)
    theta = Tensor(np.tile(np.array([[1.0, 0, 0], [0, 1.0, 0]]), (2, 1, 1)))
    y = F.grid_sample(Tensor(x), F.affine_grid(theta, x.shape))
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("mode", ["f32", "f64-check"])
@pytest.mark.parametrize("size", [2, 3, 4, 5, 8, 11])
@pytest.mark.parametrize("i", [1, 2, 3])
def test_quarter_turn_sampling_equals_array_rotation(mode, size, i):
    with precision(mode):
        x = Tensor(np.random.default_rng(size).standard_normal((1, 2, size, size)))
        theta = Tensor(np.concatenate([strict_affine(i), np.zeros((2, 1))], 1)[None])
        y = F.grid_sample(x, F.affine_grid(theta, x.shape)).data
    np.testing.assert_array_equal(y, np.rot90(x.data, i, axes=(-2, -1)))


def test_out_of_range_sample_reads_zero():
    x = Tensor(np.ones((1, 1, 3, 3)))
    grid = Tensor(np.full((1, 1, 1, 2), 2.0))
    assert F.grid_sample(x, grid).data.item() == 0.0


def test_grid_sample_rejects_non_finite_grid():
    with pytest.raises((ValueError, NonFiniteError)):
        F.grid_sample(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 2), np.inf)))


# ---------------------------------------------------------------- elementwise suite

def test_silu_zero():
    assert silu(Tensor([0.0])).data.item() == 0.0


def test_cyclic_shift_rotates_indices():
    out = cyclic_shift(Tensor(np.array([1.0, 2.0, 3.0, 4.0])), 0, 1).data
    assert out.tolist() == [4.0, 1.0, 2.0, 3.0]


def test_cyclic_shift_axis_out_of_range():
    with pytest.raises(IndexError):
        cyclic_shift(Tensor(np.zeros(4)), 3, 1)


def test_cross_entropy_uniform_logits():
    for label in range(10):
        loss = softmax_cross_entropy(Tensor(np.zeros((1, 10))), [label]).data.item()
        assert loss == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((1, 10))), [10])


def test_max_pool_ties_go_to_lowest_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(tsum(F.max_pool2d(x, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_max_along_ties_go_to_lowest_index():
    x = Tensor(np.ones((2, 4)), requires_grad=True)
    backward(tsum(max_along(x, 1)))
    np.testing.assert_array_equal(x.grad, [[1, 0, 0, 0], [1, 0, 0, 0]])


def test_global_avg_pool_and_concat_shapes():
    a, b = Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones((2, 1, 4, 4)))
    assert concat([a, b], axis=1).shape == (2, 4, 4, 4)
    from r2gconv.tensor import global_avg_pool
    assert global_avg_pool(a).shape == (2, 3)


# ---------------------------------------------------------------- batch norm

def test_batch_norm_constant_channel_gives_beta():
    x = Tensor(np.full((2, 3, 4, 2, 2), 5.0))
    beta = Tensor(np.array([0.5, -1.0, 2.0]))
    y = F.batch_norm(x, Tensor(np.ones(3)), beta, None, None, True).data
    np.testing.assert_allclose(y, np.broadcast_to(beta.data.reshape(1, 3, 1, 1, 1), y.shape), atol=1e-6)


def test_batch_norm_moments():
    x = np.random.default_rng(0).standard_normal((4, 3, 4, 5, 5)) * 3 + 2
    with precision("f64-check"):
        y = F.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), None, None, True).data
    axes = (0, 2, 3, 4)
    np.testing.assert_allclose(y.mean(axis=axes), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=axes), 1, atol=1e-4)


def test_batch_norm_affine_params_are_per_channel():
    with pytest.raises(ValueError):
        F.batch_norm(Tensor(np.zeros((1, 2, 4, 3, 3))), Tensor(np.ones(8)), Tensor(np.zeros(8)), None, None, True)


def test_batch_norm_eval_without_stats_errors():
    with pytest.raises(RuntimeError):
        F.batch_norm(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, None, False)


def test_gcba_has_64_norm_params():
    from r2gconv.layers import GCBA
    layer = GCBA(16, 32, 3, 2, mode="relaxed")
    assert layer.bn.gamma.size + layer.bn.beta.size == 64


# ---------------------------------------------------------------- backward

def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(tsum(x))
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, [2, 2, 2])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = tsum(x * x)
    assert y.node is None


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    backward(tsum(y + y))
    assert x.grad.item() == pytest.approx(12.0)


def test_conv_square_loss_matches_finite_differences():
    rng = np.random.default_rng(0)
    with precision("f64-check"):
        x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        res = check_gradients(lambda: tsum(square(F.conv2d(x, w, 1, 1))) * 0.5, [x, w])
    assert all(r.rel_error <= 1e-6 for r in res)


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_every_op_passes_gradient_check(op):
    for seed in range(2):
        for r in run_op_check(op, seed):
            assert r.rel_error <= 1e-5, r


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        return F.max_pool2d(silu(F.conv2d(x, w, 2, 1)), 3, 1, 1).data
    assert np.array_equal(run(), run())
