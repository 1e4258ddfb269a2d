import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from r2gconv.group import (C4, PerturbationDelta, act_on_coords, act_on_group_feature, act_on_input, compose,
                           inverse, relaxed_affine, strict_affine)
from r2gconv.tensor import Tensor

elements = st.sampled_from(C4)


def test_group_table_exhaustive():
    for i, j in itertools.product(C4, C4):
        assert compose(i, j) in C4
        assert compose(i, j) == (i + j) % 4
    for i in C4:
        assert compose(i, 0) == compose(0, i) == i
        assert compose(i, inverse(i)) == 0
    for i, j, k in itertools.product(C4, C4, C4):
        assert compose(compose(i, j), k) == compose(i, compose(j, k))


@pytest.mark.parametrize("bad", [-1, 4, 1.5, "1"])
def test_element_out_of_range_rejected(bad):
    with pytest.raises(ValueError):
        compose(bad, 0)


@pytest.mark.parametrize("i,expected", [
    (0, [[1, 0], [0, 1]]),
    (1, [[0, -1], [1, 0]]),
    (2, [[-1, 0], [0, -1]]),
    (3, [[0, 1], [-1, 0]]),
])
def test_strict_matrices(i, expected):
    np.testing.assert_array_equal(strict_affine(i), expected)


def test_strict_matrices_match_trig_after_rounding():
    for i in C4:
        a = np.pi * i / 2
        trig = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        np.testing.assert_array_equal(strict_affine(i), np.rint(trig))
        assert np.linalg.det(strict_affine(i)) == 1.0


def test_strict_homomorphism_exact():
    for i, j in itertools.product(C4, C4):
        np.testing.assert_array_equal(strict_affine(i) @ strict_affine(j), strict_affine(compose(i, j)))


def test_relaxed_affine_examples():
    d = np.zeros((4, 2, 2))
    d[0] = 0.1
    np.testing.assert_allclose(relaxed_affine(0, d), [[1.1, 0.1], [0.1, 1.1]])
    a, b, c, e = 0.3, -0.2, 0.05, 0.7
    d[1] = [[a, b], [c, e]]
    np.testing.assert_allclose(relaxed_affine(1, d), [[a, -1 + b], [1 + c, e]])
    for i in C4:
        np.testing.assert_array_equal(relaxed_affine(i, np.zeros((4, 2, 2))), strict_affine(i))


def test_relaxed_affine_tensor_path_is_differentiable():
    from r2gconv.tensor import backward, tsum
    d = Tensor(np.zeros((4, 2, 2)), requires_grad=True)
    backward(tsum(relaxed_affine(2, d)))
    expected = np.zeros((4, 2, 2))
    expected[2] = 1
    np.testing.assert_array_equal(d.grad, expected)


@given(st.integers(0, 10_000), elements)
def test_relaxed_minus_strict_is_delta(seed, i):
    d = np.random.default_rng(seed).standard_normal((4, 2, 2))
    np.testing.assert_array_equal(relaxed_affine(i, d), strict_affine(i) + d[i])
    np.testing.assert_allclose(relaxed_affine(i, d) - strict_affine(i), d[i], rtol=0, atol=1e-15)


def test_act_on_coords_examples():
    pts = np.array([[1.0, 0.0], [0.3, -2.0]])
    np.testing.assert_array_equal(act_on_coords(np.eye(2), pts), pts)
    np.testing.assert_array_equal(act_on_coords(strict_affine(1), [1, 0]), [[0, 1]])
    d = np.zeros((4, 2, 2))
    d[0] = 0.1
    np.testing.assert_allclose(act_on_coords(relaxed_affine(0, d), [1, 1]), [[1.2, 1.2]])


def test_perturbation_init_statistics():
    rng = np.random.default_rng(0)
    sigma = 0.1
    draws = np.stack([PerturbationDelta.init(sigma, rng).value.data for _ in range(10_000 // 16 + 1)])
    std = float(np.std(draws.astype(np.float64)))
    assert abs(std - sigma) <= 0.2 * sigma
    assert PerturbationDelta.init(sigma, rng).value.shape == (4, 2, 2)


def test_perturbation_rejects_negative_sigma():
    with pytest.raises(ValueError):
        PerturbationDelta.init(-0.1, np.random.default_rng(0))


def test_perturbation_matrices_and_zeros():
    z = PerturbationDelta.zeros()
    assert not z.value.requires_grad
    np.testing.assert_array_equal(z.matrices(), np.stack([strict_affine(i) for i in C4]))


def test_act_on_input_half_turn():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(act_on_input(2, x), [[4, 3], [2, 1]])
    np.testing.assert_array_equal(act_on_input(0, x), x)


def test_act_on_input_rejects_non_square():
    with pytest.raises(ValueError):
        act_on_input(1, np.zeros((1, 1, 3, 4)))
    with pytest.raises(ValueError):
        act_on_group_feature(1, np.zeros((1, 1, 4, 3, 4)))


def test_group_feature_rejects_wrong_group_extent():
    with pytest.raises(ValueError):
        act_on_group_feature(1, np.zeros((1, 1, 3, 4, 4)))


def test_group_feature_generator_oracle():
    f = np.random.default_rng(0).standard_normal((1, 2, 4, 5, 5))
    out = act_on_group_feature(1, f)
    s = [f[:, :, j] for j in range(4)]
    for j, src in enumerate([s[3], s[0], s[1], s[2]]):
        np.testing.assert_array_equal(out[:, :, j], np.rot90(src, 1, axes=(-2, -1)))


@given(st.integers(0, 10_000), elements, elements)
def test_action_laws(seed, g1, g2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6))
    f = rng.standard_normal((2, 3, 4, 5, 5))
    np.testing.assert_array_equal(act_on_input(g1, act_on_input(g2, x)), act_on_input(compose(g1, g2), x))
    np.testing.assert_array_equal(act_on_group_feature(g1, act_on_group_feature(g2, f)),
                                  act_on_group_feature(compose(g1, g2), f))
    np.testing.assert_array_equal(act_on_group_feature(inverse(g1), act_on_group_feature(g1, f)), f)
    # a pure permutation: same multiset of entries, hence the same norm up to summation order
    np.testing.assert_array_equal(np.sort(act_on_input(g1, x), axis=None), np.sort(x, axis=None))
    np.testing.assert_array_equal(np.sort(act_on_group_feature(g1, f), axis=None), np.sort(f, axis=None))
    assert np.linalg.norm(act_on_group_feature(g1, f)) == pytest.approx(np.linalg.norm(f), rel=1e-15)


def test_actions_agree_between_numpy_and_tensor():
    f = np.random.default_rng(3).standard_normal((1, 2, 4, 5, 5))
    for g in C4:
        np.testing.assert_array_equal(act_on_group_feature(g, Tensor(f, dtype=np.float64)).data,
                                      act_on_group_feature(g, f))
        np.testing.assert_array_equal(act_on_input(g, Tensor(f[:, :, 0], dtype=np.float64)).data,
                                      act_on_input(g, f[:, :, 0]))
