"""Multi-scale branches, dual pooling and the token sequence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sit.errors import ShapeMismatch
from sit.gradcheck import grad_check
from sit.pyramid import ScalePyramid, branch_forward, build_scale_sequence, pool_and_concat
from sit.rng import StreamFactory


def random_branches(c_in, seed=0):
    g = np.random.default_rng(seed)
    return [(g.standard_normal((k, k, c_in, 64)) * 0.2, g.standard_normal(64) * 0.1) for k in (1, 3, 5)]


def test_branch_zero_input_zero_bias():
    k, _ = random_branches(8)[1]
    assert not branch_forward(np.zeros((7, 7, 8)), k, np.zeros(64)).any()


def test_branch_identity_kernel_on_nonnegative_map():
    f = np.random.default_rng(0).random((7, 7, 64))
    out = branch_forward(f, np.eye(64).reshape(1, 1, 64, 64), np.zeros(64))
    np.testing.assert_array_equal(out, f)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_branch_preserves_spatial_extent(k):
    kernel = np.ones((k, k, 8, 64))
    out = branch_forward(np.random.default_rng(0).standard_normal((7, 7, 8)), kernel, np.zeros(64))
    assert out.shape == (7, 7, 64)
    assert out.min() >= 0.0


def test_branch_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        branch_forward(np.ones((7, 7, 8)), np.ones((3, 3, 9, 64)), np.zeros(64))


def test_pool_constant_map():
    np.testing.assert_array_equal(pool_and_concat(np.full((7, 7, 64), 2.5)), np.full(128, 2.5))


def test_pool_mean_versus_max():
    f = np.zeros((2, 2, 64))
    f[1, 1] = 4.0
    v = pool_and_concat(f)
    assert v.shape == (128,)
    np.testing.assert_array_equal(v[:64], 1.0)
    np.testing.assert_array_equal(v[64:], 4.0)


def test_sequence_of_zero_map_is_zero():
    s = build_scale_sequence(np.zeros((7, 7, 8)), [(k, np.zeros(64)) for k, _ in random_branches(8)])
    assert s.shape == (3, 128) and not s.any()


def test_sequence_shape():
    s = build_scale_sequence(np.random.default_rng(0).standard_normal((7, 7, 8)), random_branches(8))
    assert s.shape == (3, 128)


def test_sequence_requires_three_ordered_branches():
    br = random_branches(8)
    with pytest.raises(ShapeMismatch):
        build_scale_sequence(np.ones((7, 7, 8)), br[:2])
    with pytest.raises(ShapeMismatch):
        build_scale_sequence(np.ones((7, 7, 8)), br[::-1])


def test_perturbing_k5_only_changes_last_row():
    f = np.random.default_rng(1).standard_normal((7, 7, 8))
    br = random_branches(8)
    before = build_scale_sequence(f, br)
    br[2] = (br[2][0] + 0.3, br[2][1])
    after = build_scale_sequence(f, br)
    np.testing.assert_array_equal(before[:2], after[:2])
    assert not np.array_equal(before[2], after[2])


def test_layer_matches_functional_form():
    p = ScalePyramid(8, StreamFactory(0))
    f = np.random.default_rng(2).standard_normal((7, 7, 8))
    branches = [(b.conv.params["kernel"], b.conv.params["bias"]) for b in p.branches]
    np.testing.assert_array_equal(p(f), build_scale_sequence(f, branches))


def test_parameter_shapes():
    shapes = {k: v.shape for k, v in ScalePyramid(1280, StreamFactory(0)).parameters().items()}
    assert shapes == {"branch1.conv.kernel": (1, 1, 1280, 64), "branch1.conv.bias": (64,),
                      "branch3.conv.kernel": (3, 3, 1280, 64), "branch3.conv.bias": (64,),
                      "branch5.conv.kernel": (5, 5, 1280, 64), "branch5.conv.bias": (64,)}


def test_without_gmp_width_is_64():
    p = ScalePyramid(8, StreamFactory(0), use_gmp=False)
    f = np.random.default_rng(3).standard_normal((7, 7, 8))
    s = p(f)
    assert s.shape == (3, 64)
    np.testing.assert_array_equal(s, ScalePyramid(8, StreamFactory(0))(f)[:, :64])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gmp_dominates_gap(seed):
    s = ScalePyramid(4, StreamFactory(seed))(np.random.default_rng(seed).standard_normal((7, 7, 4)))
    assert np.all(s[:, 64:] >= s[:, :64])


@pytest.mark.parametrize("seed", range(3))
def test_branch_independence_of_gradients(seed):
    p = ScalePyramid(4, StreamFactory(seed))
    f = np.random.default_rng(seed).standard_normal((7, 7, 4))
    for row in range(3):
        p.zero_grad()
        p(f)
        dy = np.zeros((3, 128))
        dy[row] = 1.0
        p.backward(dy)
        for j, branch in enumerate(p.branches):
            touched = any(g.any() for g in branch.gradients().values())
            assert touched == (j == row)


@pytest.mark.parametrize("seed", range(5))
def test_pyramid_gradient_check(seed):
    p = ScalePyramid(4, StreamFactory(seed))
    rep = grad_check(p, np.random.default_rng(seed).standard_normal((7, 7, 4)), max_entries=40, seed=seed)
    assert rep.passed, rep.errors


def test_batched_forward_matches_per_sample():
    p = ScalePyramid(4, StreamFactory(0))
    x = np.random.default_rng(4).standard_normal((3, 7, 7, 4))
    batched = p(x)
    for n in range(3):
        np.testing.assert_allclose(batched[n], p(x[n]), rtol=1e-13, atol=1e-13)
