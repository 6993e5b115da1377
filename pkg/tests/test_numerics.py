import math

from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as ex_np
import numpy as np
import pytest

from src.numerics import (
    as_tensor4,
    l2_norm_lastdim,
    matmul_qk,
    rope_apply,
    scaled_scores,
    softmax_rows,
)
from src.types import ConfigError, DimensionError, MaskingError, RopeParams

finite_logits = ex_np.arrays(
    dtype=np.float64,
    shape=ex_np.array_shapes(min_dims=4, max_dims=4, min_side=1, max_side=4),
    elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False),
)


def test_matmul_qk_matches_einsum(rng):
    a = rng.standard_normal((2, 3, 4, 5))
    b = rng.standard_normal((2, 3, 6, 5))
    expected = np.einsum("bhik,bhjk->bhij", a, b)
    np.testing.assert_allclose(matmul_qk(a, b), expected, rtol=0, atol=1e-12)


def test_matmul_qk_rejects_mismatched_head_dim(rng):
    with pytest.raises(DimensionError):
        matmul_qk(rng.standard_normal((1, 2, 3, 4)), rng.standard_normal((1, 2, 3, 5)))


def test_as_tensor4_rejects_wrong_rank_and_empty_axes():
    with pytest.raises(DimensionError):
        as_tensor4(np.zeros((2, 3, 4)))
    with pytest.raises(DimensionError):
        as_tensor4(np.zeros((1, 0, 3, 4)))


@given(finite_logits)
def test_softmax_rows_are_distributions(logits):
    probs = softmax_rows(logits)
    assert probs.shape == logits.shape
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


@given(finite_logits, st.floats(-100, 100))
def test_softmax_rows_shift_invariant(logits, shift):
    np.testing.assert_allclose(
        softmax_rows(logits + shift), softmax_rows(logits), atol=1e-12
    )


def test_softmax_rows_large_logits_do_not_overflow():
    probs = softmax_rows(np.array([[[[1000.0, 1000.0, -1000.0]]]]))
    np.testing.assert_allclose(probs, [[[[0.5, 0.5, 0.0]]]], atol=1e-12)


def test_softmax_rows_masked_entries_get_zero_weight():
    logits = np.array([[[[1.0, -np.inf, 2.0]]]])
    probs = softmax_rows(logits)
    assert probs[0, 0, 0, 1] == 0.0
    assert math.isclose(probs.sum(), 1.0)


def test_softmax_rows_fully_masked_row_raises():
    logits = np.array([[[[0.0, 1.0], [-np.inf, -np.inf]]]])
    with pytest.raises(MaskingError):
        softmax_rows(logits)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_softmax_rows_rejects_nan_and_positive_infinity(bad):
    with pytest.raises(ValueError):
        softmax_rows(np.array([[[[0.0, bad]]]]))


def test_l2_norm_lastdim_keeps_trailing_axis():
    x = np.array([[[[3.0, 4.0], [0.0, 0.0]]]])
    norms = l2_norm_lastdim(x)
    assert norms.shape == (1, 1, 2, 1)
    np.testing.assert_array_equal(norms[..., 0], [[[5.0, 0.0]]])


@settings(max_examples=50)
@given(
    st.integers(0, 2**32 - 1),
    st.lists(st.integers(0, 4096), min_size=1, max_size=6),
)
def test_rope_apply_preserves_per_token_norms(seed, positions):
    x = np.random.default_rng(seed).standard_normal((1, 2, len(positions), 8))
    rotated = rope_apply(x, positions, RopeParams(8))
    np.testing.assert_allclose(l2_norm_lastdim(rotated), l2_norm_lastdim(x), rtol=1e-12)


def test_rope_apply_position_zero_is_identity(rng):
    x = rng.standard_normal((1, 1, 3, 4))
    np.testing.assert_allclose(rope_apply(x, [0, 0, 0], RopeParams(4)), x, atol=0)


def test_rope_scores_depend_only_on_relative_position(rng):
    q = rng.standard_normal((1, 1, 1, 8))
    k = rng.standard_normal((1, 1, 1, 8))
    params = RopeParams(8)

    def score(m: int, n: int) -> float:
        return scaled_scores(rope_apply(q, [m], params), rope_apply(k, [n], params)).item()

    assert score(5, 2) == pytest.approx(score(13, 10), abs=1e-12)
    assert score(5, 2) == pytest.approx(score(3, 0), abs=1e-12)


def test_rope_apply_interleaved_pair_rotation():
    x = np.array([[[[1.0, 0.0, 1.0, 0.0]]]])
    out = rope_apply(x, [1], RopeParams(4, base_frequency=10_000.0))
    expected_angles = [1.0, 10_000.0 ** (-0.5)]
    np.testing.assert_allclose(
        out[0, 0, 0],
        [
            math.cos(expected_angles[0]),
            math.sin(expected_angles[0]),
            math.cos(expected_angles[1]),
            math.sin(expected_angles[1]),
        ],
        atol=1e-15,
    )


def test_rope_apply_validates_inputs(rng):
    with pytest.raises(ConfigError):
        rope_apply(rng.standard_normal((1, 1, 2, 3)), [0, 1], RopeParams(4))
    with pytest.raises(DimensionError):
        rope_apply(rng.standard_normal((1, 1, 2, 4)), [0], RopeParams(4))
    with pytest.raises(ConfigError):
        rope_apply(rng.standard_normal((1, 1, 1, 4)), [-1], RopeParams(4))
    with pytest.raises(ConfigError):
        RopeParams(5)
