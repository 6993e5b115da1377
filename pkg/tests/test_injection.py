import attrs
from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from src.injection import inject, norm_preserve, residual_load
from src.numerics import l2_norm_lastdim
from src.retrieval import retrieve
from src.types import ConfigError, DimensionError, FgtbParams, InjectionMode

from tests.conftest import filled_memory

SHAPE = (1, 2, 3, 4)


def retrieval_fixture(rng, entries: int = 2):
    memory = filled_memory(rng, list(range(entries)), shape=SHAPE)
    k_cur = rng.standard_normal(SHAPE)
    v_cur = rng.standard_normal(SHAPE)
    result = retrieve(k_cur, memory.snapshot(), entries, FgtbParams.for_heads(2))
    return k_cur, v_cur, result


def test_residual_load_adds_context(rng):
    k, v, kc, vc = (rng.standard_normal(SHAPE) for _ in range(4))
    k_fused, v_fused = residual_load(k, v, kc, vc)
    np.testing.assert_array_equal(k_fused, k + kc)
    np.testing.assert_array_equal(v_fused, v + vc)
    with pytest.raises(DimensionError):
        residual_load(k, v, kc[..., :2], vc)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_norm_preserving_injection_restores_token_norms(seed, context_scale):
    rng = np.random.default_rng(seed)
    k_cur, v_cur, result = retrieval_fixture(rng)
    result = attrs.evolve(
        result,
        k_ctx=result.k_ctx * context_scale,
        v_ctx=result.v_ctx * context_scale,
    )
    out = inject(k_cur, v_cur, result, InjectionMode.RESIDUAL_NORM_PRESERVING)
    for fused, original in ((out.k_fused, k_cur), (out.v_fused, v_cur)):
        np.testing.assert_allclose(
            l2_norm_lastdim(fused), l2_norm_lastdim(original), rtol=1e-9
        )
    assert out.attended_length == SHAPE[2]


def test_norm_preserve_near_cancellation(rng):
    epsilon = 1e-6
    original = rng.standard_normal(SHAPE)
    direction = rng.standard_normal(SHAPE)
    direction /= l2_norm_lastdim(direction)
    fused = direction * (1.5 * epsilon)
    rescaled = norm_preserve(fused, original, epsilon)
    np.testing.assert_allclose(
        l2_norm_lastdim(rescaled), l2_norm_lastdim(original), rtol=1e-9
    )
    # the direction of the fused vector is kept
    np.testing.assert_allclose(
        rescaled / l2_norm_lastdim(rescaled), direction, atol=1e-9
    )


def test_norm_preserve_zero_fused_vector_stays_finite(rng):
    original = rng.standard_normal(SHAPE)
    rescaled = norm_preserve(np.zeros(SHAPE), original)
    assert np.all(np.isfinite(rescaled))
    assert np.all(rescaled == 0.0)


def test_norm_preserve_rejects_bad_epsilon_and_shapes(rng):
    x = rng.standard_normal(SHAPE)
    with pytest.raises(ConfigError):
        norm_preserve(x, x, epsilon=0.0)
    with pytest.raises(DimensionError):
        norm_preserve(x, x[..., :2])


def test_plain_residual_injection_does_not_rescale(rng):
    k_cur, v_cur, result = retrieval_fixture(rng)
    out = inject(k_cur, v_cur, result, InjectionMode.RESIDUAL_PLAIN)
    np.testing.assert_array_equal(out.k_fused, k_cur + result.k_ctx)
    np.testing.assert_array_equal(out.v_fused, v_cur + result.v_ctx)


def test_concatenate_appends_history_tokens(rng):
    k_cur, v_cur, result = retrieval_fixture(rng, entries=3)
    out = inject(k_cur, v_cur, result, InjectionMode.CONCATENATE)
    assert out.attended_length == SHAPE[2] + 3 * SHAPE[2]
    np.testing.assert_array_equal(out.k_fused[:, :, : SHAPE[2]], k_cur)
    np.testing.assert_array_equal(out.k_fused[:, :, SHAPE[2] :], result.k_hist)
    np.testing.assert_array_equal(out.v_fused[:, :, SHAPE[2] :], result.v_hist)


@pytest.mark.parametrize("mode", list(InjectionMode))
def test_missing_retrieval_passes_tensors_through(rng, mode):
    k_cur = rng.standard_normal(SHAPE)
    v_cur = rng.standard_normal(SHAPE)
    out = inject(k_cur, v_cur, None, mode)
    np.testing.assert_array_equal(out.k_fused, k_cur)
    np.testing.assert_array_equal(out.v_fused, v_cur)
    assert out.attended_length == SHAPE[2]
