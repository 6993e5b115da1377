"""
Fusion of retrieved context into the current step's KV table.
"""

import logging
import typing

import attrs
import numpy as np

from src.numerics import Tensor, as_tensor4, l2_norm_lastdim
from src.retrieval import RetrievalResult
from src.types import ConfigError, DimensionError, InjectionMode

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = ["InjectionOutput", "residual_load", "norm_preserve", "inject"]


@attrs.define(slots=True, frozen=True)
class InjectionOutput:
    """Keys and values that the layer's attention will consume."""

    k_fused: Tensor = attrs.field(eq=False)
    """Fused keys (B, H, N, d)"""
    v_fused: Tensor = attrs.field(eq=False)
    """Fused values (B, H, N, d)"""
    attended_length: int = attrs.field()
    """Number of key/value tokens N the attention sees"""


def _check_same_shape(**tensors: Tensor) -> None:
    shapes = {name: np.shape(t) for name, t in tensors.items()}
    if len(set(shapes.values())) > 1:
        raise DimensionError(f"Shape mismatch: {shapes}")


def residual_load(
    k_cur: Tensor, v_cur: Tensor, k_ctx: Tensor, v_ctx: Tensor
) -> typing.Tuple[Tensor, Tensor]:
    """Add retrieved context to the current keys and values."""
    _check_same_shape(k_cur=k_cur, v_cur=v_cur, k_ctx=k_ctx, v_ctx=v_ctx)
    return k_cur + k_ctx, v_cur + v_ctx


def norm_preserve(fused: Tensor, original: Tensor, epsilon: float = 1e-6) -> Tensor:
    """
    Rescale each token vector of `fused` to the L2 norm of the matching `original` token.

    The fused norm is clamped from below by `epsilon`, so a zero fused vector
    stays zero instead of dividing by zero.

    :param fused: Fused tensor (B, H, N, d).
    :param original: Pre-injection tensor with the same shape.
    :param epsilon: Positive denominator guard.
    :return: Rescaled tensor.
    """
    if epsilon <= 0:
        raise ConfigError(f"Epsilon must be positive, got {epsilon}")
    _check_same_shape(fused=fused, original=original)
    scale = l2_norm_lastdim(original) / np.maximum(l2_norm_lastdim(fused), epsilon)
    return fused * scale


def inject(
    k_cur: Tensor,
    v_cur: Tensor,
    result: typing.Optional[RetrievalResult],
    mode: InjectionMode = InjectionMode.RESIDUAL_NORM_PRESERVING,
    epsilon: float = 1e-6,
) -> InjectionOutput:
    """
    Fuse a retrieval result into the current keys and values.

    Without a retrieval result the current tensors pass through untouched.
    Residual modes keep shapes and the attended length; concatenation appends
    the history tokens after the current prefix.

    :param k_cur: Current keys (B, H, S, d).
    :param v_cur: Current values (B, H, S, d).
    :param result: Retrieval output, or None when memory was empty.
    :param mode: Fusion mode.
    :param epsilon: Denominator guard for norm preservation.
    :return: Tensors for the layer's attention.
    """
    if epsilon <= 0:
        raise ConfigError(f"Epsilon must be positive, got {epsilon}")
    k_cur = as_tensor4(k_cur, "k_cur")
    v_cur = as_tensor4(v_cur, "v_cur")
    _check_same_shape(k_cur=k_cur, v_cur=v_cur)
    if result is None:
        return InjectionOutput(
            k_fused=k_cur, v_fused=v_cur, attended_length=k_cur.shape[2]
        )

    mode = InjectionMode(mode)
    if mode is InjectionMode.CONCATENATE:
        if result.k_hist.shape[:2] != k_cur.shape[:2] or (
            result.k_hist.shape[3] != k_cur.shape[3]
        ):
            raise DimensionError(
                f"History {result.k_hist.shape} cannot be appended to {k_cur.shape}"
            )
        k_fused = np.concatenate([k_cur, result.k_hist], axis=2)
        v_fused = np.concatenate([v_cur, result.v_hist], axis=2)
        return InjectionOutput(
            k_fused=k_fused, v_fused=v_fused, attended_length=k_fused.shape[2]
        )

    k_fused, v_fused = residual_load(k_cur, v_cur, result.k_ctx, result.v_ctx)
    if mode is InjectionMode.RESIDUAL_NORM_PRESERVING:
        k_fused = norm_preserve(k_fused, k_cur, epsilon)
        v_fused = norm_preserve(v_fused, v_cur, epsilon)
    return InjectionOutput(
        k_fused=k_fused, v_fused=v_fused, attended_length=k_cur.shape[2]
    )
