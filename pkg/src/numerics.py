"""
Dense tensor primitives shared by retrieval, injection and the backbone.

All tensors are float64 `numpy` arrays laid out as (batch, heads, tokens, head_dim).
"""

import logging
import math
import threading
import typing

from cachetools import LRUCache, cached
import numpy as np
import numpy.typing as npt
from scipy.special import softmax

from src.types import ConfigError, DimensionError, MaskingError, RopeParams

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = [
    "Tensor",
    "as_tensor4",
    "matmul_qk",
    "softmax_rows",
    "l2_norm_lastdim",
    "rope_apply",
    "rope_angles",
    "scaled_scores",
]

Tensor = npt.NDArray[np.float64]


def as_tensor4(x: typing.Any, name: str = "tensor") -> Tensor:
    """
    Coerce `x` to a rank-4 float64 array, checking the Tensor4 invariants.

    :param x: Array-like input.
    :param name: Name used in error messages.
    :return: float64 array with four non-empty axes.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionError(
            f"{name} must have shape (B, H, N, d), got {arr.ndim} axes {arr.shape}"
        )
    if 0 in arr.shape:
        raise DimensionError(f"{name} has an empty axis: {arr.shape}")
    return arr


def matmul_qk(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched score product `out[b,h,i,j] = sum_k a[b,h,i,k] * b[b,h,j,k]`.

    :param a: Tensor of shape (B, H, N, d).
    :param b: Tensor of shape (B, H, M, d).
    :return: Tensor of shape (B, H, N, M).
    """
    a = as_tensor4(a, "a")
    b = as_tensor4(b, "b")
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[3]:
        raise DimensionError(
            f"Cannot match shapes {a.shape} and {b.shape}: batch, heads and head_dim must agree"
        )
    return a @ np.swapaxes(b, -1, -2)


def softmax_rows(logits: Tensor) -> Tensor:
    """
    Numerically stable softmax over the last axis.

    Masked entries are encoded as -inf. A row with every entry masked has no
    valid distribution and raises `MaskingError`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    # NaN and +inf both surface in the row maximum
    row_max = logits.max(axis=-1)
    if np.isnan(row_max).any() or np.isposinf(row_max).any():
        raise ValueError("Softmax logits must be finite or -inf")
    if np.isneginf(row_max).any():
        raise MaskingError(
            f"{int(np.isneginf(row_max).sum())} softmax row(s) are fully masked"
        )
    # scipy subtracts the row max before exponentiating
    return softmax(logits, axis=-1)


def l2_norm_lastdim(x: Tensor) -> Tensor:
    """Per-token L2 norm over the head dimension, keeping a trailing axis of 1."""
    return np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1, keepdims=True)


@cached(
    cache=LRUCache(maxsize=256),
    key=lambda positions, head_dim, base: (positions, head_dim, base),
    lock=threading.Lock(),
)
def rope_angles(
    positions: typing.Tuple[int, ...], head_dim: int, base: float
) -> typing.Tuple[Tensor, Tensor]:
    """
    Cosine and sine tables for interleaved-pair rotary embeddings.

    :param positions: Token positions (non-negative).
    :param head_dim: Even head dimension.
    :param base: Base frequency.
    :return: `(cos, sin)` arrays of shape (N, head_dim // 2), read-only.
    """
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def rope_apply(
    x: Tensor, positions: typing.Sequence[int], params: RopeParams
) -> Tensor:
    """
    Rotate each coordinate pair (x[2i], x[2i+1]) by `pos * base^(-2i/d)`.

    :param x: Tensor of shape (B, H, N, d).
    :param positions: One non-negative integer position per token.
    :param params: RoPE parameters; `params.head_dim` must equal d.
    :return: Rotated tensor with the same shape.
    """
    x = as_tensor4(x, "x")
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {d}")
    if d != params.head_dim:
        raise DimensionError(
            f"Tensor head_dim {d} does not match RoPE head_dim {params.head_dim}"
        )
    positions = tuple(int(p) for p in positions)
    if len(positions) != x.shape[2]:
        raise DimensionError(
            f"Got {len(positions)} positions for {x.shape[2]} tokens"
        )
    if any(p < 0 for p in positions):
        raise ConfigError("RoPE positions must be non-negative")

    cos, sin = rope_angles(positions, d, float(params.base_frequency))
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def scaled_scores(q: Tensor, k: Tensor) -> Tensor:
    """Dot-product scores scaled by 1/sqrt(d)."""
    return matmul_qk(q, k) / math.sqrt(q.shape[-1])
