"""
Parameter-free retrieval over cached prefix keys.

Current keys (or queries, for the ablation mode) address the concatenated
history keys by scaled dot product. A frame-gap temporal bias is added to the
logits so that older timesteps are down-weighted per head.
"""

import logging
import math
import typing

import attrs
import numpy as np
import numpy.typing as npt

from src.memory import MemorySnapshot
from src.numerics import Tensor, as_tensor4, matmul_qk, softmax_rows
from src.types import (
    ConfigError,
    DimensionError,
    FgtbParams,
    OrderingError,
    RetrievalMode,
    alibi_slopes,
)

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = [
    "RetrievalResult",
    "head_slopes",
    "fgtb_bias",
    "kk_logits",
    "retrieve",
]


@attrs.define(slots=True, frozen=True)
class RetrievalResult:
    """Retrieval weights and the context read out of the history."""

    weights: Tensor = attrs.field(eq=False)
    """Retrieval weights W of shape (B, H, S, C'*S)"""
    k_ctx: Tensor = attrs.field(eq=False)
    """Retrieved key context W @ K_hist, shape (B, H, S, d)"""
    v_ctx: Tensor = attrs.field(eq=False)
    """Retrieved value context W @ V_hist, shape (B, H, S, d)"""
    k_hist: Tensor = attrs.field(eq=False)
    """History keys the weights refer to"""
    v_hist: Tensor = attrs.field(eq=False)
    """History values the weights refer to"""
    token_timesteps: npt.NDArray[np.int64] = attrs.field(eq=False)
    """Timestep of every history token"""
    step: int = attrs.field()
    """Timestep t at which retrieval ran"""

    @property
    def history_tokens(self) -> int:
        return self.k_hist.shape[2]

    def recent_mass(self) -> Tensor:
        """Weight mass on the most recent stored timestep, per (B, H, query)."""
        taus = np.asarray(self.token_timesteps)
        columns = taus == taus.max()
        return self.weights[..., columns].sum(axis=-1)


def head_slopes(num_heads: int) -> Tensor:
    """
    ALiBi-style geometric slope schedule m_h = 2^(-8(h+1)/H).

    Slopes are strictly decreasing and lie in (0, 1).
    """
    return np.asarray(alibi_slopes(num_heads), dtype=np.float64)


def fgtb_bias(
    t: int, token_timesteps: typing.Sequence[int], params: FgtbParams
) -> Tensor:
    """
    Frame-gap temporal bias `-beta * m_h * |t - tau| * alpha_s`.

    :param t: Current timestep.
    :param token_timesteps: Timestep of every history token.
    :param params: Resolved bias parameters.
    :return: Bias of shape (H, len(token_timesteps)), non-positive everywhere.
    """
    taus = np.asarray(token_timesteps, dtype=np.int64)
    if taus.size and t < taus.max():
        raise OrderingError(
            f"Bias requested at t={t} for history reaching timestep {int(taus.max())}"
        )
    gaps = np.abs(t - taus).astype(np.float64)
    slopes = np.asarray(params.slopes, dtype=np.float64)
    return -params.beta * slopes[:, None] * gaps[None, :] * params.alpha_s


def kk_logits(
    k_cur: Tensor, k_hist: Tensor, mask: typing.Optional[Tensor] = None
) -> Tensor:
    """
    Scaled dot-product logits between current and historical keys.

    Both inputs are pre-RoPE. No softmax is applied.

    :param k_cur: Addressing tensor (B, H, S, d).
    :param k_hist: History keys (B, H, M, d).
    :param mask: Optional additive mask broadcastable to (B, H, S, M); -inf hides an entry.
    :return: Logits of shape (B, H, S, M).
    """
    logits = matmul_qk(k_cur, k_hist) / math.sqrt(k_cur.shape[-1])
    if mask is not None:
        expected = logits.shape
        try:
            logits = logits + np.asarray(mask, dtype=np.float64)
        except ValueError as exc:
            raise DimensionError(
                f"Mask of shape {np.shape(mask)} does not broadcast to {expected}"
            ) from exc
        # The mask may only broadcast into the logits, never grow them
        if logits.shape != expected:
            raise DimensionError(
                f"Mask of shape {np.shape(mask)} turns logits {expected} into {logits.shape}"
            )
    return logits


def retrieve(
    k_cur: Tensor,
    snapshot: typing.Optional[MemorySnapshot],
    t: int,
    fgtb: FgtbParams,
    mode: RetrievalMode = RetrievalMode.K_TO_K,
    q_cur: typing.Optional[Tensor] = None,
    mask: typing.Optional[Tensor] = None,
) -> typing.Optional[RetrievalResult]:
    """
    Retrieve context from a memory snapshot.

    Softmax runs jointly over all history tokens, per head and per query row.
    The bias depends only on the history token and is broadcast over queries.

    :param k_cur: Current pre-RoPE prefix keys (B, H, S, d).
    :param snapshot: History snapshot, or None when the buffer is empty.
    :param t: Current timestep.
    :param fgtb: Resolved temporal bias parameters.
    :param mode: Addressing mode. `Q_TO_K` requires `q_cur`.
    :param q_cur: Current pre-RoPE query projections (B, H, S, d).
    :param mask: Optional additive mask for padded prefixes.
    :return: Retrieval result, or None when there is no history.
    """
    mode = RetrievalMode(mode)
    if mode is RetrievalMode.Q_TO_K and q_cur is None:
        raise ConfigError("Q-to-K retrieval needs the current query projections")
    if snapshot is None:
        return None

    k_cur = as_tensor4(k_cur, "k_cur")
    address = k_cur if mode is RetrievalMode.K_TO_K else as_tensor4(q_cur, "q_cur")
    if address.shape != k_cur.shape:
        raise DimensionError(
            f"Query projections {address.shape} must match keys {k_cur.shape}"
        )
    if fgtb.num_heads != k_cur.shape[1]:
        raise DimensionError(
            f"FGTB has {fgtb.num_heads} head slopes for {k_cur.shape[1]} heads"
        )

    logits = kk_logits(address, snapshot.k_hist, mask)
    bias = fgtb_bias(t, snapshot.token_timesteps, fgtb)
    logits += bias[None, :, None, :]
    weights = softmax_rows(logits)
    return RetrievalResult(
        weights=weights,
        k_ctx=weights @ snapshot.k_hist,
        v_ctx=weights @ snapshot.v_hist,
        k_hist=snapshot.k_hist,
        v_hist=snapshot.v_hist,
        token_timesteps=snapshot.token_timesteps,
        step=t,
    )
