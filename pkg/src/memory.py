"""
Layer-wise FIFO buffers of pre-RoPE prefix keys/values.
"""

from collections import deque
import logging
import typing

import attrs
import numpy as np
import numpy.typing as npt
from typing_extensions import Self

from src.numerics import Tensor, as_tensor4
from src.types import ConfigError, DimensionError, OrderingError

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = ["PrefixKV", "MemorySnapshot", "LayerMemory"]


def _frozen_tensor(value: typing.Any) -> Tensor:
    arr = np.array(as_tensor4(value), dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@attrs.define(slots=True, frozen=True)
class PrefixKV:
    """Pre-RoPE prefix keys and values of one layer at one timestep."""

    keys: Tensor = attrs.field(converter=_frozen_tensor, eq=False)
    """Keys of shape (B, H, S, d)"""
    values: Tensor = attrs.field(converter=_frozen_tensor, eq=False)
    """Values of shape (B, H, S, d)"""
    timestep: int = attrs.field()
    """Timestep tau at which the projections were computed"""

    def __attrs_post_init__(self):
        if self.keys.shape != self.values.shape:
            raise DimensionError(
                f"Keys {self.keys.shape} and values {self.values.shape} must share a shape"
            )
        if self.timestep < 0:
            raise OrderingError(f"Timestep must be non-negative, got {self.timestep}")

    @property
    def token_count(self) -> int:
        return self.keys.shape[2]

    @property
    def scalar_count(self) -> int:
        return self.keys.size + self.values.size


@attrs.define(slots=True, frozen=True)
class MemorySnapshot:
    """Oldest-first concatenation of a buffer's entries along the token axis."""

    k_hist: Tensor = attrs.field(eq=False)
    """Historical keys (B, H, C'*S, d)"""
    v_hist: Tensor = attrs.field(eq=False)
    """Historical values (B, H, C'*S, d)"""
    token_timesteps: npt.NDArray[np.int64] = attrs.field(eq=False)
    """Timestep of every history token (C'*S,), nondecreasing"""
    entry_count: int = attrs.field()
    """Number of buffer entries C' in the snapshot"""

    @property
    def history_tokens(self) -> int:
        return self.k_hist.shape[2]

    @property
    def latest_timestep(self) -> int:
        return int(self.token_timesteps[-1])


class LayerMemory:
    """
    Bounded FIFO buffer for one memory-enabled layer.

    Entries are appended with strictly increasing timesteps. Once the buffer
    holds `capacity` entries, every further write evicts exactly the oldest one.
    Only prefix-token projections are stored, never action tokens.

    History tokens live in preallocated append-only storage sized for `2 * capacity`
    entries. Slots are written once; when the storage runs out, the surviving
    entries move into a freshly allocated block. Snapshots are read-only views
    into that storage, so handing one out costs nothing and later writes never
    alter it.
    """

    def __init__(self, layer_index: int, capacity: int) -> None:
        """
        Create an empty buffer.

        :param layer_index: Index of the backbone layer this buffer serves.
        :param capacity: Maximum number of timesteps retained (C >= 1).
        """
        if capacity < 1:
            raise ConfigError(f"Memory capacity must be at least 1, got {capacity}")
        self.layer_index = layer_index
        self.capacity = capacity
        self._entries: typing.Deque[PrefixKV] = deque(maxlen=capacity)
        self._k_store: typing.Optional[Tensor] = None
        self._v_store: typing.Optional[Tensor] = None
        self._tau_store: typing.Optional[npt.NDArray[np.int64]] = None
        self._end = 0
        """One past the newest stored token in the storage block"""
        self._snapshot: typing.Optional[MemorySnapshot] = None

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(layer_index={self.layer_index}, "
            f"capacity={self.capacity}, timesteps={list(self.timesteps)})"
        )

    @property
    def entries(self) -> typing.Tuple[PrefixKV, ...]:
        return tuple(self._entries)

    @property
    def timesteps(self) -> typing.Tuple[int, ...]:
        return tuple(entry.timestep for entry in self._entries)

    @property
    def latest_timestep(self) -> typing.Optional[int]:
        return self._entries[-1].timestep if self._entries else None

    @property
    def scalar_count(self) -> int:
        """Number of stored scalars across all entries (keys and values)."""
        return sum(entry.scalar_count for entry in self._entries)

    def write(self, kv: PrefixKV) -> Self:
        """
        Append an entry, evicting the oldest one if the buffer is full.

        :param kv: Entry to append. Its timestep must exceed every stored timestep,
            and its shape must match previously stored entries.
        :return: self for method chaining.
        """
        if self._entries:
            latest = self._entries[-1]
            if kv.timestep <= latest.timestep:
                raise OrderingError(
                    f"Layer {self.layer_index}: timestep {kv.timestep} does not follow "
                    f"stored timestep {latest.timestep}"
                )
            if kv.keys.shape != latest.keys.shape:
                raise DimensionError(
                    f"Layer {self.layer_index}: entry shape {kv.keys.shape} differs from "
                    f"stored shape {latest.keys.shape}"
                )

        if len(self._entries) == self.capacity:
            evicted = self._entries[0]
            logger.debug(
                f"Layer {self.layer_index}: evicting timestep {evicted.timestep}"
            )
        self._append_tokens(kv)
        self._entries.append(kv)
        self._snapshot = None
        return self

    def _allocate(self, kv: PrefixKV) -> typing.Tuple[Tensor, Tensor, npt.NDArray[np.int64]]:
        B, H, S, d = kv.keys.shape
        slots = 2 * self.capacity * S
        return (
            np.empty((B, H, slots, d), dtype=np.float64),
            np.empty((B, H, slots, d), dtype=np.float64),
            np.empty(slots, dtype=np.int64),
        )

    def _append_tokens(self, kv: PrefixKV) -> None:
        S = kv.token_count
        if self._k_store is None:
            self._k_store, self._v_store, self._tau_store = self._allocate(kv)
            self._end = 0
        elif self._end + S > self._tau_store.shape[0]:
            # Survivors move to a new block; old views keep the previous one alive
            keep = (self.capacity - 1) * S
            start = self._end - keep
            k_store, v_store, tau_store = self._allocate(kv)
            k_store[:, :, :keep] = self._k_store[:, :, start : self._end]
            v_store[:, :, :keep] = self._v_store[:, :, start : self._end]
            tau_store[:keep] = self._tau_store[start : self._end]
            self._k_store, self._v_store, self._tau_store = k_store, v_store, tau_store
            self._end = keep

        stop = self._end + S
        self._k_store[:, :, self._end : stop] = kv.keys
        self._v_store[:, :, self._end : stop] = kv.values
        self._tau_store[self._end : stop] = kv.timestep
        self._end = stop

    def snapshot(self) -> typing.Optional[MemorySnapshot]:
        """
        Oldest-first view of stored entries along the token axis.

        The snapshot is cached until the next write or reset.

        :return: A read-only snapshot of the history, or None when empty.
        """
        if not self._entries:
            return None
        if self._snapshot is not None:
            return self._snapshot

        start = self._end - len(self._entries) * self._entries[-1].token_count
        k_hist = self._k_store[:, :, start : self._end]
        v_hist = self._v_store[:, :, start : self._end]
        token_timesteps = self._tau_store[start : self._end]
        for view in (k_hist, v_hist, token_timesteps):
            view.setflags(write=False)
        self._snapshot = MemorySnapshot(
            k_hist=k_hist,
            v_hist=v_hist,
            token_timesteps=token_timesteps,
            entry_count=len(self._entries),
        )
        return self._snapshot

    def reset(self) -> Self:
        """Drop all entries. Capacity and layer index are kept."""
        self._entries.clear()
        self._k_store = self._v_store = self._tau_store = None
        self._end = 0
        self._snapshot = None
        return self

    def dump_state(self) -> typing.Dict[str, typing.Any]:
        """Buffer metadata suitable for JSON debugging dumps."""
        shape = list(self._entries[0].keys.shape) if self._entries else None
        return {
            "layer": self.layer_index,
            "capacity": self.capacity,
            "size": len(self._entries),
            "timesteps": list(self.timesteps),
            "entry_shape": shape,
            "scalar_count": self.scalar_count,
        }
