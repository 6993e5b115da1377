from collections import deque

from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from src.memory import LayerMemory, PrefixKV
from src.types import ConfigError, DimensionError, OrderingError


def entry(tau: int, shape=(1, 1, 2, 2)) -> PrefixKV:
    return PrefixKV(np.full(shape, float(tau)), np.full(shape, -float(tau)), tau)


@settings(max_examples=1000, deadline=None)
@given(
    capacity=st.integers(1, 8),
    gaps=st.lists(st.integers(1, 5), max_size=30),
)
def test_fifo_holds_last_min_n_c_timesteps_in_order(capacity, gaps):
    memory = LayerMemory(0, capacity)
    reference: deque = deque(maxlen=capacity)
    tau = 0
    for gap in gaps:
        tau += gap
        memory.write(entry(tau))
        reference.append(tau)

    assert len(memory) == min(len(gaps), capacity)
    assert memory.timesteps == tuple(reference)
    snapshot = memory.snapshot()
    if not reference:
        assert snapshot is None
        return
    assert snapshot.entry_count == len(reference)
    per_token = [t for t in reference for _ in range(2)]
    assert snapshot.token_timesteps.tolist() == per_token
    np.testing.assert_array_equal(snapshot.k_hist[0, 0, :, 0], per_token)
    np.testing.assert_array_equal(snapshot.v_hist[0, 0, :, 1], [-t for t in per_token])


def test_write_rejects_non_increasing_timesteps():
    memory = LayerMemory(3, 4).write(entry(2))
    with pytest.raises(OrderingError):
        memory.write(entry(2))
    with pytest.raises(OrderingError):
        memory.write(entry(1))
    assert memory.timesteps == (2,)


def test_write_rejects_shape_changes():
    memory = LayerMemory(0, 4).write(entry(0))
    with pytest.raises(DimensionError):
        memory.write(entry(1, shape=(1, 1, 3, 2)))


def test_prefix_kv_validation():
    with pytest.raises(DimensionError):
        PrefixKV(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 4)), 0)
    with pytest.raises(OrderingError):
        PrefixKV(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), -1)
    with pytest.raises(DimensionError):
        PrefixKV(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 0)


def test_capacity_must_be_positive():
    with pytest.raises(ConfigError):
        LayerMemory(0, 0)


def test_entries_own_their_data():
    keys = np.ones((1, 1, 2, 2))
    kv = PrefixKV(keys, keys.copy(), 0)
    keys[...] = 5.0
    assert np.all(kv.keys == 1.0)
    with pytest.raises(ValueError):
        kv.keys[0, 0, 0, 0] = 3.0


def test_snapshot_is_unaffected_by_later_writes():
    memory = LayerMemory(0, 2).write(entry(0)).write(entry(1))
    snapshot = memory.snapshot()
    memory.write(entry(2))
    assert snapshot.token_timesteps.tolist() == [0, 0, 1, 1]
    assert memory.snapshot().token_timesteps.tolist() == [1, 1, 2, 2]
    with pytest.raises(ValueError):
        snapshot.k_hist[0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        snapshot.token_timesteps[0] = 7


def test_snapshots_survive_storage_compaction():
    memory = LayerMemory(0, 2)
    snapshots = []
    for tau in range(9):
        snapshots.append(memory.write(entry(tau)).snapshot())
    for tau, snapshot in enumerate(snapshots):
        expected = [t for t in range(max(0, tau - 1), tau + 1) for _ in range(2)]
        assert snapshot.token_timesteps.tolist() == expected
        np.testing.assert_array_equal(snapshot.k_hist[0, 0, :, 0], expected)
        np.testing.assert_array_equal(snapshot.v_hist[0, 0, :, 0], [-t for t in expected])


def test_snapshot_is_reused_until_the_next_write():
    memory = LayerMemory(0, 3).write(entry(0)).write(entry(1))
    snapshot = memory.snapshot()
    assert memory.snapshot() is snapshot
    memory.write(entry(2))
    assert memory.snapshot() is not snapshot
    assert memory.snapshot().latest_timestep == 2


def test_capacity_one_keeps_only_the_newest_entry():
    memory = LayerMemory(0, 1)
    for tau in range(5):
        memory.write(entry(tau))
        snapshot = memory.snapshot()
        assert snapshot.token_timesteps.tolist() == [tau, tau]
        np.testing.assert_array_equal(snapshot.k_hist[0, 0, :, 1], [tau, tau])


def test_reset_keeps_capacity_and_allows_restart():
    memory = LayerMemory(1, 2).write(entry(4)).write(entry(5))
    memory.reset()
    assert len(memory) == 0
    assert memory.snapshot() is None
    assert memory.capacity == 2
    memory.write(entry(0, shape=(1, 2, 3, 2)))
    assert memory.timesteps == (0,)
    assert memory.snapshot().k_hist.shape == (1, 2, 3, 2)


def test_scalar_count_is_bounded_by_capacity():
    shape = (2, 3, 4, 5)
    memory = LayerMemory(0, 3)
    for tau in range(10):
        memory.write(entry(tau, shape))
    assert memory.scalar_count == 3 * 2 * 2 * 3 * 4 * 5


def test_dump_state_reports_buffer_metadata():
    memory = LayerMemory(2, 3).write(entry(1)).write(entry(4))
    state = memory.dump_state()
    assert state == {
        "layer": 2,
        "capacity": 3,
        "size": 2,
        "timesteps": [1, 4],
        "entry_shape": [1, 1, 2, 2],
        "scalar_count": 16,
    }
