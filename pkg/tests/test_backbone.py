import attrs
import numpy as np
import pytest

from src.backbone import (
    backbone_init,
    resolve_memory_plan,
    step,
    step_memoryless,
    step_stacked,
)
from src.memory import LayerMemory
from src.types import (
    BackboneConfig,
    ConfigError,
    DimensionError,
    InjectionMode,
    OrderingError,
    RetrievalMode,
    TempoFitConfig,
)

from tests.conftest import make_frames


def fresh_memories(tempofit: TempoFitConfig, num_layers: int):
    return {
        index: LayerMemory(index, tempofit.capacity)
        for index in tempofit.resolve_layers(num_layers)
    }


def test_backbone_init_is_deterministic_and_frozen(desk_config):
    first, second = backbone_init(desk_config), backbone_init(desk_config)
    assert first.fingerprint() == second.fingerprint()
    assert backbone_init(attrs.evolve(desk_config, seed=8)).fingerprint() != first.fingerprint()
    with pytest.raises(ValueError):
        first.layers[0].w_q[0, 0] = 1.0


def test_backbone_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(head_dim=7)
    with pytest.raises(ConfigError):
        BackboneConfig(num_layers=0)


def test_empty_memory_step_equals_memoryless_forward(desk_weights, rng):
    obs = make_frames(rng, desk_weights.config, 1)[0]
    tempofit = TempoFitConfig(mem_layers=(0, 1, 2, 3))
    memories = fresh_memories(tempofit, 4)
    retro = step(desk_weights, tempofit, memories, obs, t=0)
    plain = step_memoryless(desk_weights, obs)
    for a, b in zip(retro.layer_hidden, plain.layer_hidden):
        assert np.max(np.abs(a - b)) <= 1e-12
    assert np.max(np.abs(retro.hidden - plain.hidden)) <= 1e-12
    assert all(len(memory) == 1 for memory in memories.values())


def test_weights_are_unchanged_by_steps(desk_weights, rng):
    fingerprint = desk_weights.fingerprint()
    tempofit = TempoFitConfig(capacity=3)
    memories = fresh_memories(tempofit, 4)
    for t, obs in enumerate(make_frames(rng, desk_weights.config, 20)):
        step(desk_weights, tempofit, memories, obs, t)
    assert desk_weights.fingerprint() == fingerprint


def test_retrieval_only_sees_earlier_steps(desk_weights, rng):
    tempofit = TempoFitConfig(capacity=4)
    memories = fresh_memories(tempofit, 4)
    for t, obs in enumerate(make_frames(rng, desk_weights.config, 6)):
        output = step(desk_weights, tempofit, memories, obs, t)
        for layer in output.layers:
            if layer.retrieved:
                assert max(layer.retrieval.token_timesteps) < t
        assert all(memory.latest_timestep == t for memory in memories.values())


def test_step_rejects_stale_timesteps_and_missing_buffers(desk_weights, rng):
    obs = make_frames(rng, desk_weights.config, 1)[0]
    tempofit = TempoFitConfig()
    memories = fresh_memories(tempofit, 4)
    step(desk_weights, tempofit, memories, obs, 3)
    with pytest.raises(OrderingError):
        step(desk_weights, tempofit, memories, obs, 3)
    with pytest.raises(ConfigError):
        step(desk_weights, tempofit, {}, obs, 0)


def test_step_validates_observation_tokens(desk_weights, rng):
    tempofit = TempoFitConfig()
    memories = fresh_memories(tempofit, 4)
    with pytest.raises(DimensionError):
        step(desk_weights, tempofit, memories, rng.standard_normal((1, 3, 16)), 0)
    bad = make_frames(rng, desk_weights.config, 1)[0]
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        step_memoryless(desk_weights, bad)


def test_memory_layers_store_raw_projections(desk_weights, rng):
    # The first memory layer only sees memoryless layers below it, so its raw
    # keys for a frame do not depend on history.
    frames = make_frames(rng, desk_weights.config, 2)
    tempofit = TempoFitConfig(mem_layers=(1,))
    with_history = fresh_memories(tempofit, 4)
    step(desk_weights, tempofit, with_history, frames[0], 0)
    step(desk_weights, tempofit, with_history, frames[1], 1)

    alone = fresh_memories(tempofit, 4)
    step(desk_weights, tempofit, alone, frames[1], 0)
    np.testing.assert_array_equal(
        with_history[1].entries[-1].keys, alone[1].entries[-1].keys
    )


def test_fused_writes_store_injected_tensors(desk_weights, rng):
    frames = make_frames(rng, desk_weights.config, 2)
    raw_config = TempoFitConfig(mem_layers=(1,))
    fused_config = attrs.evolve(raw_config, write_fused=True)
    raw, fused = fresh_memories(raw_config, 4), fresh_memories(fused_config, 4)
    for t, obs in enumerate(frames):
        step(desk_weights, raw_config, raw, obs, t)
        step(desk_weights, fused_config, fused, obs, t)
    np.testing.assert_array_equal(raw[1].entries[0].keys, fused[1].entries[0].keys)
    assert not np.allclose(raw[1].entries[1].keys, fused[1].entries[1].keys)


def test_concatenate_mode_extends_attended_length(desk_weights, rng):
    config = desk_weights.config
    tempofit = TempoFitConfig(
        mem_layers=(1,), capacity=2, injection_mode=InjectionMode.CONCATENATE
    )
    memories = fresh_memories(tempofit, 4)
    outputs = [
        step(desk_weights, tempofit, memories, obs, t)
        for t, obs in enumerate(make_frames(rng, config, 4))
    ]
    lengths = [layer.attended_length for layer in outputs[-1].layers]
    S = config.prefix_tokens
    assert lengths == [S, S + 2 * S, S, S]
    assert outputs[0].layers[1].attended_length == S


def test_norm_drift_distinguishes_residual_modes(desk_weights, rng):
    frames = make_frames(rng, desk_weights.config, 3)
    drifts = {}
    for mode in (InjectionMode.RESIDUAL_NORM_PRESERVING, InjectionMode.RESIDUAL_PLAIN):
        tempofit = TempoFitConfig(mem_layers=(1,), injection_mode=mode)
        memories = fresh_memories(tempofit, 4)
        for t, obs in enumerate(frames):
            output = step(desk_weights, tempofit, memories, obs, t)
        drifts[mode] = output.layers[1].norm_drift
    assert drifts[InjectionMode.RESIDUAL_NORM_PRESERVING] < 1e-9
    assert drifts[InjectionMode.RESIDUAL_PLAIN] > 1e-6


def test_query_and_key_retrieval_change_outputs(desk_weights, rng):
    frames = make_frames(rng, desk_weights.config, 3)
    hidden = {}
    for mode in RetrievalMode:
        tempofit = TempoFitConfig(mem_layers=(1,), retrieval_mode=mode)
        memories = fresh_memories(tempofit, 4)
        for t, obs in enumerate(frames):
            output = step(desk_weights, tempofit, memories, obs, t)
        hidden[mode] = output.hidden
    assert not np.allclose(hidden[RetrievalMode.K_TO_K], hidden[RetrievalMode.Q_TO_K])


def test_disabled_retrofit_is_memoryless(desk_weights, rng):
    obs = make_frames(rng, desk_weights.config, 2)
    tempofit = TempoFitConfig(enabled=False)
    memories = fresh_memories(tempofit, 4)
    step(desk_weights, tempofit, memories, obs[0], 0)
    output = step(desk_weights, tempofit, memories, obs[1], 1)
    np.testing.assert_array_equal(output.hidden, step_memoryless(desk_weights, obs[1]).hidden)
    assert all(len(memory) == 0 for memory in memories.values())


def test_attention_and_retrieval_mac_counters(desk_weights, rng):
    config = desk_weights.config
    B, H, S, d, L = 1, config.num_heads, config.prefix_tokens, config.head_dim, config.num_layers
    frames = make_frames(rng, config, 8)

    plain = step_memoryless(desk_weights, frames[0])
    assert plain.attention_macs == L * B * H * S * S * d
    assert plain.retrieval_macs == 0

    stacked = step_stacked(desk_weights, frames)
    assert stacked.attention_macs == 64 * plain.attention_macs
    assert stacked.max_attended_length == 8 * S

    tempofit = TempoFitConfig(mem_layers=(1, 2), capacity=3)
    memories = fresh_memories(tempofit, L)
    for t, obs in enumerate(frames[:5]):
        output = step(desk_weights, tempofit, memories, obs, t)
    assert output.retrieval_macs == 2 * B * H * S * (3 * S) * d
    assert output.attention_macs == plain.attention_macs


def test_stacked_single_frame_equals_memoryless(desk_weights, rng):
    obs = make_frames(rng, desk_weights.config, 1)
    np.testing.assert_array_equal(
        step_stacked(desk_weights, obs).hidden, step_memoryless(desk_weights, obs[0]).hidden
    )
    with pytest.raises(ConfigError):
        step_stacked(desk_weights, [])


def test_batched_observations(desk_weights, rng):
    frames = make_frames(rng, desk_weights.config, 3, batch_size=2)
    tempofit = TempoFitConfig(capacity=2)
    memories = fresh_memories(tempofit, 4)
    for t, obs in enumerate(frames):
        output = step(desk_weights, tempofit, memories, obs, t)
    assert output.hidden.shape == (2, 4, desk_weights.config.model_dim)
    assert output.action.shape == (2, desk_weights.config.action_dim)


def test_memory_plan_is_resolved_once_per_configuration(desk_config):
    tempofit = TempoFitConfig(mem_layers=(2, 1), beta=0.5)
    layers, fgtb = resolve_memory_plan(tempofit, desk_config)
    assert layers == frozenset({1, 2})
    assert fgtb == tempofit.resolve_fgtb(desk_config)
    assert resolve_memory_plan(TempoFitConfig(mem_layers=(2, 1), beta=0.5), desk_config) is (
        resolve_memory_plan(tempofit, desk_config)
    )
    with pytest.raises(ConfigError):
        resolve_memory_plan(TempoFitConfig(mem_layers=(9,)), desk_config)
