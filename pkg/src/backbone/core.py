"""
Deterministic frozen toy transformer with per-layer temporal memory hooks.
"""

import hashlib
import logging
import math
import threading
import typing

import attrs
from cachetools import LRUCache, cached
import numpy as np
from scipy.stats import entropy

from src.injection import InjectionOutput, inject
from src.memory import LayerMemory, PrefixKV
from src.numerics import (
    Tensor,
    l2_norm_lastdim,
    rope_apply,
    scaled_scores,
    softmax_rows,
)
from src.retrieval import RetrievalResult, retrieve
from src.types import (
    BackboneConfig,
    ConfigError,
    DimensionError,
    FgtbParams,
    OrderingError,
    TempoFitConfig,
)

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = [
    "LayerWeights",
    "BackboneWeights",
    "LayerDiagnostics",
    "StepOutput",
    "backbone_init",
    "resolve_memory_plan",
    "step",
    "step_memoryless",
    "step_stacked",
]

_RMS_EPSILON = 1e-6
_GELU_COEFF = math.sqrt(2.0 / math.pi)


def _freeze(arr: Tensor) -> Tensor:
    arr.setflags(write=False)
    return arr


@attrs.define(slots=True, frozen=True)
class LayerWeights:
    """Projection, feed-forward and normalisation weights of one layer."""

    w_q: Tensor = attrs.field(eq=False)
    """Query projection (model_dim, H*d)"""
    w_k: Tensor = attrs.field(eq=False)
    """Key projection (model_dim, H*d)"""
    w_v: Tensor = attrs.field(eq=False)
    """Value projection (model_dim, H*d)"""
    w_o: Tensor = attrs.field(eq=False)
    """Attention output projection (H*d, model_dim)"""
    w_ff_in: Tensor = attrs.field(eq=False)
    """Feed-forward expansion (model_dim, ffn_dim)"""
    w_ff_out: Tensor = attrs.field(eq=False)
    """Feed-forward contraction (ffn_dim, model_dim)"""
    attn_norm: Tensor = attrs.field(eq=False)
    """Pre-attention RMS norm gain (model_dim,)"""
    ffn_norm: Tensor = attrs.field(eq=False)
    """Pre-feed-forward RMS norm gain (model_dim,)"""

    def arrays(self) -> typing.Iterator[Tensor]:
        for field in attrs.fields(type(self)):
            yield getattr(self, field.name)


@attrs.define(slots=True, frozen=True)
class BackboneWeights:
    """Frozen backbone parameters. All arrays are read-only."""

    config: BackboneConfig
    """Configuration the weights were generated from"""
    layers: typing.Tuple[LayerWeights, ...] = attrs.field(eq=False)
    """Per-layer weights"""
    final_norm: Tensor = attrs.field(eq=False)
    """Final RMS norm gain (model_dim,)"""
    readout: Tensor = attrs.field(eq=False)
    """Linear action readout (model_dim, action_dim)"""

    def arrays(self) -> typing.Iterator[Tensor]:
        for layer in self.layers:
            yield from layer.arrays()
        yield self.final_norm
        yield self.readout

    def fingerprint(self) -> str:
        """SHA-256 over every weight array, in a fixed order."""
        digest = hashlib.sha256()
        for arr in self.arrays():
            digest.update(str(arr.shape).encode())
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()

    @property
    def scalar_count(self) -> int:
        return sum(arr.size for arr in self.arrays())


@attrs.define(slots=True, frozen=True)
class LayerDiagnostics:
    """Per-layer trace of one forward step."""

    layer_index: int
    """Backbone layer index"""
    attended_length: int
    """Key/value tokens seen by the layer's attention"""
    attention_macs: int
    """Multiply-accumulates spent on attention scores"""
    memory_enabled: bool = False
    """Whether the layer read from and wrote to memory"""
    retrieval_macs: int = 0
    """Multiply-accumulates spent on retrieval address matching"""
    history_tokens: int = 0
    """History tokens available to retrieval"""
    weight_entropy: typing.Optional[float] = None
    """Mean entropy (nats) of retrieval weight rows"""
    recent_mass: typing.Optional[float] = None
    """Mean retrieval weight on the most recent stored timestep"""
    norm_drift: typing.Optional[float] = None
    """Mean relative change of per-token key norms caused by injection"""
    retrieval: typing.Optional[RetrievalResult] = attrs.field(default=None, eq=False)
    """Full retrieval result, when retrieval ran"""

    @property
    def retrieved(self) -> bool:
        return self.retrieval is not None


@attrs.define(slots=True, frozen=True)
class StepOutput:
    """Result of one backbone step."""

    hidden: Tensor = attrs.field(eq=False)
    """Final hidden states H_t (B, N, model_dim)"""
    action: Tensor = attrs.field(eq=False)
    """Toy action readout (B, action_dim)"""
    layers: typing.Tuple[LayerDiagnostics, ...]
    """Per-layer diagnostics"""
    layer_hidden: typing.Tuple[Tensor, ...] = attrs.field(eq=False)
    """Residual stream after every layer"""

    @property
    def attention_macs(self) -> int:
        return sum(layer.attention_macs for layer in self.layers)

    @property
    def retrieval_macs(self) -> int:
        return sum(layer.retrieval_macs for layer in self.layers)

    @property
    def max_attended_length(self) -> int:
        return max(layer.attended_length for layer in self.layers)

    @property
    def kv_table_scalars(self) -> int:
        """Scalars held in the per-step KV tables of all layers."""
        return sum(
            2 * self.hidden.shape[0] * layer.attended_length * self.hidden.shape[2]
            for layer in self.layers
        )


def backbone_init(config: BackboneConfig) -> BackboneWeights:
    """
    Generate frozen backbone weights from the config seed.

    Matrices are standard normal draws scaled by 1/sqrt(model_dim); norm gains
    are drawn around 1. The same config always yields bitwise-identical weights.
    """
    rng = np.random.default_rng(config.seed)
    dim = config.model_dim
    ffn_dim = config.ffn_multiplier * dim
    scale = 1.0 / math.sqrt(dim)

    def matrix(rows: int, cols: int) -> Tensor:
        return _freeze(rng.standard_normal((rows, cols)) * scale)

    def gain() -> Tensor:
        return _freeze(1.0 + 0.1 * rng.standard_normal(dim))

    layers = tuple(
        LayerWeights(
            w_q=matrix(dim, dim),
            w_k=matrix(dim, dim),
            w_v=matrix(dim, dim),
            w_o=matrix(dim, dim),
            w_ff_in=matrix(dim, ffn_dim),
            w_ff_out=matrix(ffn_dim, dim),
            attn_norm=gain(),
            ffn_norm=gain(),
        )
        for _ in range(config.num_layers)
    )
    weights = BackboneWeights(
        config=config,
        layers=layers,
        final_norm=gain(),
        readout=matrix(dim, config.action_dim),
    )
    logger.debug(
        f"Initialised backbone with {weights.scalar_count} parameters (seed={config.seed})"
    )
    return weights


def _rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPSILON) * gain


def _gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + np.tanh(_GELU_COEFF * (x + 0.044715 * x**3)))


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    batch, tokens, dim = x.shape
    return x.reshape(batch, tokens, num_heads, dim // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, tokens, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, tokens, heads * head_dim)


def _check_tokens(
    config: BackboneConfig, tokens: typing.Any, expected_tokens: int, name: str
) -> Tensor:
    arr = np.asarray(tokens, dtype=np.float64)
    expected = (expected_tokens, config.model_dim)
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1:] != expected:
        raise DimensionError(
            f"{name} must have shape (B, {expected[0]}, {expected[1]}), got {arr.shape}"
        )
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


LayerHook = typing.Callable[
    [int, Tensor, Tensor, Tensor],
    typing.Optional[typing.Tuple[InjectionOutput, typing.Dict[str, typing.Any]]],
]


def _forward(
    weights: BackboneWeights, tokens: Tensor, hook: typing.Optional[LayerHook] = None
) -> StepOutput:
    config = weights.config
    rope = config.rope
    batch, num_tokens, _ = tokens.shape
    heads, head_dim = config.num_heads, config.head_dim
    query_positions = tuple(range(num_tokens))

    x = tokens
    diagnostics = []
    layer_hidden = []
    for index, layer in enumerate(weights.layers):
        h = _rms_norm(x, layer.attn_norm)
        q = _split_heads(h @ layer.w_q, heads)
        k = _split_heads(h @ layer.w_k, heads)
        v = _split_heads(h @ layer.w_v, heads)

        hooked = hook(index, q, k, v) if hook is not None else None
        if hooked is None:
            injected, extra = InjectionOutput(k, v, num_tokens), {}
        else:
            injected, extra = hooked

        # Appended history tokens take positions after the current prefix
        key_positions = (
            query_positions
            if injected.attended_length == num_tokens
            else tuple(range(injected.attended_length))
        )
        q_rot = rope_apply(q, query_positions, rope)
        k_rot = rope_apply(injected.k_fused, key_positions, rope)
        probs = softmax_rows(scaled_scores(q_rot, k_rot))
        x = x + _merge_heads(probs @ injected.v_fused) @ layer.w_o
        x = x + _gelu(_rms_norm(x, layer.ffn_norm) @ layer.w_ff_in) @ layer.w_ff_out

        layer_hidden.append(x)
        diagnostics.append(
            LayerDiagnostics(
                layer_index=index,
                attended_length=injected.attended_length,
                attention_macs=batch
                * heads
                * num_tokens
                * injected.attended_length
                * head_dim,
                **extra,
            )
        )

    hidden = _rms_norm(x, weights.final_norm)
    action = hidden.mean(axis=1) @ weights.readout
    return StepOutput(
        hidden=hidden,
        action=action,
        layers=tuple(diagnostics),
        layer_hidden=tuple(layer_hidden),
    )


def _retrieval_stats(
    k_cur: Tensor,
    injected: InjectionOutput,
    result: typing.Optional[RetrievalResult],
    diagnostics: bool = True,
) -> typing.Dict[str, typing.Any]:
    stats: typing.Dict[str, typing.Any] = {"memory_enabled": True}
    if result is None:
        return stats

    batch, heads, tokens, head_dim = k_cur.shape
    stats.update(
        retrieval=result,
        history_tokens=result.history_tokens,
        retrieval_macs=batch * heads * tokens * result.history_tokens * head_dim,
    )
    if not diagnostics:
        return stats
    stats.update(
        weight_entropy=float(entropy(result.weights, axis=-1).mean()),
        recent_mass=float(result.recent_mass().mean()),
    )
    if injected.attended_length == tokens:
        original = l2_norm_lastdim(k_cur)
        drift = np.abs(l2_norm_lastdim(injected.k_fused) - original) / np.maximum(
            original, np.finfo(np.float64).tiny
        )
        stats["norm_drift"] = float(drift.mean())
    return stats


@cached(
    cache=LRUCache(maxsize=64),
    key=lambda tempofit, config: (tempofit, config),
    lock=threading.Lock(),
)
def resolve_memory_plan(
    tempofit: TempoFitConfig, config: BackboneConfig
) -> typing.Tuple[typing.FrozenSet[int], FgtbParams]:
    """
    Memory-enabled layers and FGTB parameters for a retrofit on a backbone.

    Both configs are frozen, so a plan is resolved once and reused by every step.
    """
    layers = frozenset(tempofit.resolve_layers(config.num_layers))
    return layers, tempofit.resolve_fgtb(config)


def step(
    weights: BackboneWeights,
    tempofit: TempoFitConfig,
    memories: typing.Mapping[int, LayerMemory],
    obs_tokens: Tensor,
    t: int,
    diagnostics: bool = True,
) -> StepOutput:
    """
    Run one retrofitted step.

    In every memory-enabled layer: retrieve from the buffer with the pre-RoPE
    keys, inject the context, write the raw projections at timestep `t`, then
    rotate and attend. Retrieval never sees the entry written at `t`.

    :param weights: Frozen backbone weights.
    :param tempofit: Retrofit configuration.
    :param memories: Buffers keyed by layer index, owned by the calling stream.
    :param obs_tokens: Observation tokens (B, S, model_dim).
    :param t: Current timestep, greater than any stored timestep.
    :param diagnostics: Compute weight entropy, recent mass and norm drift.
        Counters and retrieval results are always reported.
    :return: Step output with per-layer diagnostics.
    """
    config = weights.config
    tokens = _check_tokens(config, obs_tokens, config.prefix_tokens, "obs_tokens")
    if not tempofit.enabled:
        return _forward(weights, tokens)

    memory_layers, fgtb = resolve_memory_plan(tempofit, config)
    missing = sorted(memory_layers - set(memories))
    if missing:
        raise ConfigError(f"No memory buffer supplied for layers {missing}")
    for index in memory_layers:
        latest = memories[index].latest_timestep
        if latest is not None and latest >= t:
            raise OrderingError(
                f"Step t={t} does not follow stored timestep {latest} at layer {index}"
            )

    store_fused = tempofit.write_fused and tempofit.injection_mode.is_residual

    def memory_hook(index: int, q: Tensor, k: Tensor, v: Tensor):
        if index not in memory_layers:
            return None
        memory = memories[index]
        snapshot = memory.snapshot()
        if snapshot is not None and snapshot.latest_timestep >= t:
            raise OrderingError(
                f"Layer {index} would retrieve timestep {snapshot.latest_timestep} at t={t}"
            )
        result = retrieve(k, snapshot, t, fgtb, tempofit.retrieval_mode, q_cur=q)
        injected = inject(k, v, result, tempofit.injection_mode, tempofit.epsilon)
        if store_fused:
            memory.write(PrefixKV(injected.k_fused, injected.v_fused, t))
        else:
            memory.write(PrefixKV(k, v, t))
        return injected, _retrieval_stats(k, injected, result, diagnostics)

    return _forward(weights, tokens, memory_hook)


def step_memoryless(weights: BackboneWeights, obs_tokens: Tensor) -> StepOutput:
    """Single-frame forward with no memory reads or writes."""
    config = weights.config
    tokens = _check_tokens(config, obs_tokens, config.prefix_tokens, "obs_tokens")
    return _forward(weights, tokens)


def step_stacked(
    weights: BackboneWeights, frame_window: typing.Sequence[Tensor]
) -> StepOutput:
    """
    Frame-stacking baseline: concatenate F frames along the token axis.

    Attention runs over F*S tokens, so score cost grows with F squared.
    """
    if len(frame_window) == 0:
        raise ConfigError("Frame window must contain at least one frame")
    config = weights.config
    frames = [
        _check_tokens(config, frame, config.prefix_tokens, f"frame_window[{i}]")
        for i, frame in enumerate(frame_window)
    ]
    if len({frame.shape[0] for frame in frames}) > 1:
        raise DimensionError("All frames in the window must share a batch size")
    return _forward(weights, np.concatenate(frames, axis=1))
