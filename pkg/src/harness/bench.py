"""
Per-step latency and state-size benchmark: memoryless, retrofitted and frame-stacked.
"""

from collections import deque
import itertools
import logging
import time
import typing

import attrs
import numpy as np

from src.backbone import BackboneWeights, EpisodeStream, StepOutput
from src.backbone.core import step_memoryless, step_stacked
from src.numerics import Tensor
from src.types import ConfigError, TempoFitConfig

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = [
    "BenchEntry",
    "BenchReport",
    "BENCH_COLUMNS",
    "TIMING_FIELDS",
    "buffer_scalars",
    "bench_efficiency",
]

MEMORYLESS = "memoryless"
TEMPOFIT = "tempofit"
STACKED = "stacked"

TIMING_FIELDS = ("latency_ms", "latency_ratio")


@attrs.define(slots=True, frozen=True)
class BenchEntry:
    """Measurements of one method at one history length."""

    method: str
    """memoryless, tempofit or stacked"""
    history: int
    """Capacity C for tempofit, window F for stacked, 1 for memoryless"""
    latency_ms: float
    """Median wall-clock step latency"""
    latency_ratio: float
    """Latency relative to the memoryless median"""
    memory_scalars: int
    """Scalars held between steps (buffers or stacked past frames)"""
    peak_state_scalars: int
    """Persistent scalars plus the per-step KV tables"""
    attention_macs: int
    """Attention score multiply-accumulates per step"""
    retrieval_macs: int
    """Retrieval matching multiply-accumulates per step"""
    history_tokens: int
    """Past tokens reachable in one step"""

    def as_row(self) -> typing.Dict[str, typing.Any]:
        return attrs.asdict(self)


BENCH_COLUMNS = tuple(field.name for field in attrs.fields(BenchEntry))


@attrs.define(slots=True, frozen=True)
class BenchReport:
    entries: typing.Tuple[BenchEntry, ...] = attrs.field(converter=tuple)
    repetitions: int
    warmup: int
    batch_size: int

    def entry(self, method: str, history: int = 1) -> BenchEntry:
        for entry in self.entries:
            if entry.method == method and entry.history == history:
                return entry
        raise KeyError(f"No benchmark entry for {method} at history {history}")

    def ratio(self, method: str, history: int = 1) -> float:
        return self.entry(method, history).latency_ratio

    @property
    def baseline(self) -> BenchEntry:
        return self.entry(MEMORYLESS, 1)

    def rows(self) -> typing.List[typing.Dict[str, typing.Any]]:
        return [entry.as_row() for entry in self.entries]

    def deterministic_rows(self) -> typing.List[typing.Dict[str, typing.Any]]:
        """Rows without wall-clock fields."""
        return [
            {k: v for k, v in row.items() if k not in TIMING_FIELDS}
            for row in self.rows()
        ]

    def timing(self) -> typing.Dict[str, typing.Any]:
        return {
            "repetitions": self.repetitions,
            "warmup": self.warmup,
            "entries": [
                {
                    "method": entry.method,
                    "history": entry.history,
                    "latency_ms": entry.latency_ms,
                    "latency_ratio": entry.latency_ratio,
                }
                for entry in self.entries
            ],
        }


def buffer_scalars(
    num_memory_layers: int,
    capacity: int,
    batch_size: int,
    num_heads: int,
    prefix_tokens: int,
    head_dim: int,
) -> int:
    """Closed-form size of full memory buffers: |L_mem| * C * 2 * B * H * S * d."""
    return (
        num_memory_layers * capacity * 2 * batch_size * num_heads * prefix_tokens * head_dim
    )


def _median_ms(
    fn: typing.Callable[[], StepOutput], repetitions: int, warmup: int
) -> typing.Tuple[float, StepOutput]:
    output = None
    for _ in range(warmup):
        output = fn()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        output = fn()
        samples.append((time.perf_counter() - start) * 1e3)
    return float(np.median(samples)), typing.cast(StepOutput, output)


def bench_efficiency(
    weights: BackboneWeights,
    tempofit: TempoFitConfig,
    capacities: typing.Sequence[int],
    stack_sizes: typing.Sequence[int],
    repetitions: int,
    warmup: int = 5,
    batch_size: int = 1,
    seed: int = 0,
) -> BenchReport:
    """
    Time steady-state steps of every method.

    Retrofitted streams are filled to capacity before warm-up, so timed steps
    always retrieve over C*S history tokens. Stacked windows always hold F
    frames. Runs serially so measurements do not interfere.

    :param weights: Frozen backbone weights.
    :param tempofit: Base retrofit configuration; capacity is overridden per entry.
    :param capacities: Capacities C to measure.
    :param stack_sizes: Frame-stack sizes F to measure.
    :param repetitions: Timed steps per method (at least 10).
    :param warmup: Discarded steps before timing.
    :param batch_size: Batch size B of the synthetic frames.
    :param seed: Seed of the synthetic frames.
    :return: Benchmark report, memoryless entry first.
    """
    if repetitions < 10:
        raise ConfigError(f"Benchmarks need at least 10 repetitions, got {repetitions}")
    if warmup < 0:
        raise ConfigError(f"warmup must be non-negative, got {warmup}")
    if any(c < 1 for c in capacities) or any(f < 1 for f in stack_sizes):
        raise ConfigError("Capacities and stack sizes must be at least 1")

    config = weights.config
    rng = np.random.default_rng(seed)
    pool_size = max([*stack_sizes, 8])
    frames: typing.List[Tensor] = [
        rng.standard_normal((batch_size, config.prefix_tokens, config.model_dim))
        for _ in range(pool_size)
    ]
    frame_scalars = batch_size * config.prefix_tokens * config.model_dim

    source = itertools.cycle(frames)
    baseline_ms, baseline_out = _median_ms(
        lambda: step_memoryless(weights, next(source)), repetitions, warmup
    )
    entries = [
        BenchEntry(
            method=MEMORYLESS,
            history=1,
            latency_ms=baseline_ms,
            latency_ratio=1.0,
            memory_scalars=0,
            peak_state_scalars=baseline_out.kv_table_scalars,
            attention_macs=baseline_out.attention_macs,
            retrieval_macs=0,
            history_tokens=0,
        )
    ]
    logger.info(f"Memoryless baseline: {baseline_ms:.3f} ms/step")

    for capacity in capacities:
        stream = EpisodeStream(
            weights,
            attrs.evolve(tempofit, enabled=True, capacity=capacity),
            name=f"bench-c{capacity}",
            diagnostics=False,
        )
        source = itertools.cycle(frames)
        for _ in range(capacity):
            stream.step(next(source))
        latency, output = _median_ms(
            lambda: stream.step(next(source)), repetitions, warmup
        )
        entries.append(
            BenchEntry(
                method=TEMPOFIT,
                history=capacity,
                latency_ms=latency,
                latency_ratio=latency / baseline_ms,
                memory_scalars=stream.memory_scalars,
                peak_state_scalars=stream.peak_memory_scalars + output.kv_table_scalars,
                attention_macs=output.attention_macs,
                retrieval_macs=output.retrieval_macs,
                history_tokens=capacity * config.prefix_tokens,
            )
        )
        logger.info(f"TempoFit C={capacity}: {latency:.3f} ms/step")

    for stack in stack_sizes:
        source = itertools.cycle(frames)
        window: typing.Deque[Tensor] = deque(
            (next(source) for _ in range(stack)), maxlen=stack
        )

        def stacked_step() -> StepOutput:
            window.append(next(source))
            return step_stacked(weights, list(window))

        latency, output = _median_ms(stacked_step, repetitions, warmup)
        entries.append(
            BenchEntry(
                method=STACKED,
                history=stack,
                latency_ms=latency,
                latency_ratio=latency / baseline_ms,
                memory_scalars=(stack - 1) * frame_scalars,
                peak_state_scalars=(stack - 1) * frame_scalars + output.kv_table_scalars,
                attention_macs=output.attention_macs,
                retrieval_macs=0,
                history_tokens=(stack - 1) * config.prefix_tokens,
            )
        )
        logger.info(f"Stacked F={stack}: {latency:.3f} ms/step")

    return BenchReport(
        entries=entries, repetitions=repetitions, warmup=warmup, batch_size=batch_size
    )
