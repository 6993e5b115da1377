"""
Synthetic state-aliasing tasks.

Two observation streams share every frame except one earlier frame, so the
frame at the alias step is bitwise identical in both. A memoryless policy
cannot tell the streams apart at that step; a policy with temporal memory can,
as long as the differing frame is still within its reach.
"""

import logging
import typing

import attrs
import numpy as np

from src.backbone import BackboneWeights, EpisodeStream, StepOutput, divergence
from src.backbone.core import step_memoryless
from src.numerics import Tensor
from src.types import ConfigError, DimensionError, TempoFitConfig

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = [
    "AliasingTask",
    "AliasingReport",
    "RetrievalSummary",
    "ALIASING_COLUMNS",
    "gen_aliasing_task",
    "gen_task_suite",
    "summarise_retrieval",
    "run_aliasing_experiment",
]


def _frames(value: typing.Sequence[Tensor]) -> typing.Tuple[Tensor, ...]:
    frames = []
    for frame in value:
        arr = np.array(frame, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        frames.append(arr)
    return tuple(frames)


@attrs.define(slots=True, frozen=True)
class AliasingTask:
    """A pair of observation streams that coincide at the alias step."""

    seed: int
    """Seed the streams were drawn with"""
    episode_length: int
    """Frames per stream T"""
    alias_step: int
    """Step t* at which both streams observe identical frames"""
    differing_step: int
    """Only step at which the streams differ"""
    obs_a: typing.Tuple[Tensor, ...] = attrs.field(converter=_frames, eq=False)
    """Frames of stream A, each (B, S, model_dim)"""
    obs_b: typing.Tuple[Tensor, ...] = attrs.field(converter=_frames, eq=False)
    """Frames of stream B, each (B, S, model_dim)"""

    def __attrs_post_init__(self):
        if not (1 <= self.alias_step < self.episode_length):
            raise ConfigError(
                f"alias_step must satisfy 1 <= t* < T, got t*={self.alias_step}, "
                f"T={self.episode_length}"
            )
        if len(self.obs_a) != self.episode_length or len(self.obs_b) != self.episode_length:
            raise DimensionError(
                f"Both streams need {self.episode_length} frames, got "
                f"{len(self.obs_a)} and {len(self.obs_b)}"
            )
        if not np.array_equal(self.obs_a[self.alias_step], self.obs_b[self.alias_step]):
            raise ConfigError("Streams must observe identical frames at the alias step")
        if not any(
            not np.array_equal(self.obs_a[tau], self.obs_b[tau])
            for tau in range(self.alias_step)
        ):
            raise ConfigError("Streams must differ at some step before the alias step")

    @property
    def alias_gap(self) -> int:
        """Frames between the differing frame and the alias step."""
        return self.alias_step - self.differing_step


def gen_aliasing_task(
    seed: int,
    episode_length: int,
    alias_step: int,
    prefix_tokens: int,
    model_dim: int,
    batch_size: int = 1,
    differing_step: typing.Optional[int] = None,
) -> AliasingTask:
    """
    Draw an aliasing task.

    Frames are standard normal. Stream B copies stream A except at
    `differing_step`, where it gets an independent draw.

    :param seed: RNG seed. Equal seeds give bitwise-equal tasks.
    :param episode_length: Frames per stream T.
    :param alias_step: Alias step t*, with 1 <= t* < T.
    :param prefix_tokens: Tokens per frame S.
    :param model_dim: Token width.
    :param batch_size: Batch size B.
    :param differing_step: Step of the differing frame. Defaults to t* - 1.
    """
    if not (1 <= alias_step < episode_length):
        raise ConfigError(
            f"alias_step must satisfy 1 <= t* < T, got t*={alias_step}, T={episode_length}"
        )
    if differing_step is None:
        differing_step = alias_step - 1
    if not (0 <= differing_step < alias_step):
        raise ConfigError(
            f"differing_step must satisfy 0 <= step < t*, got {differing_step} "
            f"for t*={alias_step}"
        )

    rng = np.random.default_rng(seed)
    shape = (batch_size, prefix_tokens, model_dim)
    obs_a = [rng.standard_normal(shape) for _ in range(episode_length)]
    obs_b = list(obs_a)
    obs_b[differing_step] = rng.standard_normal(shape)
    return AliasingTask(
        seed=seed,
        episode_length=episode_length,
        alias_step=alias_step,
        differing_step=differing_step,
        obs_a=obs_a,
        obs_b=obs_b,
    )


def gen_task_suite(
    seed: int,
    count: int,
    episode_length: int,
    alias_step: int,
    prefix_tokens: int,
    model_dim: int,
    batch_size: int = 1,
    differing_step: typing.Optional[int] = None,
) -> typing.List[AliasingTask]:
    """`count` tasks with consecutive seeds starting at `seed`."""
    return [
        gen_aliasing_task(
            seed + offset,
            episode_length,
            alias_step,
            prefix_tokens,
            model_dim,
            batch_size=batch_size,
            differing_step=differing_step,
        )
        for offset in range(count)
    ]


@attrs.define(slots=True, frozen=True)
class RetrievalSummary:
    """Retrieval statistics of one step, averaged over the layers that retrieved."""

    weight_entropy: typing.Optional[float] = None
    recent_mass: typing.Optional[float] = None
    norm_drift: typing.Optional[float] = None
    max_attended_length: int = 0


def _mean(values: typing.Iterable[typing.Optional[float]]) -> typing.Optional[float]:
    present = [value for value in values if value is not None]
    return float(np.mean(present)) if present else None


def summarise_retrieval(output: StepOutput) -> RetrievalSummary:
    retrieved = [layer for layer in output.layers if layer.retrieved]
    return RetrievalSummary(
        weight_entropy=_mean(layer.weight_entropy for layer in retrieved),
        recent_mass=_mean(layer.recent_mass for layer in retrieved),
        norm_drift=_mean(layer.norm_drift for layer in retrieved),
        max_attended_length=output.max_attended_length,
    )


@attrs.define(slots=True, frozen=True)
class AliasingReport:
    """Hidden-state and action divergence between the two streams at the alias step."""

    seed: int
    alias_step: int
    differing_step: int
    capacity: int
    effective_horizon: int
    """Past frames the retrofitted stream can still be influenced by"""
    memoryless_hidden_divergence: float
    memoryless_action_divergence: float
    tempofit_hidden_divergence: float
    tempofit_action_divergence: float
    retrieval: RetrievalSummary = attrs.field(factory=RetrievalSummary)
    """Retrieval statistics of stream A at the alias step"""

    @property
    def within_horizon(self) -> bool:
        return 0 < self.alias_step - self.differing_step <= self.effective_horizon

    @property
    def disambiguated(self) -> bool:
        return self.tempofit_hidden_divergence > 1e-6

    def as_row(self) -> typing.Dict[str, typing.Any]:
        return {
            "seed": self.seed,
            "alias_step": self.alias_step,
            "differing_step": self.differing_step,
            "capacity": self.capacity,
            "effective_horizon": self.effective_horizon,
            "within_horizon": self.within_horizon,
            "memoryless_hidden_divergence": self.memoryless_hidden_divergence,
            "memoryless_action_divergence": self.memoryless_action_divergence,
            "tempofit_hidden_divergence": self.tempofit_hidden_divergence,
            "tempofit_action_divergence": self.tempofit_action_divergence,
            "disambiguated": self.disambiguated,
            "weight_entropy": self.retrieval.weight_entropy,
            "recent_mass": self.retrieval.recent_mass,
            "norm_drift": self.retrieval.norm_drift,
            "max_attended_length": self.retrieval.max_attended_length,
        }


ALIASING_COLUMNS = (
    "seed",
    "alias_step",
    "differing_step",
    "capacity",
    "effective_horizon",
    "within_horizon",
    "memoryless_hidden_divergence",
    "memoryless_action_divergence",
    "tempofit_hidden_divergence",
    "tempofit_action_divergence",
    "disambiguated",
    "weight_entropy",
    "recent_mass",
    "norm_drift",
    "max_attended_length",
)


def run_aliasing_experiment(
    task: AliasingTask,
    weights: BackboneWeights,
    tempofit: TempoFitConfig,
) -> AliasingReport:
    """
    Run both streams up to the alias step, memoryless and retrofitted.

    The memoryless run only sees the alias frame. The retrofitted run steps
    through frames 0..t* on a fresh stream per observation sequence.
    """
    t_star = task.alias_step
    plain_a = step_memoryless(weights, task.obs_a[t_star])
    plain_b = step_memoryless(weights, task.obs_b[t_star])

    stream_a = EpisodeStream(weights, tempofit, name=f"task{task.seed}-a")
    stream_b = EpisodeStream(weights, tempofit, name=f"task{task.seed}-b")
    out_a = stream_a.run(task.obs_a[: t_star + 1], start=0)[-1]
    out_b = stream_b.run(task.obs_b[: t_star + 1], start=0)[-1]

    plain_hidden, plain_action = divergence(plain_a, plain_b)
    hidden, action = divergence(out_a, out_b)
    report = AliasingReport(
        seed=task.seed,
        alias_step=t_star,
        differing_step=task.differing_step,
        capacity=tempofit.capacity,
        effective_horizon=stream_a.effective_horizon,
        memoryless_hidden_divergence=plain_hidden,
        memoryless_action_divergence=plain_action,
        tempofit_hidden_divergence=hidden,
        tempofit_action_divergence=action,
        retrieval=summarise_retrieval(out_a),
    )
    logger.debug(
        f"Task {task.seed}: divergence memoryless={plain_hidden:.3e} "
        f"tempofit={hidden:.3e} (gap {task.alias_gap}, horizon {report.effective_horizon})"
    )
    return report
