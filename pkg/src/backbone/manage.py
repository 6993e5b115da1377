"""
Episode streams: per-stream memory ownership, step ordering and event fan-out.
"""

import logging
import typing

import numpy as np
from typing_extensions import Self

from src.backbone.core import BackboneWeights, StepOutput, step
from src.memory import LayerMemory
from src.numerics import Tensor
from src.types import (
    EventCallback,
    EventSubscription,
    OrderingError,
    TempoFitConfig,
)

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = ["EpisodeStream", "divergence"]


# One stream per episode. Weights and config are shared read-only between
# streams; the memory buffers belong to exactly one stream.


class EpisodeStream:
    """Runs a frozen backbone over one observation stream with temporal memory."""

    def __init__(
        self,
        weights: BackboneWeights,
        tempofit: typing.Optional[TempoFitConfig] = None,
        name: typing.Optional[str] = None,
        diagnostics: bool = True,
    ) -> None:
        """
        Initialize the stream.

        :param weights: Frozen backbone weights (shared, never mutated).
        :param tempofit: Retrofit configuration. Defaults to `TempoFitConfig()`.
        :param name: Optional stream name used in logs and events.
        :param diagnostics: Collect per-layer retrieval statistics on every step.
        """
        self.weights = weights
        self.tempofit = tempofit or TempoFitConfig()
        self.name = name or f"stream-{id(self)}"
        self.diagnostics = diagnostics
        self._memory_layers = self.tempofit.resolve_layers(weights.config.num_layers)
        self._memories: typing.Dict[int, LayerMemory] = {
            index: LayerMemory(index, self.tempofit.capacity)
            for index in self._memory_layers
        }
        self._subscriptions: typing.List[EventSubscription] = []
        self._last_step: typing.Optional[int] = None
        self._peak_memory_scalars = 0

    @property
    def memories(self) -> typing.Mapping[int, LayerMemory]:
        return dict(self._memories)

    @property
    def memory_layers(self) -> typing.Tuple[int, ...]:
        return self._memory_layers

    @property
    def last_step(self) -> typing.Optional[int]:
        return self._last_step

    @property
    def effective_horizon(self) -> int:
        """
        Number of past frames that can still influence the current step.

        Raw keys of a deeper memory layer already carry what shallower memory
        layers retrieved at the same step, so reach compounds across layers.
        """
        if not self.tempofit.enabled:
            return 0
        return len(self._memory_layers) * self.tempofit.capacity

    @property
    def memory_scalars(self) -> int:
        """Scalars currently held across all buffers."""
        return sum(memory.scalar_count for memory in self._memories.values())

    @property
    def peak_memory_scalars(self) -> int:
        return self._peak_memory_scalars

    def subscribe(self, event: str, callback: EventCallback):
        """
        Subscribe to stream events matching the given pattern.

        :param event: Event pattern to match:
            - "*" for all events
            - "stream.*" for prefix matching
            - "stream.retrieval" for exact event
            - Regex patterns are also supported

        :param callback: Function to call when event matches
        """
        self.unsubscribe(event, callback)
        self._subscriptions.append(EventSubscription(event, callback))

    def unsubscribe(self, event: str, callback: EventCallback):
        """Remove a subscription for the given event and callback."""
        self._subscriptions = [
            sub
            for sub in self._subscriptions
            if not (sub.event == event and sub.callback == callback)
        ]

    def notify(self, event: str, data: typing.Optional[typing.Dict] = None):
        """
        Notify all subscribers whose event patterns match the given event
        (sequentially, as they registered).
        """
        if data is not None and not isinstance(data, dict):
            raise ValueError("Data must be a dictionary or None")

        for subscription in self._subscriptions:
            if subscription.matches(event):
                try:
                    subscription.callback(event, data)
                except Exception as exc:
                    logger.error(
                        f"Error notifying observer for event '{event}': {exc}",
                        exc_info=True,
                    )

    def step(self, obs_tokens: Tensor, t: typing.Optional[int] = None) -> StepOutput:
        """
        Advance the stream by one timestep.

        :param obs_tokens: Observation tokens (B, S, model_dim).
        :param t: Timestep. Defaults to one past the previous step (0 for the first).
        :return: Step output.
        """
        if t is None:
            t = 0 if self._last_step is None else self._last_step + 1
        if self._last_step is not None and t <= self._last_step:
            raise OrderingError(
                f"{self.name}: step t={t} does not follow previous step {self._last_step}"
            )

        output = step(
            self.weights,
            self.tempofit,
            self._memories,
            obs_tokens,
            t,
            diagnostics=self.diagnostics,
        )
        self._last_step = t
        self._peak_memory_scalars = max(self._peak_memory_scalars, self.memory_scalars)

        for layer in output.layers:
            if layer.retrieval is not None:
                self.notify(
                    "stream.retrieval",
                    {
                        "stream": self.name,
                        "t": t,
                        "layer": layer.layer_index,
                        "weights": layer.retrieval.weights,
                        "token_timesteps": layer.retrieval.token_timesteps,
                    },
                )
        self.notify("stream.step", {"stream": self.name, "t": t, "output": output})
        return output

    def run(
        self,
        observations: typing.Iterable[Tensor],
        start: typing.Optional[int] = None,
    ) -> typing.List[StepOutput]:
        """
        Step through a sequence of observations at consecutive timesteps.

        :param observations: Observation tokens, one per step.
        :param start: First timestep. Defaults to continuing after the last step.
        :return: Outputs in step order.
        """
        outputs = []
        for offset, obs in enumerate(observations):
            t = None if start is None else start + offset
            outputs.append(self.step(obs, t))
        return outputs

    def reset(self) -> Self:
        """Clear all buffers at an episode boundary."""
        for memory in self._memories.values():
            memory.reset()
        self._last_step = None
        self._peak_memory_scalars = 0
        self.notify("stream.reset", {"stream": self.name})
        logger.debug(f"{self.name}: memory reset")
        return self

    def dump_state(self) -> typing.Dict[str, typing.Any]:
        """Buffer metadata of every memory layer, for JSON debug dumps."""
        return {
            "stream": self.name,
            "last_step": self._last_step,
            "enabled": self.tempofit.enabled,
            "memory_layers": list(self._memory_layers),
            "buffers": [
                self._memories[index].dump_state() for index in self._memory_layers
            ],
        }


def divergence(a: StepOutput, b: StepOutput) -> typing.Tuple[float, float]:
    """Frobenius distance between two outputs' hidden states and actions."""
    return (
        float(np.linalg.norm(a.hidden - b.hidden)),
        float(np.linalg.norm(a.action - b.action)),
    )

