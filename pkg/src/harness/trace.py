"""
Retrieval weight traces.
"""

import logging
from pathlib import Path
import typing

import attrs
import numpy as np

from src.backbone import BackboneWeights, EpisodeStream
from src.harness.reports import write_csv
from src.numerics import Tensor
from src.types import TempoFitConfig

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = ["TraceRow", "TraceRecorder", "TRACE_COLUMNS", "trace_dump", "trace_stream"]


@attrs.define(slots=True, frozen=True)
class TraceRow:
    """Retrieval weight mass one query token put on one past timestep."""

    t: int
    layer: int
    batch: int
    head: int
    query_token: int
    history_tau: int
    weight: float

    def as_row(self) -> typing.Dict[str, typing.Any]:
        return attrs.asdict(self)


TRACE_COLUMNS = tuple(field.name for field in attrs.fields(TraceRow))


def _rows_for(
    t: int, layer: int, weights: Tensor, token_timesteps: typing.Sequence[int]
) -> typing.List[TraceRow]:
    taus, starts = np.unique(np.asarray(token_timesteps), return_index=True)
    # Tokens of one timestep are contiguous, so summing runs gives per-step mass
    mass = np.add.reduceat(weights, starts, axis=-1)
    batch, heads, queries, _ = mass.shape
    return [
        TraceRow(
            t=t,
            layer=layer,
            batch=b,
            head=h,
            query_token=q,
            history_tau=int(tau),
            weight=float(mass[b, h, q, i]),
        )
        for b in range(batch)
        for h in range(heads)
        for q in range(queries)
        for i, tau in enumerate(taus)
    ]


class TraceRecorder:
    """
    Collects retrieval weights from `stream.retrieval` events.

    Steps that retrieve nothing (empty memory) emit no event and add no rows.
    """

    event = "stream.retrieval"

    def __init__(self) -> None:
        self._rows: typing.List[TraceRow] = []

    def __call__(self, event: str, data: typing.Optional[typing.Dict]) -> None:
        if not data:
            return
        self._rows.extend(
            _rows_for(data["t"], data["layer"], data["weights"], data["token_timesteps"])
        )

    @property
    def rows(self) -> typing.List[TraceRow]:
        return list(self._rows)

    def attach(self, stream: EpisodeStream) -> "TraceRecorder":
        stream.subscribe(self.event, self)
        return self

    def detach(self, stream: EpisodeStream) -> "TraceRecorder":
        stream.unsubscribe(self.event, self)
        return self

    def clear(self) -> None:
        self._rows.clear()


def trace_stream(
    weights: BackboneWeights,
    tempofit: TempoFitConfig,
    observations: typing.Sequence[Tensor],
    name: str = "trace",
) -> typing.List[TraceRow]:
    """Run one episode on a fresh stream and return its retrieval trace."""
    stream = EpisodeStream(weights, tempofit, name=name)
    recorder = TraceRecorder().attach(stream)
    stream.run(observations, start=0)
    recorder.detach(stream)
    return recorder.rows


def trace_dump(
    records: typing.Iterable[TraceRow], path: typing.Union[str, Path]
) -> Path:
    """
    Write trace rows to CSV.

    Within every (t, layer, batch, head, query_token) group the weights sum to 1.

    :param records: Trace rows.
    :param path: Destination file.
    :return: The written path.
    """
    return write_csv(path, TRACE_COLUMNS, (record.as_row() for record in records))
