"""
Ablation grid: the full retrofit plus one cell per single design change.
"""

from concurrent.futures import ThreadPoolExecutor
import logging
import typing

import attrs
import numpy as np

from src.backbone import BackboneWeights
from src.harness.tasks import AliasingReport, AliasingTask, run_aliasing_experiment
from src.types import (
    ConfigError,
    InjectionMode,
    RetrievalMode,
    TempoFitConfig,
    default_memory_layers,
)

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = [
    "AblationCell",
    "AblationGrid",
    "AblationRow",
    "ABLATION_COLUMNS",
    "layer_subset",
    "run_ablation",
]


def layer_subset(name: str, num_layers: int) -> typing.Tuple[int, ...]:
    """
    Named memory layer subsets.

    `top` is the first half of the stack, `bottom` the second half,
    `intermediate` the default middle third and `all` every layer.
    """
    half = max(num_layers // 2, 1)
    subsets = {
        "all": tuple(range(num_layers)),
        "top": tuple(range(0, half)),
        "bottom": tuple(range(half, num_layers)) or (num_layers - 1,),
        "intermediate": default_memory_layers(num_layers),
    }
    try:
        return subsets[name]
    except KeyError:
        raise ConfigError(
            f"Unknown layer subset {name!r}, expected one of {sorted(subsets)}"
        ) from None


@attrs.define(slots=True, frozen=True)
class AblationCell:
    """One configuration of the grid."""

    name: str
    """Row label, e.g. 'full' or 'injection=concatenate'"""
    axis: str
    """Design axis the cell changes ('full' for the reference cell)"""
    value: str
    """Value taken on that axis"""
    tempofit: TempoFitConfig
    """Configuration evaluated by the cell"""


@attrs.define(slots=True, frozen=True)
class AblationGrid:
    """Ordered ablation cells."""

    cells: typing.Tuple[AblationCell, ...] = attrs.field(converter=tuple)

    def __attrs_post_init__(self):
        names = [cell.name for cell in self.cells]
        if len(set(names)) != len(names):
            raise ConfigError(f"Duplicate ablation cell names in {names}")

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self) -> typing.Iterator[AblationCell]:
        return iter(self.cells)

    def cell(self, name: str) -> AblationCell:
        for cell in self.cells:
            if cell.name == name:
                return cell
        raise KeyError(f"No ablation cell named {name!r}")

    @classmethod
    def one_change(
        cls,
        base: TempoFitConfig,
        num_layers: int,
        capacities: typing.Sequence[int] = (4, 8, 16, 32),
    ) -> "AblationGrid":
        """
        Build the grid around a full configuration.

        Each non-reference cell changes exactly one thing relative to `base`:
        the component set, the retrieval mode, the injection mode, the memory
        layer subset or the capacity.

        :param base: Full configuration (K/V memory with temporal bias enabled).
        :param num_layers: Backbone depth, used to resolve layer subsets.
        :param capacities: Capacities for the capacity axis.
        """
        full = attrs.evolve(base, enabled=True)
        cells = [AblationCell("full", "full", "kv+fgtb", full)]

        def add(axis: str, value: str, **changes: typing.Any) -> None:
            cells.append(
                AblationCell(f"{axis}={value}", axis, value, attrs.evolve(full, **changes))
            )

        add("component", "none", enabled=False)
        add("component", "kv_only", beta=0.0)

        for mode in RetrievalMode:
            if mode is not full.retrieval_mode:
                add("retrieval", mode.value, retrieval_mode=mode)
        for mode in InjectionMode:
            if mode is not full.injection_mode:
                add("injection", mode.value, injection_mode=mode)

        current_layers = full.resolve_layers(num_layers)
        for subset in ("all", "bottom", "top", "intermediate"):
            layers = layer_subset(subset, num_layers)
            if layers != current_layers:
                add("layers", subset, mem_layers=layers)

        for capacity in capacities:
            if capacity != full.capacity:
                add("capacity", str(capacity), capacity=capacity)
        return cls(cells)


@attrs.define(slots=True, frozen=True)
class AblationRow:
    """Metrics of one cell, averaged over the task suite."""

    cell: str
    axis: str
    value: str
    enabled: bool
    retrieval_mode: str
    injection_mode: str
    memory_layers: typing.Tuple[int, ...]
    capacity: int
    beta: float
    num_tasks: int
    hidden_divergence: float
    """Mean retrofitted hidden-state divergence at the alias step"""
    action_divergence: float
    memoryless_divergence: float
    """Mean memoryless hidden-state divergence (0 on valid tasks)"""
    disambiguated_fraction: float
    """Fraction of tasks with divergence above 1e-6"""
    weight_entropy: typing.Optional[float]
    recent_mass: typing.Optional[float]
    norm_drift: typing.Optional[float]
    max_attended_length: int

    def as_row(self) -> typing.Dict[str, typing.Any]:
        return attrs.asdict(self)


ABLATION_COLUMNS = tuple(field.name for field in attrs.fields(AblationRow))


def _mean_optional(values: typing.Sequence[typing.Optional[float]]) -> typing.Optional[float]:
    present = [value for value in values if value is not None]
    return float(np.mean(present)) if present else None


def _evaluate_cell(
    cell: AblationCell,
    tasks: typing.Sequence[AliasingTask],
    weights: BackboneWeights,
) -> AblationRow:
    reports: typing.List[AliasingReport] = [
        run_aliasing_experiment(task, weights, cell.tempofit) for task in tasks
    ]
    tempofit = cell.tempofit
    return AblationRow(
        cell=cell.name,
        axis=cell.axis,
        value=cell.value,
        enabled=tempofit.enabled,
        retrieval_mode=str(tempofit.retrieval_mode),
        injection_mode=str(tempofit.injection_mode),
        memory_layers=tempofit.resolve_layers(weights.config.num_layers),
        capacity=tempofit.capacity,
        beta=float(tempofit.beta),
        num_tasks=len(reports),
        hidden_divergence=float(
            np.mean([r.tempofit_hidden_divergence for r in reports])
        ),
        action_divergence=float(
            np.mean([r.tempofit_action_divergence for r in reports])
        ),
        memoryless_divergence=float(
            np.mean([r.memoryless_hidden_divergence for r in reports])
        ),
        disambiguated_fraction=float(np.mean([r.disambiguated for r in reports])),
        weight_entropy=_mean_optional([r.retrieval.weight_entropy for r in reports]),
        recent_mass=_mean_optional([r.retrieval.recent_mass for r in reports]),
        norm_drift=_mean_optional([r.retrieval.norm_drift for r in reports]),
        max_attended_length=max(r.retrieval.max_attended_length for r in reports),
    )


def _valid_cells(
    grid: AblationGrid, weights: BackboneWeights
) -> typing.List[AblationCell]:
    valid = []
    for cell in grid:
        try:
            cell.tempofit.resolve_layers(weights.config.num_layers)
            cell.tempofit.resolve_fgtb(weights.config)
        except ConfigError as exc:
            logger.warning(f"Skipping ablation cell {cell.name!r}: {exc}")
            continue
        valid.append(cell)
    return valid


def run_ablation(
    grid: AblationGrid,
    tasks: typing.Sequence[AliasingTask],
    weights: BackboneWeights,
    workers: int = 1,
) -> typing.List[AblationRow]:
    """
    Evaluate every valid cell of the grid on the task suite.

    Cells that do not resolve against the backbone are skipped with a warning.
    Each cell builds its own episode streams, so cells may run concurrently;
    rows come back in grid order.

    :param grid: Ablation grid.
    :param tasks: Aliasing tasks, shared read-only by all cells.
    :param weights: Frozen backbone weights, shared read-only by all cells.
    :param workers: Thread pool size. 1 runs cells serially.
    :return: One row per evaluated cell.
    """
    if not tasks:
        raise ConfigError("Ablation needs at least one aliasing task")
    if workers < 1:
        raise ConfigError(f"workers must be at least 1, got {workers}")

    cells = _valid_cells(grid, weights)
    logger.info(
        f"Running {len(cells)} ablation cells on {len(tasks)} tasks "
        f"({len(grid) - len(cells)} skipped, {workers} worker(s))"
    )
    if workers == 1:
        return [_evaluate_cell(cell, tasks, weights) for cell in cells]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [
            executor.submit(_evaluate_cell, cell, tasks, weights) for cell in cells
        ]
        return [future.result() for future in futures]
