"""
Report headers, CSV tables and JSON report documents.
"""

import csv
import logging
from pathlib import Path
import typing

from src.config.core import ConfigurationState
from src.storages import JSONFileStorage
from src.types import ReportWriteError

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = [
    "REPORT_SCHEMA_VERSION",
    "DISCLAIMER",
    "report_header",
    "format_cell",
    "write_csv",
    "write_report",
    "strip_timing",
]

REPORT_SCHEMA_VERSION = "1.0"

DISCLAIMER = (
    "Desk-scale proxy metrics on a randomly initialised toy backbone. Task success "
    "rates are not measured; hidden-state divergence, retrieval-weight entropy and "
    "norm drift stand in for them. Latencies are hardware specific."
)


def report_header(
    kind: str, state: typing.Optional[ConfigurationState] = None
) -> typing.Dict[str, typing.Any]:
    """
    Header shared by every JSON report.

    :param kind: Report kind (alias, ablate, bench, trace).
    :param state: Configuration the run used. Flattened into the header.
    """
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "report": kind,
        "disclaimer": DISCLAIMER,
        "config": state.flatten() if state is not None else {},
    }


def format_cell(value: typing.Any) -> str:
    """Render one CSV cell. Floats use `repr` so values round-trip exactly."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(format_cell(item) for item in value)
    return str(value)


def write_csv(
    path: typing.Union[str, Path],
    columns: typing.Sequence[str],
    rows: typing.Iterable[typing.Mapping[str, typing.Any]],
) -> Path:
    """
    Write rows to a CSV file with a fixed column order.

    :param path: Destination file. Parent directories are created.
    :param columns: Column names, in output order.
    :param rows: Row mappings. Keys outside `columns` are ignored.
    :return: The written path.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            count = 0
            for row in rows:
                writer.writerow([format_cell(row.get(column)) for column in columns])
                count += 1
    except OSError as exc:
        raise ReportWriteError(f"Cannot write CSV report {path}: {exc}") from exc
    logger.info(f"Wrote {count} rows to {path}")
    return path


def write_report(
    storage: JSONFileStorage,
    name: str,
    document: typing.Dict[str, typing.Any],
) -> Path:
    """
    Persist a JSON report document, replacing any previous one of the same name.

    :return: Path of the written file.
    """
    key = storage.get_key(name)
    if storage.read(key) is not None:
        storage.update(key, document, overwrite=True)
    else:
        storage.create(key, document)
    path = storage.path_for(key)
    logger.info(f"Wrote report {path}")
    return path


def strip_timing(document: typing.Dict[str, typing.Any]) -> typing.Dict[str, typing.Any]:
    """Copy of a report without wall-clock fields, for determinism comparisons."""
    return {key: value for key, value in document.items() if key != "timing"}
