import numpy as np
import orjson
import pytest

from src.harness import strip_timing, write_report
from src.storages import InMemoryStorage, JSONFileStorage
from src.types import ReportWriteError


def test_get_key_is_namespaced():
    storage = InMemoryStorage("reports")
    assert storage.get_key("alias") == "reports.alias"
    assert InMemoryStorage("other").get_key("alias") != storage.get_key("alias")
    with pytest.raises(TypeError):
        storage.get_key("alias", 1)


def test_in_memory_crud():
    storage = InMemoryStorage("ns")
    storage.create("a", {"x": 1})
    with pytest.raises(KeyError):
        storage.create("a", {"x": 2})
    storage.update("a", {"y": 2})
    assert storage.read("a") == {"x": 1, "y": 2}
    storage.update("a", {"z": 3}, overwrite=True)
    assert storage.read("a") == {"z": 3}
    storage.delete("a")
    assert storage.read("a") is None
    with pytest.raises(KeyError):
        storage.delete("a")
    with pytest.raises(KeyError):
        storage.update("a", {})


def test_json_file_storage_crud(tmp_path):
    storage = JSONFileStorage(tmp_path / "reports", "run")
    key = storage.get_key("alias")
    assert storage.read(key) is None
    storage.create(key, {"b": 1, "a": [1, 2]})
    storage.update(key, {"c": None})
    assert storage.read(key) == {"a": [1, 2], "b": 1, "c": None}
    assert storage.path_for(key) == tmp_path / "reports" / "run.alias.json"
    storage.delete(key)
    with pytest.raises(KeyError):
        storage.delete(key)
    with pytest.raises(KeyError):
        storage.update(key, {})


def test_json_documents_are_sorted_and_byte_stable(tmp_path):
    storage = JSONFileStorage(tmp_path, "run")
    document = {"z": 1.5, "a": {"y": 2, "b": 0.1}}
    first = write_report(storage, "report", document)
    payload = first.read_bytes()
    assert payload.index(b'"a"') < payload.index(b'"z"')
    second = write_report(storage, "report", dict(reversed(list(document.items()))))
    assert first == second
    assert second.read_bytes() == payload


def test_numpy_values_are_serialised(tmp_path):
    storage = JSONFileStorage(tmp_path, "run")
    storage.create("arr", {"weights": np.array([0.25, 0.75])})
    assert orjson.loads(storage.path_for("arr").read_bytes()) == {"weights": [0.25, 0.75]}


def test_unserialisable_documents_raise_report_write_error(tmp_path):
    storage = JSONFileStorage(tmp_path, "run")
    with pytest.raises(ReportWriteError):
        storage.create("bad", {"value": object()})


def test_unwritable_directory_raises_report_write_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportWriteError):
        JSONFileStorage(blocker / "reports", "run")


def test_strip_timing_drops_only_wall_clock_section():
    document = {"report": "bench", "rows": [1], "timing": {"latency_ms": 1.0}}
    assert strip_timing(document) == {"report": "bench", "rows": [1]}
    assert "timing" in document
