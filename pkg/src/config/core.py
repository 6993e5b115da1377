"""
Main configuration management module.
"""

from pathlib import Path
import logging
import typing

import attrs
import orjson
from typing_extensions import Self

from src.storages import StorageBackend
from src.types import (
    BackboneConfig,
    ConfigError,
    HarnessConfig,
    TempoFitConfig,
    converter,
)

logger = logging.getLogger(__name__)  # type: ignore[attr-defined]

__all__ = ["Configuration", "ConfigurationState", "SCHEMA_VERSION", "structure_state"]

SCHEMA_VERSION = "1.0"


def _flatten(obj: typing.Any, parent_key: str = "", sep: str = ".") -> dict:
    """Recursively flatten a nested dictionary"""
    items = []
    if isinstance(obj, dict):
        for k, v in obj.items():
            new_key = f"{parent_key}{sep}{k}" if parent_key else k
            if isinstance(v, dict):
                items.extend(_flatten(v, new_key, sep=sep).items())
            elif isinstance(v, (list, tuple)):
                items.append((new_key, list(v)))
            else:
                items.append((new_key, v))
    else:
        items.append((parent_key, obj))
    return dict(items)


@attrs.define(slots=True, frozen=True)
class ConfigurationState:
    """Complete configuration state"""

    backbone: BackboneConfig = attrs.field(factory=BackboneConfig)
    """Toy backbone definition"""
    tempofit: TempoFitConfig = attrs.field(factory=TempoFitConfig)
    """Retrofit hyperparameters"""
    harness: HarnessConfig = attrs.field(factory=HarnessConfig)
    """Experiment harness settings"""
    version: str = SCHEMA_VERSION
    """Configuration schema version"""

    def flatten(self) -> typing.Dict[str, typing.Any]:
        """Get all configurations as a flat dictionary with dot notation keys"""
        return _flatten(converter.unstructure(self))

    def get(self, path: str, /) -> typing.Any:
        """Get nested configuration using dot notation (e.g., 'tempofit.capacity')"""
        obj: typing.Any = self
        for part in path.split("."):
            if hasattr(obj, part):
                obj = getattr(obj, part)
            else:
                raise ConfigError(f"Invalid configuration path: {path}")
        return obj

    def update(self, path: str, /, **kwargs: typing.Any) -> Self:
        """
        Update a nested configuration section using dot notation (e.g., 'tempofit')

        Returns a new `ConfigurationState` instance with the updated values.
        Section validation runs again on the rebuilt records.
        """
        if path == ".":
            return attrs.evolve(self, **kwargs)

        parts = path.split(".")
        target = self.get(path)
        if not attrs.has(type(target)):
            raise ConfigError(f"Configuration path {path!r} is not a section")

        try:
            new_obj = attrs.evolve(target, **kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid update for section {path!r}: {exc}") from exc

        # Rebuild the full configuration state with the updated nested object
        for index in range(len(parts) - 1, 0, -1):
            parent = self.get(".".join(parts[:index]))
            new_obj = attrs.evolve(parent, **{parts[index]: new_obj})
        return attrs.evolve(self, **{parts[0]: new_obj})


class Configuration:
    """Run configuration with optional persistence via storage backends."""

    def __init__(
        self,
        id: str,
        storages: typing.Optional[typing.List[StorageBackend]] = None,
        state: typing.Optional[ConfigurationState] = None,
    ) -> None:
        """
        Initialize configuration.

        :param id: Unique identifier for the configuration (e.g., the run name)
        :param storages: Storage backends to load from and save to, tried in order.
        :param state: Initial state. When omitted, storages are consulted and
            defaults are used if none holds a configuration.
        """
        self.id = id
        self.storages = storages or []
        if state is not None:
            self._state = state
        else:
            self._state = ConfigurationState()
            self.load()
        logger.debug(f"Configuration initialized with ID: {self.id}")

    @property
    def state(self) -> ConfigurationState:
        """Get current configuration state"""
        return self._state

    def get(self, path: str, /) -> typing.Any:
        """Get nested configuration using dot notation (e.g., 'tempofit.beta')"""
        return self._state.get(path)

    def update(self, path: str, /, **kwargs: typing.Any) -> None:
        """Update nested configuration using dot notation (e.g., 'tempofit')"""
        self._state = self._state.update(path, **kwargs)
        logger.debug(f"Configuration {path!r} updated with {kwargs}")

    def load(self, storage: typing.Optional[StorageBackend] = None) -> None:
        """
        Load configuration from storages

        Tries each storage backend in order until a valid configuration is found.
        """
        storages = [storage] if storage else self.storages
        for backend in storages:
            key = backend.get_key(self.id)
            data = backend.read(key)
            if data:
                try:
                    self._state = structure_state(data)
                    logger.debug(
                        f"Loaded configuration from storage: {type(backend).__name__}"
                    )
                    return
                except ConfigError:
                    raise
                except Exception as exc:
                    logger.error(
                        f"Failed to load configuration from storage: {exc}",
                        exc_info=True,
                    )
        logger.info("No existing configuration found; using defaults")

    def save(self) -> None:
        """Save current configuration to all storages"""
        data = converter.unstructure(self._state)
        for storage in self.storages:
            key = storage.get_key(self.id)
            try:
                if storage.read(key):
                    storage.update(key, data, overwrite=True)
                else:
                    storage.create(key, data)
                logger.debug(
                    f"Saved configuration to storage: {type(storage).__name__}"
                )
            except Exception as exc:
                logger.error(
                    f"Failed to save configuration to storage: {exc}", exc_info=True
                )

    def export(self) -> str:
        """Export configuration as JSON string"""
        data = converter.unstructure(self._state)
        return orjson.dumps(
            data, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS
        ).decode()

    def import_(self, json_str: typing.Union[str, bytes]) -> None:
        """Replace the configuration with one parsed from a JSON string"""
        try:
            data = orjson.loads(json_str)
        except orjson.JSONDecodeError as exc:
            raise ConfigError(f"Invalid JSON configuration: {exc}") from exc
        self._state = structure_state(data)

    @classmethod
    def from_file(
        cls,
        path: typing.Union[str, Path],
        storages: typing.Optional[typing.List[StorageBackend]] = None,
    ) -> "Configuration":
        """
        Build a configuration from a JSON file.

        :param path: Path to the JSON configuration.
        :param storages: Storage backends for later `save` calls.
        """
        path = Path(path)
        try:
            text = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"Cannot read configuration file {path}: {exc}") from exc
        config = cls(path.stem, storages=storages, state=ConfigurationState())
        config.import_(text)
        logger.info(f"Loaded configuration from {path}")
        return config


def structure_state(data: typing.Any) -> ConfigurationState:
    """Structure raw JSON data into a `ConfigurationState`, as `ConfigError` on failure."""
    if not isinstance(data, dict):
        raise ConfigError("Configuration root must be a JSON object")
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"Unsupported configuration version {version!r}, expected {SCHEMA_VERSION!r}"
        )
    try:
        return converter.structure(data, ConfigurationState)
    except ConfigError:
        raise
    except Exception as exc:
        nested = _find_config_error(exc)
        if nested is not None:
            raise nested from exc
        raise ConfigError(f"Invalid configuration: {exc}") from exc


def _find_config_error(exc: BaseException) -> typing.Optional[ConfigError]:
    # cattrs wraps validation failures in (nested) exception groups
    if isinstance(exc, ConfigError):
        return exc
    for inner in getattr(exc, "exceptions", ()):
        found = _find_config_error(inner)
        if found is not None:
            return found
    return None
