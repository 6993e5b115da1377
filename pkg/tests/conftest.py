import typing

import numpy as np
import pytest

from src.backbone import BackboneWeights, backbone_init
from src.memory import LayerMemory, PrefixKV
from src.types import BackboneConfig


@pytest.fixture
def desk_config() -> BackboneConfig:
    """Small backbone: L=4, H=2, d=8, S=4. Default memory layers are (1,)."""
    return BackboneConfig(
        num_layers=4,
        num_heads=2,
        head_dim=8,
        prefix_tokens=4,
        seed=7,
        ffn_multiplier=2,
        action_dim=3,
    )


@pytest.fixture
def desk_weights(desk_config: BackboneConfig) -> BackboneWeights:
    return backbone_init(desk_config)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def make_frames(
    rng: np.random.Generator,
    config: BackboneConfig,
    count: int,
    batch_size: int = 1,
) -> typing.List[np.ndarray]:
    shape = (batch_size, config.prefix_tokens, config.model_dim)
    return [rng.standard_normal(shape) for _ in range(count)]


def filled_memory(
    rng: np.random.Generator,
    timesteps: typing.Sequence[int],
    shape: typing.Tuple[int, int, int, int] = (1, 2, 3, 4),
    capacity: typing.Optional[int] = None,
) -> LayerMemory:
    memory = LayerMemory(0, capacity or max(len(timesteps), 1))
    for tau in timesteps:
        memory.write(
            PrefixKV(rng.standard_normal(shape), rng.standard_normal(shape), tau)
        )
    return memory
