"""Shared fixtures: a small model footprint plus rendered sequence data.

The session-scoped weights are treated as read-only by tests; anything
that needs to mutate parameters builds its own ModelWeights.
"""

import numpy as np
import pytest

from semvos.config import EngineConfig
from semvos.synthetic import SyntheticSpec, gen_synthetic
from semvos.weights import ModelWeights


def small_config(**overrides) -> EngineConfig:
    """A config small enough that full forwards run in well under a second."""
    base = dict(
        base_size=32, scales=[1.0], flip_fusion=False, seed=0,
        memory_interval=3, memory_capacity=4,
        channels=8, patch=8, vit_blocks=1, vit_heads=2,
        pyramid_channels=[4, 6, 8], deform_heads=2, deform_points=2,
        fusion_depth=1, memory_key_channels=6, memory_value_channels=8,
        query_count=3,
    )
    base.update(overrides)
    return EngineConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_cfg() -> EngineConfig:
    return small_config()


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg) -> ModelWeights:
    return ModelWeights.init(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_sequence(tmp_path_factory) -> str:
    """Manifest path of one rendered 32x32 sequence with GT masks."""
    root = tmp_path_factory.mktemp("seq")
    spec = SyntheticSpec(n_shapes=1, motion="linear", frames=4, seed=5,
                         width=32, height=32)
    return gen_synthetic(spec, str(root))


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
