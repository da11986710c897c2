from __future__ import annotations

import pytest

from lq_adapter_desk.engine.models import ModelConfig


TINY_GEOMETRY = dict(image_size=32, patch_size=16, dim=8, layers=2, num_blocks=2, heads=2, ffn_ratio=2)


@pytest.fixture
def make_config():
    """Factory for the smallest geometry with all three scales; overrides win."""

    def factory(**overrides) -> ModelConfig:
        return ModelConfig(**{**TINY_GEOMETRY, **overrides})

    return factory
