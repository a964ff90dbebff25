"""Pytest configuration and fixtures."""

import tempfile
from pathlib import Path
from typing import Iterator

import numpy as np
import pytest

from revformer.config import MViTModelSection, RunConfig, ViTModelSection, preset
from revformer.data import random_images
from revformer.engine import RevBlock
from revformer.model import RevModel
from revformer.vit import Attention, MlpBlock
from revformer.zoo import build_model


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vit_section() -> ViTModelSection:
    """Tiny Rev-ViT with stochastic depth switched on."""
    return preset("tiny_vit").model_copy(update={"drop_path_rate": 0.1})


@pytest.fixture
def tiny_mvit_section() -> MViTModelSection:
    """Two-stage Rev-MViT on 16 x 16 images with stochastic depth switched on."""
    return preset("tiny_mvit").model_copy(update={"drop_path_rate": 0.1})


@pytest.fixture
def tiny_vit(tiny_vit_section: ViTModelSection) -> RevModel:
    """Tiny Rev-ViT in double precision."""
    return build_model(tiny_vit_section, seed=0, dtype=np.float64)


@pytest.fixture
def tiny_mvit(tiny_mvit_section: MViTModelSection) -> RevModel:
    """Tiny Rev-MViT in double precision."""
    return build_model(tiny_mvit_section, seed=0, dtype=np.float64)


@pytest.fixture
def image_batch(tiny_vit_section: ViTModelSection) -> tuple[np.ndarray, np.ndarray]:
    """Four random 16 x 16 RGB images with labels."""
    return random_images(tiny_vit_section, 4, np.random.default_rng(7), np.float64)


@pytest.fixture
def rev_block(rng: np.random.Generator) -> RevBlock:
    """One Rev-ViT block at width 16 over 8 tokens, with stochastic depth."""
    return RevBlock(
        Attention(16, 2, rng, np.float64, drop_path_rate=0.2),
        MlpBlock(16, 64, rng, np.float64, drop_path_rate=0.2),
        index=3,
        token_shape=(8, 16),
    )


@pytest.fixture
def quick_run_config() -> RunConfig:
    """Run config with a verification grid small enough for unit tests."""
    return RunConfig.model_validate(
        {
            "model": {"arch": "rev_vit"},
            "verify": {
                "widths": [16],
                "depths": [2, 4],
                "memory_depths": [4, 8, 16],
                "memory_width": 16,
            },
            "bench": {"depths": [2], "dims": [16], "steps": 1, "batch": 2},
        }
    )


@pytest.fixture
def temp_dir() -> Iterator[Path]:
    """Temporary output directory."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)
