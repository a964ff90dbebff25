"""Build a model from a run-config model section."""

import logging
from typing import Any

import numpy as np

from revformer.config import MViTConfig, ViTConfig
from revformer.engine import Schedule
from revformer.model import RevModel
from revformer.mvit import build_rev_mvit
from revformer.vit import build_rev_vit

logger = logging.getLogger(__name__)


def schedule_for(section: ViTConfig | MViTConfig) -> Schedule:
    """``cached_vit`` is the conventional-backprop twin of ``rev_vit``."""
    if getattr(section, "arch", None) == "cached_vit":
        return Schedule.CACHED
    return Schedule.REVERSIBLE


def build_model(
    section: ViTConfig | MViTConfig,
    seed: int = 0,
    dtype: Any = np.float32,
    schedule: Schedule | None = None,
) -> RevModel:
    schedule = schedule or schedule_for(section)
    if isinstance(section, MViTConfig):
        model = build_rev_mvit(section, seed=seed, dtype=dtype, schedule=schedule)
    else:
        model = build_rev_vit(section, seed=seed, dtype=dtype, schedule=schedule)
    logger.debug(
        f"Built {type(section).__name__} with {model.num_parameters():,} parameters "
        f"({schedule.value} schedule)"
    )
    return model
