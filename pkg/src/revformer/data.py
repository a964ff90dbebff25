"""Synthetic image classification data."""

from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from revformer.config import DataSection, MViTConfig, ViTConfig
from revformer.engine import derive_seed
from revformer.kernels import Tensor, philox

# Seed-derivation role for mini-batch sampling.
ROLE_BATCH = 7


@dataclass
class SyntheticImages:
    """Gaussian-mixture images: one random prototype per class plus isotropic noise.

    Everything is determined by the seed, and mini-batch ``k`` depends only on
    ``(seed, k)``, so a resumed run draws the same batches as an uninterrupted one.
    """

    X_train: Tensor
    y_train: Tensor
    X_test: Tensor
    y_test: Tensor
    seed: int

    @classmethod
    def generate(
        cls,
        image_size: int,
        in_chans: int,
        num_classes: int,
        section: DataSection,
        seed: int = 0,
        dtype: Any = np.float32,
    ) -> "SyntheticImages":
        rng = np.random.default_rng(seed)
        shape = (image_size, image_size, in_chans)
        prototypes = rng.standard_normal((num_classes, *shape))
        total = section.num_samples + section.eval_samples
        labels = np.arange(total) % num_classes
        images = prototypes[labels] + section.noise * rng.standard_normal((total, *shape))
        X_train, X_test, y_train, y_test = train_test_split(
            images.astype(dtype),
            labels,
            test_size=section.eval_samples,
            random_state=seed,
            stratify=labels,
        )
        return cls(X_train, y_train, X_test, y_test, seed)

    def batch(self, step: int, size: int) -> Tuple[Tensor, Tensor]:
        """Mini-batch for ``step``, sampled without replacement."""
        idx = philox(derive_seed(self.seed, step, 0, ROLE_BATCH)).choice(
            len(self.y_train), size=size, replace=False
        )
        idx.sort()
        return self.X_train[idx], self.y_train[idx]


def random_images(
    cfg: ViTConfig | MViTConfig, batch: int, rng: np.random.Generator, dtype: Any = np.float32
) -> Tuple[Tensor, Tensor]:
    """Standard-normal images and uniform labels shaped for ``cfg``."""
    images = rng.standard_normal((batch, cfg.image_size, cfg.image_size, cfg.in_chans))
    labels = rng.integers(0, cfg.num_classes, size=batch)
    return images.astype(dtype), labels
