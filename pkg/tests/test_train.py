"""Tests for training on synthetic data."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from revformer.config import DataSection, RunConfig, TrainSection, ViTModelSection
from revformer.data import SyntheticImages
from revformer.exceptions import ConfigError
from revformer.model import RevModel
from revformer.optim import SGD, make_optimizer
from revformer.train import CHECKPOINT_NAME, TRAIN_COLUMNS, make_dataset, train
from revformer.utils import load_metrics


def small_run(arch: str = "rev_vit", steps: int = 10, dtype: str = "float64") -> RunConfig:
    return RunConfig(
        model=ViTModelSection(arch=arch, embed_dim=16, depth=2, num_heads=2, drop_path_rate=0.1),
        train=TrainSection(
            steps=steps,
            batch=8,
            dtype=dtype,
            data=DataSection(num_samples=64, eval_samples=32),
        ),
        seed=4,
    )


def test_dataset_is_deterministic() -> None:
    """Test that data and mini-batches depend only on the seed and step."""
    cfg = small_run()
    a, b = make_dataset(cfg), make_dataset(cfg)
    np.testing.assert_array_equal(a.X_train, b.X_train)
    xa, ya = a.batch(3, 8)
    xb, yb = b.batch(3, 8)
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(ya, yb)
    assert not np.array_equal(a.batch(4, 8)[0], xa)


def test_dataset_split_is_stratified() -> None:
    """Test split sizes and that every class is present in both halves."""
    data = SyntheticImages.generate(8, 3, 4, DataSection(num_samples=40, eval_samples=20))
    assert data.X_train.shape == (40, 8, 8, 3)
    assert len(data.y_test) == 20
    assert set(data.y_train) == set(data.y_test) == {0, 1, 2, 3}


def test_make_optimizer_choices(tiny_vit: RevModel) -> None:
    """Test optimiser selection from the train section."""
    assert isinstance(make_optimizer(TrainSection(optimizer="sgd"), tiny_vit), SGD)


def test_train_writes_outputs(temp_dir: Path) -> None:
    """Test the train log, metrics file and checkpoint."""
    result = train(small_run(steps=5), out_dir=temp_dir)
    assert list(result.history.columns) == TRAIN_COLUMNS
    assert result.history["step"].tolist() == [0, 1, 2, 3, 4]
    assert np.all(np.isfinite(result.history["loss"]))
    assert result.checkpoint_path == temp_dir / CHECKPOINT_NAME
    assert result.checkpoint_path.exists()
    metrics = load_metrics(temp_dir / "metrics.json")
    assert metrics["steps"] == 5
    assert 0.0 <= metrics["test_accuracy"] <= 1.0
    assert len(metrics["confusion_matrix"]) == 8
    assert pd.read_csv(temp_dir / "train.csv")["step"].tolist() == [0, 1, 2, 3, 4]


def test_schedules_follow_the_same_trajectory() -> None:
    """Test that float32 cached and reversible training give the same loss at every step."""
    rev = train(small_run("rev_vit", steps=100, dtype="float32"))
    cached = train(small_run("cached_vit", steps=100, dtype="float32"))
    assert rev.model.schedule.value == "reversible"
    assert cached.model.schedule.value == "cached"
    a = rev.history["loss"].to_numpy()
    b = cached.history["loss"].to_numpy()
    assert len(a) == len(b) == 100
    assert np.max(np.abs(a - b) / np.abs(b)) < 1e-4


def test_resume_is_bit_exact(temp_dir: Path) -> None:
    """Test that stopping and resuming gives the uninterrupted weights exactly."""
    full = train(small_run(steps=8))

    first = train(small_run(steps=8), out_dir=temp_dir, steps=4)
    resumed = train(small_run(steps=8), out_dir=temp_dir, resume=first.checkpoint_path)

    for (name, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        np.testing.assert_array_equal(p.value, q.value, err_msg=name)
    np.testing.assert_array_equal(
        full.history["loss"].to_numpy()[4:], resumed.history["loss"].to_numpy()
    )
    assert pd.read_csv(temp_dir / "train.csv")["step"].tolist() == list(range(8))
    metrics = load_metrics(temp_dir / "metrics.json")
    assert metrics["steps"] == 8
    assert metrics["seconds"] >= first.metrics["seconds"]


def test_resume_rejects_other_seed(temp_dir: Path) -> None:
    """Test that a checkpoint only resumes the run that wrote it."""
    first = train(small_run(steps=2), out_dir=temp_dir)
    other = small_run(steps=4).model_copy(update={"seed": 5})
    with pytest.raises(ConfigError, match="seed"):
        train(other, resume=first.checkpoint_path)


@pytest.mark.slow
def test_rev_vit_learns_synthetic_task() -> None:
    """Test that a width-64, depth-4 Rev-ViT exceeds 95% held-out accuracy."""
    cfg = RunConfig(
        model=ViTModelSection(embed_dim=64, depth=4, drop_path_rate=0.1),
        train=TrainSection(steps=500, batch=32, lr=1e-3),
        seed=0,
    )
    result = train(cfg)
    assert result.metrics["test_accuracy"] > 0.95
    assert result.history["loss"].iloc[-20:].mean() < result.history["loss"].iloc[:20].mean()
