"""Desk-scale training on synthetic data."""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, confusion_matrix

from revformer import checkpoint
from revformer.config import RunConfig
from revformer.data import SyntheticImages
from revformer.exceptions import ConfigError, NumericError
from revformer.model import RevModel
from revformer.optim import make_optimizer
from revformer.utils import ensure_dir, load_metrics, save_metrics, write_table
from revformer.zoo import build_model

logger = logging.getLogger(__name__)

TRAIN_COLUMNS = ["step", "loss", "accuracy", "lr"]
CHECKPOINT_NAME = "checkpoint.rvt"


@dataclass
class TrainResult:
    model: RevModel
    history: pd.DataFrame
    metrics: dict[str, Any]
    checkpoint_path: Path | None


def make_dataset(cfg: RunConfig) -> SyntheticImages:
    model = cfg.model
    return SyntheticImages.generate(
        image_size=model.image_size,
        in_chans=model.in_chans,
        num_classes=model.num_classes,
        section=cfg.train.data,
        seed=cfg.seed,
        dtype=np.dtype(cfg.train.dtype),
    )


def evaluate(model: RevModel, X: np.ndarray, y: np.ndarray, batch: int = 64) -> dict[str, Any]:
    """Accuracy and confusion matrix of evaluation-mode predictions."""
    preds = np.concatenate(
        [model.predict(X[i : i + batch]).argmax(axis=-1) for i in range(0, len(y), batch)]
    )
    return {
        "accuracy": float(accuracy_score(y, preds)),
        "confusion_matrix": confusion_matrix(y, preds, labels=np.arange(model.head.d_out)),
    }


def train(
    cfg: RunConfig,
    out_dir: Path | None = None,
    resume: Path | None = None,
    steps: int | None = None,
) -> TrainResult:
    """Train ``cfg.model`` for ``cfg.train.steps`` steps (or ``steps`` when given).

    With ``out_dir`` the per-step log goes to ``train.csv``, final metrics to
    ``metrics.json`` and the weights to ``checkpoint.rvt``.
    """
    tc = cfg.train
    total = tc.steps if steps is None else steps
    dtype = np.dtype(tc.dtype)
    model = build_model(cfg.model, seed=cfg.seed, dtype=dtype)
    optimizer = make_optimizer(tc, model)
    data = make_dataset(cfg)

    start = 0
    if resume is not None:
        ckpt = checkpoint.read_checkpoint(resume)
        if ckpt.seed != cfg.seed:
            raise ConfigError(f"checkpoint seed {ckpt.seed} differs from run seed {cfg.seed}")
        checkpoint.restore(ckpt, model, optimizer)
        start = ckpt.step
        logger.info(f"Resumed from {resume} at step {start}")

    logger.info(
        f"Training {cfg.model.arch} ({model.num_parameters():,} params, "
        f"{model.schedule.value} schedule) for steps {start}..{total - 1}"
    )
    rows = []
    t0 = time.perf_counter()
    for step in range(start, total):
        optimizer.zero_grad()
        ctx = model.context(step=step, base_seed=cfg.seed, training=True)
        images, labels = data.batch(step, tc.batch)
        loss, probs = model.loss_and_grad(images, labels, ctx)
        if not np.isfinite(loss):
            raise NumericError(f"step {step}: loss is {loss}")
        optimizer.step()
        acc = float(accuracy_score(labels, probs.argmax(axis=-1)))
        rows.append({"step": step, "loss": loss, "accuracy": acc, "lr": tc.lr})
        if step % tc.log_every == 0 or step == total - 1:
            logger.info(f"step {step:5d}  loss {loss:.4f}  batch acc {acc:.3f}")
    history = pd.DataFrame(rows, columns=TRAIN_COLUMNS)
    elapsed = time.perf_counter() - t0

    train_metrics = evaluate(model, data.X_train, data.y_train)
    test_metrics = evaluate(model, data.X_test, data.y_test)
    metrics = {
        "steps": total,
        "final_loss": float(history["loss"].iloc[-1]) if len(history) else None,
        "train_accuracy": train_metrics["accuracy"],
        "test_accuracy": test_metrics["accuracy"],
        "confusion_matrix": test_metrics["confusion_matrix"],
        "seconds": elapsed,
    }
    logger.info(
        f"Train accuracy: {metrics['train_accuracy']:.4f}, "
        f"test accuracy: {metrics['test_accuracy']:.4f}"
    )

    ckpt_path = None
    if out_dir is not None:
        ensure_dir(out_dir)
        log_path = out_dir / "train.csv"
        frame = history
        if resume is not None and log_path.exists():
            previous = pd.read_csv(log_path)
            frame = pd.concat([previous[previous["step"] < start], history], ignore_index=True)
        write_table(frame.to_dict("records"), log_path, TRAIN_COLUMNS)
        metrics_path = out_dir / "metrics.json"
        if resume is not None and metrics_path.exists():
            # wall time spans every leg of a resumed run
            metrics["seconds"] += float(load_metrics(metrics_path).get("seconds", 0.0))
        save_metrics(metrics, metrics_path)
        ckpt_path = checkpoint.save(
            out_dir / CHECKPOINT_NAME,
            model,
            step=total,
            seed=cfg.seed,
            config={
                "model": cfg.model.model_dump(mode="json"),
                "train": tc.model_dump(mode="json"),
            },
            optimizer=optimizer,
        )
    return TrainResult(model, history, metrics, ckpt_path)
