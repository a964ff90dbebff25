"""Throughput and activation-memory sweep over depth, width and schedule."""

import itertools
import logging
import time
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from revformer.analytics import (
    count_flops,
    count_params,
    estimate_activation_memory,
    measure_live_memory,
)
from revformer.config import (
    BenchSection,
    MViTModelSection,
    StageConfig,
    ViTModelSection,
    settings,
)
from revformer.data import random_images
from revformer.engine import Schedule
from revformer.utils import write_table
from revformer.zoo import build_model

logger = logging.getLogger(__name__)

# Column order of bench.csv; tests/golden/bench_header.csv pins it.
BENCH_COLUMNS = [
    "arch",
    "depth",
    "dim",
    "schedule",
    "steps_per_s",
    "peak_act_bytes_measured",
    "peak_act_bytes_estimated",
    "flops",
    "params",
]


def bench_model(arch: str, depth: int, dim: int) -> ViTModelSection | MViTModelSection:
    """A 16 x 16 model of the given family with ``depth`` reversible blocks at width ``dim``.

    Rev-MViT points use two stages: one block at ``dim``, the rest at ``2 * dim``.
    """
    if arch == "rev_vit":
        return ViTModelSection(image_size=16, patch_size=4, embed_dim=dim, depth=depth)
    return MViTModelSection(
        stages=[
            StageConfig(embed_dim=dim, num_heads=1, depth=1, kv_pool_stride=2),
            StageConfig(embed_dim=2 * dim, num_heads=2, depth=max(depth - 1, 0)),
        ]
    )


def run_point(
    arch: str, depth: int, dim: int, schedule: str, steps: int, batch: int, seed: int
) -> dict[str, Any]:
    """Time ``steps`` training steps of one sweep point on its own model instance."""
    section = bench_model(arch, depth, dim)
    dtype = np.dtype(settings.default_dtype)
    sched = Schedule(schedule)
    model = build_model(section, seed=seed, dtype=dtype, schedule=sched)
    images, labels = random_images(section, batch, np.random.default_rng(seed), dtype)

    # first step doubles as warm-up and memory measurement
    measured = measure_live_memory(
        lambda ctx: model.loss_and_grad(images, labels, ctx),
        model.context(step=0, base_seed=seed, training=True),
    )

    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        model.zero_grad()
        model.loss_and_grad(
            images, labels, model.context(step=step, base_seed=seed, training=True)
        )
    elapsed = time.perf_counter() - t0

    row = {
        "arch": arch,
        "depth": depth,
        "dim": dim,
        "schedule": sched.value,
        "steps_per_s": steps / elapsed if elapsed > 0 else float("inf"),
        "peak_act_bytes_measured": measured.peak_bytes,
        "peak_act_bytes_estimated": estimate_activation_memory(
            section, sched, batch, dtype.itemsize
        ),
        "flops": count_flops(section),
        "params": count_params(model),
    }
    logger.info(
        f"{arch} D={depth} d={dim} {sched.value}: {row['steps_per_s']:.2f} steps/s, "
        f"peak {measured.peak_bytes:,} B (estimate {row['peak_act_bytes_estimated']:,} B)"
    )
    return row


def run_bench(bench: BenchSection, seed: int = 0, out_dir: Path | None = None) -> pd.DataFrame:
    """Run the sweep; sweep points run concurrently on up to ``settings.threads`` threads."""
    points = list(itertools.product(bench.archs, bench.depths, bench.dims, bench.schedules))
    logger.info(f"Benchmarking {len(points)} points on {settings.threads} thread(s)")
    rows = Parallel(n_jobs=settings.threads, prefer="threads")(
        delayed(run_point)(arch, depth, dim, schedule, bench.steps, bench.batch, seed)
        for arch, depth, dim, schedule in points
    )
    if out_dir is not None:
        return write_table(rows, out_dir / "bench.csv", BENCH_COLUMNS)
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)
