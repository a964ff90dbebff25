"""Tests for the throughput and memory sweep."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from revformer.bench import BENCH_COLUMNS, bench_model, run_bench, run_point
from revformer.config import BenchSection, MViTModelSection, ViTModelSection

GOLDEN = Path(__file__).parent / "golden"


def test_bench_header_matches_golden(temp_dir: Path) -> None:
    """Test that bench.csv keeps its published column order."""
    bench = BenchSection(depths=[2], dims=[16], steps=1, batch=2)
    run_bench(bench, out_dir=temp_dir)
    header = (temp_dir / "bench.csv").read_text().splitlines()[0]
    assert header == (GOLDEN / "bench_header.csv").read_text().strip()
    assert header.split(",") == BENCH_COLUMNS


def test_bench_rows_cover_sweep(temp_dir: Path) -> None:
    """Test one row per (arch, depth, dim, schedule) point."""
    bench = BenchSection(archs=["rev_vit", "rev_mvit"], depths=[2, 3], dims=[8], steps=1, batch=2)
    frame = run_bench(bench, seed=1)
    assert len(frame) == 8
    assert set(frame["schedule"]) == {"reversible", "cached"}
    assert (frame["steps_per_s"] > 0).all()
    assert (frame["peak_act_bytes_measured"] > 0).all()


def test_reversible_point_uses_less_memory() -> None:
    """Test that at equal depth the reversible schedule peaks lower than the cached one."""
    rev = run_point("rev_vit", 6, 16, "reversible", steps=1, batch=2, seed=0)
    cached = run_point("rev_vit", 6, 16, "cached", steps=1, batch=2, seed=0)
    assert rev["peak_act_bytes_measured"] < cached["peak_act_bytes_measured"]
    assert rev["flops"] == cached["flops"]
    assert rev["params"] == cached["params"]


@pytest.mark.parametrize(
    "arch,cls", [("rev_vit", ViTModelSection), ("rev_mvit", MViTModelSection)]
)
def test_bench_model_families(arch: str, cls: type) -> None:
    """Test the sweep model for each family."""
    section = bench_model(arch, 4, 16)
    assert isinstance(section, cls)
    assert section.arch == arch


def test_bench_mvit_depth_split() -> None:
    """Test that Rev-MViT sweep points put one block in the first stage."""
    section = bench_model("rev_mvit", 4, 16)
    assert [st.depth for st in section.stages] == [1, 3]
    assert [st.embed_dim for st in section.stages] == [16, 32]


def test_bench_frame_without_output() -> None:
    """Test that an in-memory sweep returns the same columns."""
    frame = run_bench(BenchSection(depths=[1], dims=[8], schedules=["reversible"], steps=1))
    assert list(frame.columns) == BENCH_COLUMNS
    assert isinstance(frame, pd.DataFrame)


def test_depth_sweep_memory_and_speed() -> None:
    """Test the Rev-ViT depth sweep: flat reversible peak, growing cached peak, speed band."""
    bench = BenchSection(depths=[4, 8, 16, 24], dims=[8], steps=2, batch=2)
    frame = run_bench(bench, seed=0).sort_values("depth")
    rev = frame[frame["schedule"] == "reversible"]
    cached = frame[frame["schedule"] == "cached"]
    assert rev["depth"].tolist() == cached["depth"].tolist() == [4, 8, 16, 24]

    rev_peak = rev["peak_act_bytes_measured"].to_numpy()
    cached_peak = cached["peak_act_bytes_measured"].to_numpy()
    # only the per-block seed records grow with depth
    assert rev_peak.max() / rev_peak.min() < 1.1
    assert (np.diff(cached_peak) > 0).all()
    assert cached_peak[-1] > 3 * rev_peak[-1]

    ratio = rev["steps_per_s"].to_numpy() / cached["steps_per_s"].to_numpy()
    assert 0.2 < ratio[-1] < 1.5
