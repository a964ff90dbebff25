"""Tests for the command-line interface."""

from pathlib import Path

import pandas as pd
import pytest

from revformer.cli import INFO_COLUMNS, build_parser, load_config, main

CONFIGS = Path(__file__).parent.parent / "configs"


def run_cli(*argv: str) -> int:
    with pytest.raises(SystemExit) as exc:
        main(list(argv))
    return exc.value.code


def test_info_writes_costs(temp_dir: Path, capsys: pytest.CaptureFixture) -> None:
    """Test ``info`` output and info.csv."""
    assert run_cli("info", "--config", "tiny_mvit", "--out", str(temp_dir)) == 0
    out = capsys.readouterr().out
    assert out.startswith("tiny_mvit")
    assert "recompute MACs" in out

    table = pd.read_csv(temp_dir / "info.csv")
    assert list(table.columns) == INFO_COLUMNS
    assert table["model"].tolist() == ["tiny_mvit"]
    assert table["act_mem_reversible"][0] < table["act_mem_cached"][0]


def test_info_regression(temp_dir: Path) -> None:
    """Test that the published-figure comparison passes and is written out."""
    assert run_cli("info", "--config", "rev_vit_b", "--regression", "--out", str(temp_dir)) == 0
    table = pd.read_csv(temp_dir / "regression.csv")
    assert table["passed"].all()


def test_verify_single_suite(temp_dir: Path) -> None:
    """Test ``verify --suite`` writes only that suite's rows."""
    assert run_cli("verify", "--suite", "reduction", "--out", str(temp_dir)) == 0
    table = pd.read_csv(temp_dir / "verify.csv")
    assert set(table["suite"]) == {"reduction"}


def test_train_with_toml_config(temp_dir: Path) -> None:
    """Test a short training run from the example run file."""
    code = run_cli(
        "train", "--config", str(CONFIGS / "tiny_vit.toml"), "--steps", "2", "--out", str(temp_dir)
    )
    assert code == 0
    assert (temp_dir / "checkpoint.rvt").exists()
    assert len(pd.read_csv(temp_dir / "train.csv")) == 2


def test_bench_command(temp_dir: Path) -> None:
    """Test ``bench`` with a run file that keeps the sweep small."""
    cfg = temp_dir / "bench.toml"
    cfg.write_text("[bench]\ndepths = [1]\ndims = [8]\nsteps = 1\nbatch = 2\n")
    assert run_cli("bench", "--config", str(cfg), "--out", str(temp_dir)) == 0
    assert len(pd.read_csv(temp_dir / "bench.csv")) == 2


def test_bad_config_exits_nonzero(temp_dir: Path) -> None:
    """Test that a missing run file is reported as a failure."""
    assert run_cli("info", "--config", str(temp_dir / "nope.toml")) == 1


def test_parser_rejects_unknown_suite() -> None:
    """Test argparse choices for ``--suite``."""
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["verify", "--suite", "speed"])
    assert exc.value.code == 2


def test_seed_override() -> None:
    """Test that ``--seed`` replaces the run seed."""
    args = build_parser().parse_args(["train", "--config", "tiny_vit", "--seed", "9"])
    assert load_config(args).seed == 9
