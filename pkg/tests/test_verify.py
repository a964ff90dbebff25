"""Tests for the verification suites."""

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from revformer import kernels as K
from revformer.config import RunConfig
from revformer.exceptions import ConfigError
from revformer.verify import (
    RESULT_COLUMNS,
    SUITE_FUNCTIONS,
    CaseResult,
    run_suites,
    run_verify,
    suite_finite_difference,
    suite_invertibility,
    suite_memory,
    suite_recompute,
    summarize,
    vit_stack,
)


def test_all_suites_pass(quick_run_config: RunConfig, temp_dir: Path) -> None:
    """Test a full verify run and its output files."""
    assert run_verify(quick_run_config, out_dir=temp_dir) == 0

    table = pd.read_csv(temp_dir / "verify.csv")
    assert list(table.columns) == RESULT_COLUMNS
    assert set(table["suite"]) == set(SUITE_FUNCTIONS)
    assert table["passed"].all(), table[~table["passed"]].to_string()

    summary = json.loads((temp_dir / "verify.json").read_text())
    assert summary["passed"] is True
    assert set(summary["suites"]) == set(SUITE_FUNCTIONS)


def test_invertibility_cases_cover_grid(quick_run_config: RunConfig) -> None:
    """Test one case per precision, width and depth."""
    results = suite_invertibility(quick_run_config)
    assert [r.case for r in results] == [
        "float64/d16/D2",
        "float64/d16/D4",
        "float32/d16/D2",
        "float32/d16/D4",
    ]
    assert all(r.passed for r in results)


def test_memory_suite_cases(quick_run_config: RunConfig) -> None:
    """Test that every memory property holds on the quick depth sweep."""
    results = {r.case.split()[0]: r for r in suite_memory(quick_run_config)}
    assert set(results) == {
        "reversible_flat",
        "cached_grows",
        "cached_estimate_linear",
        "estimate_vs_meter",
        "meter_above_lower_bound",
        "reversible_retains_boundary_only",
    }
    for name, r in results.items():
        assert r.passed, f"{name}: {r.max_error} ({r.detail})"


def test_recompute_doubles_invocations(quick_run_config: RunConfig) -> None:
    """Test the invocation and MAC accounting for both families."""
    results = suite_recompute(quick_run_config)
    assert [r.case for r in results] == [
        "tiny_vit/invocations",
        "tiny_vit/extra_macs",
        "tiny_mvit/invocations",
        "tiny_mvit/extra_macs",
    ]
    for r in results:
        assert r.passed, r.detail


def test_finite_difference_catches_wrong_gelu(
    quick_run_config: RunConfig,
    monkeypatch: pytest.MonkeyPatch,
    caplog: pytest.LogCaptureFixture,
) -> None:
    """Test that a broken backward kernel fails its check and is named in the log."""
    monkeypatch.setattr(K, "gelu_vjp", lambda dy, x: K.KernelGrad(input_grads=(dy,)))
    with caplog.at_level(logging.ERROR, logger="revformer.verify"):
        results = suite_finite_difference(quick_run_config)

    failed = [r.case for r in results if not r.passed]
    assert failed == ["gelu"]
    assert "gelu" in caplog.text


def test_finite_difference_failure_fails_run(
    quick_run_config: RunConfig, monkeypatch: pytest.MonkeyPatch
) -> None:
    """Test that a failing suite makes verify return 1."""
    monkeypatch.setattr(K, "gelu_vjp", lambda dy, x: K.KernelGrad(input_grads=(2.0 * dy,)))
    assert run_verify(quick_run_config, ["finite_difference"]) == 1


def test_unknown_suite(quick_run_config: RunConfig) -> None:
    """Test that an unknown suite name is a config error."""
    with pytest.raises(ConfigError):
        run_suites(quick_run_config, ["speed"])


def test_summarize() -> None:
    """Test per-suite aggregation."""
    summary = summarize(
        [
            CaseResult("a", "x", True, 1e-12, 1e-10),
            CaseResult("a", "y", False, 1e-3, 1e-10),
            CaseResult("b", "z", True, 0.0, 0.0),
        ]
    )
    assert summary["passed"] is False
    assert summary["suites"]["a"] == {"passed": False, "max_error": 1e-3, "cases": 2}
    assert summary["suites"]["b"]["passed"] is True


def test_vit_stack_shares_sub_blocks(rng: np.random.Generator) -> None:
    """Test that repeated sub-blocks keep distinct block indices."""
    blocks = vit_stack(16, 6, 4, rng, np.float64, distinct=2)
    assert [b.index for b in blocks] == list(range(6))
    assert blocks[0].f is blocks[2].f
    assert blocks[0].f is not blocks[1].f
