"""Tests for stream fusion strategies."""

import numpy as np
import pytest

from revformer.config import FusionStrategy
from revformer.engine import TwoStreamState
from revformer.exceptions import ConfigError, InvariantViolationError
from revformer.fusion import Fusion, lateral_fuse
from revformer.gradcheck import check_vjp


@pytest.mark.parametrize(
    "text,op,pre,post,dropout",
    [
        ("max", "max", False, False, 0.0),
        ("norm->concat", "concat", True, False, 0.0),
        ("2x-mlp", "mlp", False, False, 0.0),
        ("norm->1-layer->0.2dp->norm", "linear", True, True, 0.2),
        ("norm → max", "max", True, False, 0.0),
    ],
)
def test_parse_strategies(text: str, op: str, pre: bool, post: bool, dropout: float) -> None:
    """Test arrow-chain parsing."""
    s = FusionStrategy.parse(text)
    assert (s.op, s.pre_norm, s.post_norm, s.dropout) == (op, pre, post, dropout)


def test_strategy_text_round_trips() -> None:
    """Test that a parsed strategy prints back to its description."""
    for text in ("max", "norm->concat", "4x-mlp", "norm->1-layer->0.2dp->norm"):
        assert str(FusionStrategy.parse(text)) == text


@pytest.mark.parametrize("text", ["norm", "sum", "x-mlp", "concat->abcdp", ""])
def test_parse_rejects_bad_strategies(text: str) -> None:
    """Test that unknown steps and operator-free chains are config errors."""
    with pytest.raises(ConfigError):
        FusionStrategy.parse(text)


@pytest.mark.parametrize(
    "text,lateral,width",
    [
        ("max", False, 8),
        ("norm->concat", False, 16),
        ("norm->concat", True, 8),
        ("2x-mlp", True, 8),
        ("1-layer", False, 16),
    ],
)
def test_fused_width(text: str, lateral: bool, width: int, rng: np.random.Generator) -> None:
    """Test that lateral fusion returns ``d`` and termination keeps the merged width."""
    fusion = Fusion(text, 8, rng, np.float64, lateral=lateral)
    y, _ = fusion.forward(rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 3, 8)))
    assert y.shape == (2, 3, width)
    assert fusion.out_dim == width


def test_max_fusion_values() -> None:
    """Test element-wise maximum of the streams."""
    fusion = Fusion("max", 2, np.random.default_rng(0), np.float64, lateral=False)
    y, _ = fusion.forward(np.array([[1.0, -2.0]]), np.array([[0.0, 3.0]]))
    np.testing.assert_array_equal(y, [[1.0, 3.0]])


@pytest.mark.parametrize("text", ["norm->2x-mlp", "norm->1-layer->norm", "norm->concat"])
def test_fusion_vjp_matches_finite_differences(text: str, rng: np.random.Generator) -> None:
    """Test the cotangent of the first stream."""
    fusion = Fusion(text, 4, rng, np.float64, lateral=True)
    b = rng.standard_normal((2, 3, 4))

    def vjp(a: np.ndarray, dy: np.ndarray) -> np.ndarray:
        _, cache = fusion.forward(a, b)
        return fusion.backward(cache, dy)[0]

    err = check_vjp(lambda a: fusion.forward(a, b)[0], vjp, rng.standard_normal((2, 3, 4)), rng)
    assert err < 1e-6


def test_fusion_dropout_only_in_training(rng: np.random.Generator) -> None:
    """Test that fusion dropout is inactive at evaluation and replays from its seed."""
    fusion = Fusion("concat->0.5dp", 4, rng, np.float64, lateral=False)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(fusion.forward(a, b)[0], np.concatenate([a, b], axis=-1))
    y1, _ = fusion.forward(a, b, seed=3, training=True)
    y2, _ = fusion.forward(a, b, seed=3, training=True)
    np.testing.assert_array_equal(y1, y2)


def test_lateral_fuse(rng: np.random.Generator) -> None:
    """Test merging a two-stream state into one tensor of the stream width."""
    fusion = Fusion("2x-mlp", 8, rng, np.float64, lateral=True)
    s = TwoStreamState(rng.standard_normal((2, 4, 8)), rng.standard_normal((2, 4, 8)))
    assert lateral_fuse(s, fusion).shape == (2, 4, 8)


def test_lateral_fuse_rejects_unequal_streams(rng: np.random.Generator) -> None:
    """Test the stream shape check."""
    fusion = Fusion("max", 8, rng, np.float64)
    with pytest.raises(InvariantViolationError):
        lateral_fuse(TwoStreamState(np.zeros((1, 4, 8)), np.zeros((1, 2, 8))), fusion)
