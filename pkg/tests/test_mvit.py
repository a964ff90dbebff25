"""Tests for Rev-MViT pooling attention, stage transitions and the model."""

import numpy as np
import pytest

from revformer.analytics import count_params
from revformer.config import MViTModelSection, RunConfig
from revformer.engine import (
    CheckpointSegment,
    RevBlock,
    StepContext,
    TwoStreamState,
    initiate_streams,
    rev_forward,
    segment_forward,
)
from revformer.exceptions import DimensionError, InvariantViolationError
from revformer.gradcheck import check_vjp, relative_error
from revformer.model import RevModel
from revformer.mvit import (
    PoolAttention,
    StageTransition,
    pool_attention,
    stage_preserving_block,
    stage_transition,
)
from revformer.verify import share_weights, suite_reduction
from revformer.vit import Attention, MlpBlock
from revformer.zoo import build_model


def test_pool_attention_query_stride_halves_grid(rng: np.random.Generator) -> None:
    """Test output tokens and width with strided queries and doubled channels."""
    attn = PoolAttention(8, 16, 2, 4, 2, 1, 3, rng, np.float64)
    y = pool_attention(rng.standard_normal((2, 16, 8)), attn)
    assert y.shape == (2, 4, 16)
    assert attn.query_grid == (2, 2)


def test_pool_attention_kv_stride_keeps_tokens(rng: np.random.Generator) -> None:
    """Test that pooling only keys and values leaves the query grid alone."""
    attn = PoolAttention(8, 8, 1, 4, 1, 2, 3, rng, np.float64)
    y = pool_attention(rng.standard_normal((1, 16, 8)), attn)
    assert y.shape == (1, 16, 8)
    assert attn.kv_grid == (2, 2)


def test_pool_attention_rejects_wrong_token_count(rng: np.random.Generator) -> None:
    """Test the grid check."""
    attn = PoolAttention(8, 8, 1, 4, 1, 2, 3, rng, np.float64)
    with pytest.raises(DimensionError):
        pool_attention(np.zeros((1, 15, 8)), attn)


def test_pool_attention_vjp_matches_finite_differences(rng: np.random.Generator) -> None:
    """Test the pooling attention input cotangent."""
    attn = PoolAttention(4, 4, 2, 4, 1, 2, 3, rng, np.float64)
    x = rng.standard_normal((1, 16, 4))
    err = check_vjp(
        lambda t: attn.apply(t, 0, False), lambda t, dy: attn.vjp(t, dy, 0, False), x, rng
    )
    assert err < 1e-6


def test_query_pooling_cannot_be_reversible(rng: np.random.Generator) -> None:
    """Test that a grid-changing attention is refused as a reversible sub-block."""
    f = PoolAttention(8, 16, 2, 4, 2, 1, 3, rng, np.float64)
    g = MlpBlock(8, 16, rng, np.float64)
    with pytest.raises(InvariantViolationError):
        RevBlock(f, g, index=0, token_shape=(16, 8))


def test_unpooled_block_equals_vit_block(rng: np.random.Generator) -> None:
    """Test that a stage-preserving block without pooling matches a Rev-ViT block."""
    d, grid = 16, 3
    vit_block = RevBlock(
        Attention(d, 2, rng, np.float64),
        MlpBlock(d, 4 * d, rng, np.float64),
        index=0,
        token_shape=(grid * grid, d),
    )
    mvit_block = stage_preserving_block(0, d, 2, grid, 1, 1, 4.0, rng, np.float64)
    share_weights(vit_block, mvit_block)
    s = TwoStreamState(rng.standard_normal((2, 9, d)), rng.standard_normal((2, 9, d)))
    a, b = rev_forward(vit_block, s), rev_forward(mvit_block, s)
    assert relative_error(b.i1, a.i1) < 1e-12
    assert relative_error(b.i2, a.i2) < 1e-12


def test_reduction_suite_passes(quick_run_config: RunConfig) -> None:
    """Test the reduction check as run by ``verify``."""
    (result,) = suite_reduction(quick_run_config)
    assert result.passed, result.max_error


def test_stage_transition_shapes(rng: np.random.Generator) -> None:
    """Test grid downsampling and channel doubling with re-duplicated streams."""
    transition = StageTransition(
        index=2,
        dim=8,
        dim_out=16,
        heads=2,
        grid=4,
        q_stride=2,
        kv_stride=1,
        pool_kernel=3,
        mlp_ratio=4.0,
        fusion="2x-mlp",
        rng=rng,
        dtype=np.float64,
    )
    s = TwoStreamState(rng.standard_normal((2, 16, 8)), rng.standard_normal((2, 16, 8)))
    out = stage_transition(s, transition, StepContext().record(2, transition.num_roles))
    assert out.i1.shape == (2, 4, 16)
    assert out.i1 is out.i2
    assert transition.output_grid == 2


def test_stage_transition_vjp_matches_finite_differences(rng: np.random.Generator) -> None:
    """Test the transition cotangent with respect to the first stream."""
    transition = StageTransition(
        index=0,
        dim=4,
        dim_out=8,
        heads=2,
        grid=4,
        q_stride=2,
        kv_stride=1,
        pool_kernel=3,
        mlp_ratio=2.0,
        fusion="norm->2x-mlp",
        rng=rng,
        dtype=np.float64,
    )
    rec = StepContext().record(0, transition.num_roles)
    i2 = rng.standard_normal((1, 16, 4))

    def fn(i1: np.ndarray) -> np.ndarray:
        return transition.forward(TwoStreamState(i1, i2), rec)[0]

    def vjp(i1: np.ndarray, dy: np.ndarray) -> np.ndarray:
        _, _, cache = transition.forward(TwoStreamState(i1, i2), rec)
        return transition.backward(cache, dy, np.zeros_like(dy))[0]

    assert check_vjp(fn, vjp, rng.standard_normal((1, 16, 4)), rng) < 1e-6


def test_stage_transition_has_no_skip_path(rng: np.random.Generator) -> None:
    """Test that the transition output is MLP(LN(attn(LN(fuse)))) with no residual terms."""
    transition = StageTransition(
        index=0,
        dim=8,
        dim_out=16,
        heads=2,
        grid=4,
        q_stride=2,
        kv_stride=1,
        pool_kernel=3,
        mlp_ratio=2.0,
        fusion="max",
        rng=rng,
        dtype=np.float64,
    )
    assert not hasattr(transition, "skip")
    i1, i2 = rng.standard_normal((2, 2, 16, 8))
    out, _, _ = transition.forward(TwoStreamState(i1, i2), StepContext().record(0, 1))

    x = np.maximum(i1, i2)
    a = pool_attention(transition.norm1.forward(x)[0], transition.attn)
    expected = transition.mlp.forward(transition.norm2.forward(a)[0])[0]
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_transition_kv_stride_follows_stage_config(tiny_mvit_section: MViTModelSection) -> None:
    """Test that the transition pools keys and values with its own stride."""
    stages = [st.model_copy() for st in tiny_mvit_section.stages]
    stages[1] = stages[1].model_copy(update={"transition_kv_stride": 2})
    section = tiny_mvit_section.model_copy(update={"stages": stages})
    model = build_model(section, seed=0, dtype=np.float64)
    transition = model.stack.transforms()[0]
    assert transition.attn.kv_grid == (4, 4)
    assert transition.output_grid == 4
    assert model.num_parameters() == count_params(section)

    default = build_model(tiny_mvit_section, seed=0, dtype=np.float64)
    assert default.stack.transforms()[0].attn.kv_grid == (8, 8)



def test_build_rev_mvit_layout(
    tiny_mvit: RevModel, tiny_mvit_section: MViTModelSection
) -> None:
    """Test segment order, indices and parameter count."""
    segments = tiny_mvit.stack.segments
    assert [isinstance(seg, CheckpointSegment) for seg in segments] == [False, True, False]
    assert [b.index for b in tiny_mvit.stack.blocks()] == [0, 2]
    assert tiny_mvit.stack.transforms()[0].index == 1
    assert tiny_mvit.num_parameters() == count_params(tiny_mvit_section)


def test_mvit_stream_shapes_per_stage(
    tiny_mvit: RevModel, image_batch: tuple[np.ndarray, np.ndarray]
) -> None:
    """Test stream shapes after each segment on 16 x 16 inputs."""
    images, _ = image_batch
    tokens, _ = tiny_mvit.stem.forward(images)
    s = initiate_streams(tokens)
    ctx = tiny_mvit.context()
    shapes = []
    for seg in tiny_mvit.stack.segments:
        s, _ = segment_forward(seg, s, ctx)
        shapes.append(s.i1.shape)
    assert shapes == [(4, 64, 8), (4, 16, 16), (4, 16, 16)]
    assert tiny_mvit.predict(images).shape == (4, 8)
