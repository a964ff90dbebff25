"""Rev-MViT: pooling attention, stage-preserving reversible blocks and stage transitions.

Stage-preserving blocks are ordinary reversible blocks whose F is pooling attention with
unit query stride. A stage transition fuses the two streams, halves the token grid and
doubles the channels (the doubling happens in the attention's Q/K/V projections), then
duplicates its output into both streams again. Transitions are not invertible and run as
checkpoint segments.
"""

from typing import Any

import numpy as np

from revformer.config import FusionStrategy, MViTConfig
from revformer.engine import (
    CheckpointSegment,
    CheckpointTransform,
    RevBlock,
    RevStack,
    ReversibleSegment,
    Schedule,
    SeedRecord,
    SubBlock,
    TwoStreamState,
)
from revformer.exceptions import DimensionError
from revformer.fusion import Fusion
from revformer.kernels import Tensor
from revformer.layers import ConvStem, LayerNorm, Linear, Mlp, PositionEmbedding, TokenPool
from revformer.model import RevModel, Stem
from revformer.vit import (
    MlpBlock,
    merge_heads,
    multi_head_attention,
    multi_head_attention_vjp,
    split_heads,
)


def _pool_pair(
    dim: int, kernel: int, stride: int, dtype: Any, eps: float
) -> tuple[TokenPool | None, LayerNorm | None]:
    """A pooling layer and its norm, or ``(None, None)`` for a unit kernel at unit stride."""
    if kernel == 1 and stride == 1:
        return None, None
    return TokenPool(dim, kernel, stride, dtype), LayerNorm(dim, eps, dtype)


class PoolAttention(SubBlock):
    """Multi-head attention over pooled queries, keys and values.

    ``LN -> pool Q/K/V -> LN per pooled tensor -> linear to dim_out -> attention -> linear``.
    Queries pool with ``q_stride`` (kernel ``pool_kernel`` when strided); keys and values
    pool with ``kv_stride``. With ``dim_out = 2 * dim_in`` the Q/K/V projections carry the
    channel upsampling of a stage transition.
    """

    def __init__(
        self,
        dim_in: int,
        dim_out: int,
        heads: int,
        grid: int,
        q_stride: int,
        kv_stride: int,
        pool_kernel: int,
        rng: np.random.Generator,
        dtype: Any = np.float32,
        eps: float = 1e-6,
        drop_path_rate: float = 0.0,
        pre_norm: bool = True,
    ):
        super().__init__(drop_path_rate)
        if dim_out % heads:
            raise DimensionError(f"dim_out {dim_out} not divisible by {heads} heads")
        self.heads = heads
        self.grid = (grid, grid)
        self.norm = LayerNorm(dim_in, eps, dtype) if pre_norm else None
        self.pool_q, self.norm_q = _pool_pair(
            dim_in, pool_kernel if q_stride > 1 else 1, q_stride, dtype, eps
        )
        self.pool_k, self.norm_k = _pool_pair(dim_in, pool_kernel, kv_stride, dtype, eps)
        self.pool_v, self.norm_v = _pool_pair(dim_in, pool_kernel, kv_stride, dtype, eps)
        self.q = Linear(dim_in, dim_out, rng, dtype)
        self.k = Linear(dim_in, dim_out, rng, dtype)
        self.v = Linear(dim_in, dim_out, rng, dtype)
        self.proj = Linear(dim_out, dim_out, rng, dtype)

    @property
    def query_grid(self) -> tuple[int, int]:
        return self.pool_q.output_grid(self.grid) if self.pool_q is not None else self.grid

    @property
    def kv_grid(self) -> tuple[int, int]:
        return self.pool_k.output_grid(self.grid) if self.pool_k is not None else self.grid

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        n, d = shape[-2], shape[-1]
        if n != self.grid[0] * self.grid[1] or d != self.q.d_in:
            raise DimensionError(
                f"pooling attention expects {self.grid[0] * self.grid[1]} x {self.q.d_in} "
                f"tokens, got {shape}"
            )
        gq = self.query_grid
        return (*shape[:-2], gq[0] * gq[1], self.proj.d_out)

    def _project(self, h: Tensor, pool, norm, lin: Linear) -> tuple[Tensor, tuple]:
        c_pool = c_norm = None
        if pool is not None:
            h, c_pool = pool.forward(h, self.grid)
            h, c_norm = norm.forward(h)
        t, c_lin = lin.forward(h)
        return split_heads(t, self.heads), (c_pool, c_norm, c_lin)

    def _project_backward(self, cache: tuple, dt: Tensor, pool, norm, lin: Linear) -> Tensor:
        c_pool, c_norm, c_lin = cache
        dh = lin.backward(c_lin, merge_heads(dt))
        if pool is not None:
            dh = pool.backward(c_pool, norm.backward(c_norm, dh))
        return dh

    def branch_forward(self, x: Tensor) -> tuple[Tensor, tuple]:
        self.output_shape(x.shape)
        h, c_norm = self.norm.forward(x) if self.norm is not None else (x, None)
        q, c_q = self._project(h, self.pool_q, self.norm_q, self.q)
        k, c_k = self._project(h, self.pool_k, self.norm_k, self.k)
        v, c_v = self._project(h, self.pool_v, self.norm_v, self.v)
        o, probs = multi_head_attention(q, k, v)
        y, c_proj = self.proj.forward(merge_heads(o))
        return y, (c_norm, c_q, c_k, c_v, q, k, v, probs, c_proj)

    def branch_backward(self, cache: tuple, dy: Tensor) -> Tensor:
        c_norm, c_q, c_k, c_v, q, k, v, probs, c_proj = cache
        do = split_heads(self.proj.backward(c_proj, dy), self.heads)
        dq, dk, dv = multi_head_attention_vjp(do, q, k, v, probs)
        dh = self._project_backward(c_q, dq, self.pool_q, self.norm_q, self.q)
        dh = dh + self._project_backward(c_k, dk, self.pool_k, self.norm_k, self.k)
        dh = dh + self._project_backward(c_v, dv, self.pool_v, self.norm_v, self.v)
        return self.norm.backward(c_norm, dh) if self.norm is not None else dh


def pool_attention(x: Tensor, attn: PoolAttention) -> Tensor:
    """Evaluate pooling attention on ``x`` without stochastic depth."""
    return attn.branch_forward(x)[0]


class StageTransition(CheckpointTransform):
    """Fuse streams, downsample the grid, double the channels, re-duplicate.

    ``x = fuse(I1, I2)``; ``y = attn(LN(x))`` with strided queries and Q/K/V projected to
    ``dim_out``; ``out = MLP(LN(y))``. There is no skip path inside the transition, and keys
    and values pool with ``kv_stride`` on the input grid.
    """

    def __init__(
        self,
        index: int,
        dim: int,
        dim_out: int,
        heads: int,
        grid: int,
        q_stride: int,
        kv_stride: int,
        pool_kernel: int,
        mlp_ratio: float,
        fusion: FusionStrategy | str,
        rng: np.random.Generator,
        dtype: Any = np.float32,
        eps: float = 1e-6,
    ):
        self.index = index
        self.calls = 0
        self.grid = grid
        self.fuse = Fusion(fusion, dim, rng, dtype, eps, lateral=True)
        self.norm1 = LayerNorm(dim, eps, dtype)
        self.attn = PoolAttention(
            dim, dim_out, heads, grid, q_stride, kv_stride, pool_kernel, rng, dtype, eps,
            pre_norm=False,
        )
        self.norm2 = LayerNorm(dim_out, eps, dtype)
        self.mlp = Mlp(dim_out, int(dim_out * mlp_ratio), dim_out, rng, dtype)

    @property
    def output_grid(self) -> int:
        return self.attn.query_grid[0]

    def forward(self, s: TwoStreamState, rec: SeedRecord) -> tuple[Tensor, Tensor, Any]:
        self.calls += 1
        s.check(f"transition {self.index}")
        x, c_fuse = self.fuse.forward(s.i1, s.i2, rec.seeds[0], rec.training)
        xn, c_n1 = self.norm1.forward(x)
        a, c_attn = self.attn.branch_forward(xn)
        m_in, c_n2 = self.norm2.forward(a)
        out, c_mlp = self.mlp.forward(m_in)
        return out, out, (c_fuse, c_n1, c_attn, c_n2, c_mlp)

    def backward(self, cache: Any, d1: Tensor, d2: Tensor) -> tuple[Tensor, Tensor]:
        c_fuse, c_n1, c_attn, c_n2, c_mlp = cache
        da = self.norm2.backward(c_n2, self.mlp.backward(c_mlp, d1 + d2))
        dxn = self.attn.branch_backward(c_attn, da)
        return self.fuse.backward(c_fuse, self.norm1.backward(c_n1, dxn))


def stage_transition(
    s: TwoStreamState, transition: StageTransition, rec: SeedRecord
) -> TwoStreamState:
    o1, o2, _ = transition.forward(s, rec)
    return TwoStreamState(o1, o2, dict(s.seeds))


class ConvEmbed(Stem):
    """Overlapping convolutional patches plus a learned position table."""

    def __init__(self, cfg: MViTConfig, rng: np.random.Generator, dtype: Any = np.float32):
        self.dim = cfg.stages[0].embed_dim
        self.num_tokens = cfg.stem_grid**2
        self.conv = ConvStem(
            cfg.in_chans, self.dim, cfg.stem_kernel, cfg.stem_stride, cfg.stem_padding, rng, dtype
        )
        self.pos = PositionEmbedding(self.num_tokens, self.dim, rng, dtype)

    def forward(self, images: Tensor) -> tuple[Tensor, Any]:
        tokens, cache = self.conv.forward(images)
        return self.pos.forward(tokens), cache

    def backward(self, cache: Any, d_tokens: Tensor) -> None:
        self.conv.backward(cache, self.pos.backward(d_tokens))


def stage_preserving_block(
    index: int,
    dim: int,
    heads: int,
    grid: int,
    kv_stride: int,
    pool_kernel: int,
    mlp_ratio: float,
    rng: np.random.Generator,
    dtype: Any = np.float32,
    eps: float = 1e-6,
    drop_path_rate: float = 0.0,
) -> RevBlock:
    f = PoolAttention(
        dim, dim, heads, grid, 1, kv_stride, pool_kernel, rng, dtype, eps, drop_path_rate
    )
    g = MlpBlock(dim, int(dim * mlp_ratio), rng, dtype, eps, drop_path_rate)
    return RevBlock(f, g, index=index, token_shape=(grid * grid, dim))


def build_rev_mvit(
    cfg: MViTConfig,
    seed: int = 0,
    dtype: Any = np.float32,
    schedule: Schedule = Schedule.REVERSIBLE,
) -> RevModel:
    """Conv stem, then per stage an optional transition and a reversible run of blocks."""
    rng = np.random.default_rng(seed)
    eps = cfg.layer_norm_eps
    grids = cfg.stage_grids()
    units = sum(st.depth for st in cfg.stages) + len(cfg.stages) - 1
    rates = list(np.linspace(0.0, cfg.drop_path_rate, units)) if units > 1 else [cfg.drop_path_rate]

    stem = ConvEmbed(cfg, rng, dtype)
    segments: list = []
    index = 0
    for k, stage in enumerate(cfg.stages):
        if k > 0:
            prev = cfg.stages[k - 1]
            transition = StageTransition(
                index=index,
                dim=prev.embed_dim,
                dim_out=stage.embed_dim,
                heads=stage.num_heads,
                grid=grids[k - 1],
                q_stride=stage.q_pool_stride,
                kv_stride=stage.transition_kv_stride,
                pool_kernel=cfg.pool_kernel,
                mlp_ratio=stage.mlp_ratio,
                fusion=cfg.fusion,
                rng=rng,
                dtype=dtype,
                eps=eps,
            )
            segments.append(CheckpointSegment(transition))
            index += 1
        blocks = []
        for _ in range(stage.depth):
            blocks.append(
                stage_preserving_block(
                    index,
                    stage.embed_dim,
                    stage.num_heads,
                    grids[k],
                    stage.kv_pool_stride,
                    cfg.pool_kernel,
                    stage.mlp_ratio,
                    rng,
                    dtype,
                    eps,
                    float(rates[index]),
                )
            )
            index += 1
        if blocks:
            segments.append(ReversibleSegment(blocks))

    d_last = cfg.stages[-1].embed_dim
    termination = Fusion(cfg.termination, d_last, rng, dtype, eps, lateral=False)
    return RevModel(
        stem=stem,
        stack=RevStack(segments),
        termination=termination,
        head=Linear(termination.out_dim, cfg.num_classes, rng, dtype),
        schedule=schedule,
        config=cfg,
    )
