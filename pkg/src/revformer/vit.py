"""Rev-ViT: patch embedding, attention and MLP sub-blocks, and the model builder."""

from typing import Any

import numpy as np

from revformer import kernels as K
from revformer.config import ViTConfig
from revformer.engine import RevBlock, RevStack, ReversibleSegment, Schedule, SubBlock
from revformer.exceptions import ConfigError, DimensionError
from revformer.fusion import Fusion
from revformer.kernels import Tensor
from revformer.layers import LayerNorm, Linear, Mlp, PositionEmbedding
from revformer.model import RevModel, Stem


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``B x N x d`` to ``B x heads x N x d/heads``."""
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over per-head tensors; returns output and probabilities."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = K.scale(K.matmul(q, np.swapaxes(k, -1, -2)), scale)
    probs = K.softmax(scores, axis=-1)
    return K.matmul(probs, v), probs


def multi_head_attention_vjp(
    do: Tensor, q: Tensor, k: Tensor, v: Tensor, probs: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    scale = 1.0 / np.sqrt(q.shape[-1])
    d_probs, dv = K.matmul_vjp(do, probs, v).input_grads
    d_scores = K.scale_vjp(K.softmax_vjp(d_probs, probs).input_grads[0], scale).input_grads[0]
    dq, dkt = K.matmul_vjp(d_scores, q, np.swapaxes(k, -1, -2)).input_grads
    return dq, np.swapaxes(dkt, -1, -2), dv


def extract_patches(images: Tensor, patch: int) -> Tensor:
    """Non-overlapping ``patch x patch`` tiles, flattened in row-major patch order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    tiles = images.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def fold_patches(d_patches: Tensor, image_shape: tuple[int, ...], patch: int) -> Tensor:
    b, h, w, c = image_shape
    tiles = d_patches.reshape(b, h // patch, w // patch, patch, patch, c)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(image_shape)


class PatchEmbed(Stem):
    """Linear projection of non-overlapping patches plus a learned position table."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator, dtype: Any = np.float32):
        self.image_size = cfg.image_size
        self.patch_size = cfg.patch_size
        self.num_tokens = cfg.num_tokens
        self.dim = cfg.embed_dim
        self.proj = Linear(cfg.patch_size**2 * cfg.in_chans, cfg.embed_dim, rng, dtype)
        self.pos = PositionEmbedding(cfg.num_tokens, cfg.embed_dim, rng, dtype)

    def forward(self, images: Tensor) -> tuple[Tensor, Any]:
        if images.ndim != 4 or images.shape[1:3] != (self.image_size, self.image_size):
            raise ConfigError(
                f"expected B x {self.image_size} x {self.image_size} x C images, got {images.shape}"
            )
        patches = extract_patches(images, self.patch_size)
        tokens, cache = self.proj.forward(patches)
        return self.pos.forward(tokens), cache

    def backward(self, cache: Any, d_tokens: Tensor) -> None:
        self.proj.backward(cache, self.pos.backward(d_tokens))


def patchify(image: Tensor, embed: PatchEmbed) -> Tensor:
    """Tokens for one ``H x W x C`` image, or a batch of them."""
    if image.ndim == 3:
        return embed.forward(image[None])[0][0]
    return embed.forward(image)[0]


class Attention(SubBlock):
    """``LN -> QKV -> multi-head attention -> output projection``, no residual."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        dtype: Any = np.float32,
        eps: float = 1e-6,
        drop_path_rate: float = 0.0,
    ):
        super().__init__(drop_path_rate)
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = LayerNorm(dim, eps, dtype)
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if shape[-1] != self.proj.d_out:
            raise DimensionError(f"attention width {self.proj.d_out} cannot take {shape}")
        return shape

    def branch_forward(self, x: Tensor) -> tuple[Tensor, tuple]:
        h, c_norm = self.norm.forward(x)
        qkv, c_qkv = self.qkv.forward(h)
        q, k, v = (split_heads(t, self.heads) for t in np.split(qkv, 3, axis=-1))
        o, probs = multi_head_attention(q, k, v)
        y, c_proj = self.proj.forward(merge_heads(o))
        return y, (c_norm, c_qkv, q, k, v, probs, c_proj)

    def branch_backward(self, cache: tuple, dy: Tensor) -> Tensor:
        c_norm, c_qkv, q, k, v, probs, c_proj = cache
        do = split_heads(self.proj.backward(c_proj, dy), self.heads)
        dq, dk, dv = multi_head_attention_vjp(do, q, k, v, probs)
        d_qkv = np.concatenate([merge_heads(dq), merge_heads(dk), merge_heads(dv)], axis=-1)
        return self.norm.backward(c_norm, self.qkv.backward(c_qkv, d_qkv))


class MlpBlock(SubBlock):
    """``LN -> linear -> GELU -> linear``, no residual."""

    def __init__(
        self,
        dim: int,
        hidden: int,
        rng: np.random.Generator,
        dtype: Any = np.float32,
        eps: float = 1e-6,
        drop_path_rate: float = 0.0,
    ):
        super().__init__(drop_path_rate)
        self.norm = LayerNorm(dim, eps, dtype)
        self.mlp = Mlp(dim, hidden, dim, rng, dtype)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if shape[-1] != self.mlp.fc2.d_out:
            raise DimensionError(f"MLP width {self.mlp.fc2.d_out} cannot take {shape}")
        return shape

    def branch_forward(self, x: Tensor) -> tuple[Tensor, tuple]:
        h, c_norm = self.norm.forward(x)
        y, c_mlp = self.mlp.forward(h)
        return y, (c_norm, c_mlp)

    def branch_backward(self, cache: tuple, dy: Tensor) -> Tensor:
        c_norm, c_mlp = cache
        return self.norm.backward(c_norm, self.mlp.backward(c_mlp, dy))


def drop_path_schedule(rate: float, depth: int) -> list[float]:
    """Stochastic depth rising linearly from 0 at the first block to ``rate`` at the last."""
    if depth == 1:
        return [rate]
    return [float(r) for r in np.linspace(0.0, rate, depth)]


def build_rev_vit(
    cfg: ViTConfig,
    seed: int = 0,
    dtype: Any = np.float32,
    schedule: Schedule = Schedule.REVERSIBLE,
) -> RevModel:
    """Patch stem, ``depth`` reversible blocks in one segment, termination and head."""
    rng = np.random.default_rng(seed)
    eps = cfg.layer_norm_eps
    d = cfg.embed_dim
    blocks = []
    for i, rate in enumerate(drop_path_schedule(cfg.drop_path_rate, cfg.depth)):
        f = Attention(d, cfg.heads, rng, dtype, eps, rate)
        g = MlpBlock(d, cfg.mlp_hidden, rng, dtype, eps, rate)
        blocks.append(RevBlock(f, g, index=i, token_shape=(cfg.num_tokens, d)))
    termination = Fusion(cfg.termination, d, rng, dtype, eps, lateral=False)
    return RevModel(
        stem=PatchEmbed(cfg, rng, dtype),
        stack=RevStack([ReversibleSegment(blocks)]),
        termination=termination,
        head=Linear(termination.out_dim, cfg.num_classes, rng, dtype),
        schedule=schedule,
        config=cfg,
    )
