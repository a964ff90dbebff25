"""Merging the two residual streams into one tensor.

Used laterally at every Rev-MViT stage transition (output width ``d``) and at the end of
both architectures, where the merged width is kept (``2d`` unless the operator is ``max``).
"""

from typing import Any

import numpy as np

from revformer import kernels as K
from revformer.config import FusionStrategy
from revformer.engine import TwoStreamState
from revformer.exceptions import ConfigError
from revformer.kernels import Tensor
from revformer.layers import LayerNorm, Linear, Mlp, Module


class Fusion(Module):
    """Two streams of width ``dim`` in, one tensor of width ``out_dim`` out."""

    def __init__(
        self,
        strategy: FusionStrategy | str,
        dim: int,
        rng: np.random.Generator,
        dtype: Any = np.float32,
        eps: float = 1e-6,
        lateral: bool = True,
    ):
        if isinstance(strategy, str):
            strategy = FusionStrategy.parse(strategy)
        if strategy.op not in ("max", "concat", "mlp", "linear"):
            raise ConfigError(f"unknown fusion operator {strategy.op!r}")
        self.strategy = strategy
        self.dim = dim
        self.lateral = lateral

        self.norm1 = LayerNorm(dim, eps, dtype) if strategy.pre_norm else None
        self.norm2 = LayerNorm(dim, eps, dtype) if strategy.pre_norm else None

        merged = dim if strategy.op == "max" else 2 * dim
        self.out_dim = dim if lateral else merged
        self.proj: Linear | None = None
        self.mlp: Mlp | None = None
        if strategy.op == "linear" or (strategy.op == "concat" and lateral):
            self.proj = Linear(merged, self.out_dim, rng, dtype)
        elif strategy.op == "mlp":
            self.mlp = Mlp(merged, strategy.mlp_ratio * merged, self.out_dim, rng, dtype)
        self.post_norm = LayerNorm(self.out_dim, eps, dtype) if strategy.post_norm else None

    def forward(
        self, a: Tensor, b: Tensor, seed: int = 0, training: bool = False
    ) -> tuple[Tensor, dict[str, Any]]:
        cache: dict[str, Any] = {}
        if self.norm1 is not None and self.norm2 is not None:
            a, cache["n1"] = self.norm1.forward(a)
            b, cache["n2"] = self.norm2.forward(b)
        if self.strategy.op == "max":
            y = K.maximum(a, b)
            cache["max"] = (a, b)
        else:
            y = K.concat(a, b)
        if self.proj is not None:
            y, cache["proj"] = self.proj.forward(y)
        elif self.mlp is not None:
            y, cache["mlp"] = self.mlp.forward(y)
        if self.post_norm is not None:
            y, cache["post"] = self.post_norm.forward(y)
        scale = None
        if training and self.strategy.dropout > 0:
            scale = K.dropout_scale(y.shape, self.strategy.dropout, seed, training, y.dtype)
            y = y * scale
        cache["dropout"] = scale
        return y, cache

    def backward(self, cache: dict[str, Any], dy: Tensor) -> tuple[Tensor, Tensor]:
        if cache["dropout"] is not None:
            dy = dy * cache["dropout"]
        if self.post_norm is not None:
            dy = self.post_norm.backward(cache["post"], dy)
        if self.proj is not None:
            dy = self.proj.backward(cache["proj"], dy)
        elif self.mlp is not None:
            dy = self.mlp.backward(cache["mlp"], dy)
        if self.strategy.op == "max":
            da, db = K.maximum_vjp(dy, *cache["max"]).input_grads
        else:
            da, db = K.concat_vjp(dy, self.dim).input_grads
        if self.norm1 is not None and self.norm2 is not None:
            da = self.norm1.backward(cache["n1"], da)
            db = self.norm2.backward(cache["n2"], db)
        return da, db


def lateral_fuse(
    s: TwoStreamState, fusion: Fusion, seed: int = 0, training: bool = False
) -> Tensor:
    """Merge both streams of ``s`` into one tensor."""
    s.check("lateral fusion")
    return fusion.forward(s.i1, s.i2, seed, training)[0]
