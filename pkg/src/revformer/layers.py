"""Parameterised layers built on the kernels.

A layer's ``forward`` returns its output plus whatever its ``backward`` needs; ``backward``
returns the input cotangent and adds parameter cotangents into ``Parameter.grad``.
"""

from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np
from scipy.stats import truncnorm

from revformer import kernels as K
from revformer.exceptions import DimensionError
from revformer.kernels import Tensor

INIT_STD = 0.02


@dataclass(eq=False)
class Parameter:
    """A trainable tensor and its gradient buffer."""

    value: Tensor
    grad: Tensor = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def accumulate(self, g: Tensor) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter shape {self.value.shape}"
            )
        self.grad += g


class Module:
    """Anything that owns parameters, directly or through child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def trunc_normal(
    shape: tuple[int, ...], rng: np.random.Generator, dtype: Any, std: float = INIT_STD
) -> Tensor:
    """Normal(0, std) truncated to two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(dtype)


def tensors_in(obj: Any) -> Iterator[Tensor]:
    """Every ndarray reachable through tuples, lists and dicts."""
    if isinstance(obj, np.ndarray):
        yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from tensors_in(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from tensors_in(v)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype: Any = np.float32):
        self.weight = Parameter(trunc_normal((d_in, d_out), rng, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    @property
    def d_in(self) -> int:
        return self.weight.value.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.value.shape[1]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return K.linear(x, self.weight.value, self.bias.value), x

    def backward(self, x: Tensor, dy: Tensor) -> Tensor:
        g = K.linear_vjp(dy, x, self.weight.value)
        self.weight.accumulate(g.param_grads[0])
        self.bias.accumulate(g.param_grads[1])
        return g.input_grads[0]


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype: Any = np.float32):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return K.layer_norm(x, self.gamma.value, self.beta.value, self.eps), x

    def backward(self, x: Tensor, dy: Tensor) -> Tensor:
        g = K.layer_norm_vjp(dy, x, self.gamma.value, self.eps)
        self.gamma.accumulate(g.param_grads[0])
        self.beta.accumulate(g.param_grads[1])
        return g.input_grads[0]


class Mlp(Module):
    """``linear -> GELU -> linear``."""

    def __init__(
        self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator, dtype: Any = np.float32
    ):
        self.fc1 = Linear(d_in, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d_out, rng, dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, tuple]:
        h, c1 = self.fc1.forward(x)
        a = K.gelu(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, h, c2)

    def backward(self, cache: tuple, dy: Tensor) -> Tensor:
        c1, h, c2 = cache
        da = self.fc2.backward(c2, dy)
        dh = K.gelu_vjp(da, h).input_grads[0]
        return self.fc1.backward(c1, dh)


class TokenPool(Module):
    """Depthwise convolutional pooling of a token sequence laid out on an ``H x W`` grid."""

    def __init__(
        self,
        dim: int,
        kernel: int,
        stride: int,
        dtype: Any = np.float32,
        padding: K.Padding = "same",
    ):
        self.kernel = Parameter(
            np.full((kernel, kernel, dim), 1.0 / (kernel * kernel), dtype=dtype)
        )
        self.stride = stride
        self.padding = padding

    @property
    def kernel_size(self) -> int:
        return self.kernel.value.shape[0]

    def output_grid(self, grid: tuple[int, int]) -> tuple[int, int]:
        k = self.kernel_size
        return (
            K.conv_output_size(grid[0], k, self.stride, self.padding),
            K.conv_output_size(grid[1], k, self.stride, self.padding),
        )

    def forward(self, x: Tensor, grid: tuple[int, int]) -> tuple[Tensor, tuple]:
        b, n, c = x.shape
        if n != grid[0] * grid[1]:
            raise DimensionError(f"token count {n} does not match grid {grid[0]}x{grid[1]}")
        xg = x.reshape(b, grid[0], grid[1], c)
        y = K.depthwise_conv_pool(xg, self.kernel.value, self.stride, self.padding)
        return y.reshape(b, -1, c), (xg,)

    def backward(self, cache: tuple, dy: Tensor) -> Tensor:
        (xg,) = cache
        b, h, w, c = xg.shape
        ho, wo = self.output_grid((h, w))
        g = K.depthwise_conv_pool_vjp(
            dy.reshape(b, ho, wo, c), xg, self.kernel.value, self.stride, self.padding
        )
        self.kernel.accumulate(g.param_grads[0])
        return g.input_grads[0].reshape(b, h * w, c)


class ConvStem(Module):
    """Overlapping convolutional patch embedding, image ``B x H x W x C`` to tokens."""

    def __init__(
        self,
        in_chans: int,
        dim: int,
        kernel: int,
        stride: int,
        padding: int,
        rng: np.random.Generator,
        dtype: Any = np.float32,
    ):
        self.weight = Parameter(trunc_normal((kernel, kernel, in_chans, dim), rng, dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor]:
        y = K.conv2d(image, self.weight.value, self.bias.value, self.stride, self.padding)
        return y.reshape(y.shape[0], -1, y.shape[3]), image

    def backward(self, image: Tensor, dy: Tensor) -> Tensor:
        _, h, w, _ = image.shape
        kh = self.weight.value.shape[0]
        ho = K.conv_output_size(h, kh, self.stride, self.padding)
        wo = K.conv_output_size(w, kh, self.stride, self.padding)
        g = K.conv2d_vjp(
            dy.reshape(dy.shape[0], ho, wo, dy.shape[2]),
            image,
            self.weight.value,
            self.stride,
            self.padding,
        )
        self.weight.accumulate(g.param_grads[0])
        self.bias.accumulate(g.param_grads[1])
        return g.input_grads[0]


class PositionEmbedding(Module):
    """Learned absolute position table added to the stem tokens."""

    def __init__(
        self, num_tokens: int, dim: int, rng: np.random.Generator, dtype: Any = np.float32
    ):
        self.table = Parameter(trunc_normal((num_tokens, dim), rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2:] != self.table.value.shape:
            raise DimensionError(
                f"tokens {x.shape} do not match position table {self.table.value.shape}"
            )
        return x + self.table.value

    def backward(self, dy: Tensor) -> Tensor:
        self.table.accumulate(dy.reshape(-1, *self.table.value.shape).sum(axis=0))
        return dy
