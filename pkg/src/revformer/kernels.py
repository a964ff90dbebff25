"""Dense tensor kernels, each paired with an explicit vector-Jacobian product.

Every kernel is a pure function of its inputs. The matching ``*_vjp`` takes the
output cotangent plus whichever primal values it needs and returns a ``KernelGrad``.
Reductions run in a fixed order so a recomputation reproduces the forward bit for bit.
"""

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import erf

from revformer.exceptions import ConfigError, DimensionError

Tensor = np.ndarray

Stride = int | tuple[int, int]
Padding = str | int


@dataclass
class KernelGrad:
    """Cotangents of a kernel's differentiable inputs and of its parameters."""

    input_grads: tuple[Tensor, ...]
    param_grads: tuple[Tensor, ...] = ()


@dataclass
class MacTally:
    """Running multiply-accumulate count collected by ``count_macs``."""

    macs: int = 0
    by_kernel: dict[str, int] = field(default_factory=dict)

    def add(self, kernel: str, n: int) -> None:
        self.macs += n
        self.by_kernel[kernel] = self.by_kernel.get(kernel, 0) + n


_active_tally: ContextVar[MacTally | None] = ContextVar("revformer_mac_tally", default=None)


@contextmanager
def count_macs() -> Iterator[MacTally]:
    """Collect the MACs of every matmul/linear/conv kernel (forward and vjp) in scope."""
    tally = MacTally()
    token = _active_tally.set(tally)
    try:
        yield tally
    finally:
        _active_tally.reset(token)


def _tick(kernel: str, n: int) -> None:
    tally = _active_tally.get()
    if tally is not None:
        tally.add(kernel, int(n))


def philox(seed: int) -> np.random.Generator:
    """Counter-based generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.Philox(seed))


# --- matmul / linear -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes, with ``b`` either 2-D or batch-matched."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ {a.shape} and {b.shape}")
    out = np.matmul(a, b)
    _tick("matmul", out.size * a.shape[-1])
    return out


def matmul_vjp(dc: Tensor, a: Tensor, b: Tensor) -> KernelGrad:
    da = np.matmul(dc, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        db = a.reshape(-1, a.shape[-1]).T @ dc.reshape(-1, dc.shape[-1])
    else:
        db = np.matmul(np.swapaxes(a, -1, -2), dc)
    _tick("matmul", 2 * dc.size * a.shape[-1])
    return KernelGrad(input_grads=(da, db))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``y = x W + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}"
        )
    rows = x.reshape(-1, w.shape[0])
    y = rows @ w + b
    _tick("linear", rows.shape[0] * w.shape[0] * w.shape[1])
    return y.reshape(*x.shape[:-1], w.shape[1])


def linear_vjp(dy: Tensor, x: Tensor, w: Tensor) -> KernelGrad:
    rows = x.reshape(-1, w.shape[0])
    drows = dy.reshape(-1, w.shape[1])
    dx = (drows @ w.T).reshape(x.shape)
    dw = rows.T @ drows
    db = drows.sum(axis=0)
    _tick("linear", 2 * rows.shape[0] * w.shape[0] * w.shape[1])
    return KernelGrad(input_grads=(dx,), param_grads=(dw, db))


# --- normalisation and activations ---------------------------------------------------------


def _ln_stats(x: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return centered * rstd, rstd


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each row of the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    xhat, _ = _ln_stats(x, eps)
    return xhat * gamma + beta


def layer_norm_vjp(dy: Tensor, x: Tensor, gamma: Tensor, eps: float = 1e-6) -> KernelGrad:
    xhat, rstd = _ln_stats(x, eps)
    dxhat = dy * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(dy.ndim - 1))
    return KernelGrad(
        input_grads=(dx,), param_grads=((dy * xhat).sum(axis=lead), dy.sum(axis=lead))
    )


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_vjp(dy: Tensor, x: Tensor) -> KernelGrad:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return KernelGrad(input_grads=(dy * (cdf + x * pdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(dy: Tensor, y: Tensor, axis: int = -1) -> KernelGrad:
    """Takes the softmax *output* ``y``."""
    return KernelGrad(input_grads=(y * (dy - (dy * y).sum(axis=axis, keepdims=True)),))


# --- convolutions --------------------------------------------------------------------------


def _pair(v: Stride) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Zero padding (before, after) giving ``ceil(size / stride)`` outputs; extra goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _pads(
    h: int, w: int, kh: int, kw: int, stride: tuple[int, int], padding: Padding
) -> tuple[tuple[int, int], tuple[int, int]]:
    if padding == "same":
        return same_padding(h, kh, stride[0]), same_padding(w, kw, stride[1])
    if isinstance(padding, int) and padding >= 0:
        return (padding, padding), (padding, padding)
    raise ConfigError(f"padding must be 'same' or a non-negative int, got {padding!r}")


def conv_output_size(size: int, kernel: int, stride: int, padding: Padding) -> int:
    """Output extent of one spatial axis under the padding rule."""
    if padding == "same":
        return -(-size // stride)
    return (size + 2 * int(padding) - kernel) // stride + 1


def _padded(
    x: Tensor, kh: int, kw: int, stride: tuple[int, int], padding: Padding, name: str
) -> tuple[Tensor, tuple[int, int], int, int]:
    _, h, w, _ = x.shape
    (pt, pb), (pl, pr) = _pads(h, w, kh, kw, stride, padding)
    if kh > h + pt + pb or kw > w + pl + pr:
        raise DimensionError(
            f"{name}: kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}"
        )
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ho = (xp.shape[1] - kh) // stride[0] + 1
    wo = (xp.shape[2] - kw) // stride[1] + 1
    return xp, (pt, pl), ho, wo


def _window(i: int, j: int, ho: int, wo: int, stride: tuple[int, int]) -> tuple[slice, ...]:
    return (
        slice(None),
        slice(i, i + stride[0] * (ho - 1) + 1, stride[0]),
        slice(j, j + stride[1] * (wo - 1) + 1, stride[1]),
        slice(None),
    )


def depthwise_conv_pool(
    x: Tensor, kernel: Tensor, stride: Stride = 1, padding: Padding = "same"
) -> Tensor:
    """Per-channel strided convolution of a ``B x H x W x C`` token grid.

    Args:
        x: Token grid
        kernel: ``kh x kw x C`` depthwise weights
        stride: ``(sH, sW)`` or a single int
        padding: ``"same"`` (output ``ceil(H/sH) x ceil(W/sW)``) or explicit zero padding

    Returns:
        Pooled grid ``B x Ho x Wo x C``
    """
    if x.ndim != 4 or kernel.ndim != 3 or kernel.shape[2] != x.shape[3]:
        raise DimensionError(f"depthwise_conv_pool: input {x.shape} vs kernel {kernel.shape}")
    s = _pair(stride)
    kh, kw, _ = kernel.shape
    xp, _, ho, wo = _padded(x, kh, kw, s, padding, "depthwise_conv_pool")
    y = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=np.result_type(x, kernel))
    for i in range(kh):
        for j in range(kw):
            y += xp[_window(i, j, ho, wo, s)] * kernel[i, j]
    _tick("depthwise_conv_pool", y.size * kh * kw)
    return y


def depthwise_conv_pool_vjp(
    dy: Tensor, x: Tensor, kernel: Tensor, stride: Stride = 1, padding: Padding = "same"
) -> KernelGrad:
    s = _pair(stride)
    kh, kw, _ = kernel.shape
    xp, (pt, pl), ho, wo = _padded(x, kh, kw, s, padding, "depthwise_conv_pool")
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    for i in range(kh):
        for j in range(kw):
            win = _window(i, j, ho, wo, s)
            dk[i, j] = (xp[win] * dy).sum(axis=(0, 1, 2))
            dxp[win] += dy * kernel[i, j]
    _tick("depthwise_conv_pool", 2 * dy.size * kh * kw)
    dx = dxp[:, pt : pt + x.shape[1], pl : pl + x.shape[2], :]
    return KernelGrad(input_grads=(dx,), param_grads=(dk,))


def max_pool(x: Tensor, kernel: int, stride: Stride = 1) -> tuple[Tensor, Tensor]:
    """Per-channel windowed max with SAME geometry; padding never wins.

    Returns the pooled grid and the winning window offset of every output element.
    """
    if x.ndim != 4:
        raise DimensionError(f"max_pool: expected B x H x W x C, got {x.shape}")
    s = _pair(stride)
    _, h, w, _ = x.shape
    (pt, pb), (pl, pr) = _pads(h, w, kernel, kernel, s, "same")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    ho = (xp.shape[1] - kernel) // s[0] + 1
    wo = (xp.shape[2] - kernel) // s[1] + 1
    y = np.full((x.shape[0], ho, wo, x.shape[3]), -np.inf, dtype=x.dtype)
    arg = np.zeros(y.shape, dtype=np.int64)
    for i in range(kernel):
        for j in range(kernel):
            win = xp[_window(i, j, ho, wo, s)]
            better = win > y
            y = np.where(better, win, y)
            arg = np.where(better, i * kernel + j, arg)
    return y, arg


def max_pool_vjp(
    dy: Tensor, arg: Tensor, input_shape: tuple[int, ...], kernel: int, stride: Stride = 1
) -> KernelGrad:
    s = _pair(stride)
    _, h, w, _ = input_shape
    (pt, pb), (pl, pr) = _pads(h, w, kernel, kernel, s, "same")
    dxp = np.zeros(
        (input_shape[0], h + pt + pb, w + pl + pr, input_shape[3]), dtype=dy.dtype
    )
    ho, wo = dy.shape[1], dy.shape[2]
    for i in range(kernel):
        for j in range(kernel):
            dxp[_window(i, j, ho, wo, s)] += np.where(arg == i * kernel + j, dy, 0.0)
    return KernelGrad(input_grads=(dxp[:, pt : pt + h, pl : pl + w, :],))


def conv2d(
    x: Tensor, w: Tensor, b: Tensor, stride: Stride = 1, padding: Padding = 0
) -> Tensor:
    """Dense convolution, ``B x H x W x Cin`` with ``kh x kw x Cin x Cout`` weights."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3] or b.shape != (w.shape[3],):
        raise DimensionError(f"conv2d: input {x.shape} vs weight {w.shape} / bias {b.shape}")
    s = _pair(stride)
    kh, kw, cin, cout = w.shape
    xp, _, ho, wo = _padded(x, kh, kw, s, padding, "conv2d")
    y = np.zeros((x.shape[0], ho, wo, cout), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            y += xp[_window(i, j, ho, wo, s)] @ w[i, j]
    _tick("conv2d", x.shape[0] * ho * wo * kh * kw * cin * cout)
    return y + b


def conv2d_vjp(
    dy: Tensor, x: Tensor, w: Tensor, stride: Stride = 1, padding: Padding = 0
) -> KernelGrad:
    s = _pair(stride)
    kh, kw, cin, cout = w.shape
    xp, (pt, pl), ho, wo = _padded(x, kh, kw, s, padding, "conv2d")
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    drows = dy.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            win = _window(i, j, ho, wo, s)
            dw[i, j] = xp[win].reshape(-1, cin).T @ drows
            dxp[win] += dy @ w[i, j].T
    _tick("conv2d", 2 * x.shape[0] * ho * wo * kh * kw * cin * cout)
    dx = dxp[:, pt : pt + x.shape[1], pl : pl + x.shape[2], :]
    return KernelGrad(input_grads=(dx,), param_grads=(dw, drows.sum(axis=0)))


# --- structural ops ------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} and {b.shape}")
    return a + b


def add_vjp(dy: Tensor) -> KernelGrad:
    return KernelGrad(input_grads=(dy, dy))


def scale(x: Tensor, alpha: float) -> Tensor:
    return x * alpha


def scale_vjp(dy: Tensor, alpha: float) -> KernelGrad:
    return KernelGrad(input_grads=(dy * alpha,))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading extents differ {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=-1)


def concat_vjp(dy: Tensor, split_at: int) -> KernelGrad:
    return KernelGrad(input_grads=split(dy, split_at))


def split(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Exact inverse of ``concat``: cut the last axis at ``at``."""
    if not 0 < at < x.shape[-1]:
        raise DimensionError(f"split: cannot cut last axis of {x.shape} at {at}")
    return x[..., :at], x[..., at:]


def split_vjp(da: Tensor, db: Tensor) -> KernelGrad:
    return KernelGrad(input_grads=(concat(da, db),))


def mean_pool(x: Tensor) -> Tensor:
    """Average over the token axis (second to last)."""
    return x.mean(axis=-2)


def mean_pool_vjp(dy: Tensor, num_tokens: int) -> KernelGrad:
    dx = np.repeat(dy[..., None, :] / num_tokens, num_tokens, axis=-2)
    return KernelGrad(input_grads=(dx,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"maximum: shapes differ {a.shape} and {b.shape}")
    return np.maximum(a, b)


def maximum_vjp(dy: Tensor, a: Tensor, b: Tensor) -> KernelGrad:
    """Ties route the cotangent to ``a``."""
    take_a = a >= b
    return KernelGrad(input_grads=(np.where(take_a, dy, 0.0), np.where(take_a, 0.0, dy)))


# --- stochastic ops and loss ---------------------------------------------------------------


def dropout_scale(shape: tuple[int, ...], rate: float, seed: int, training: bool, dtype) -> Tensor:
    """Element-wise keep mask scaled by ``1 / (1 - rate)``, fully determined by ``seed``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = philox(seed).random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(x: Tensor, rate: float, seed: int, training: bool) -> Tensor:
    return x * dropout_scale(x.shape, rate, seed, training, x.dtype)


def dropout_vjp(dy: Tensor, rate: float, seed: int, training: bool) -> KernelGrad:
    return KernelGrad(input_grads=(dy * dropout_scale(dy.shape, rate, seed, training, dy.dtype),))


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch; also returns the class probabilities."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -log_probs[np.arange(labels.shape[0]), labels].mean()
    return float(loss), np.exp(log_probs)


def softmax_cross_entropy_vjp(probs: Tensor, labels: Tensor) -> KernelGrad:
    dlogits = probs.copy()
    dlogits[np.arange(labels.shape[0]), labels] -= 1.0
    return KernelGrad(input_grads=(dlogits / labels.shape[0],))
