"""Central finite-difference checks for vector-Jacobian products."""

from typing import Callable

import numpy as np

from revformer.kernels import Tensor


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-12) -> float:
    """``max|a - b| / max(max|b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def numeric_vjp(
    fn: Callable[[Tensor], Tensor], x: Tensor, dy: Tensor, h: float = 1e-5
) -> Tensor:
    """``J(x)^T dy`` estimated by central differences, one input element at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(np.sum(fn(x) * dy))
        flat[i] = orig - h
        minus = float(np.sum(fn(x) * dy))
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def check_vjp(
    fn: Callable[[Tensor], Tensor],
    vjp: Callable[[Tensor, Tensor], Tensor],
    x: Tensor,
    rng: np.random.Generator,
    h: float = 1e-5,
) -> float:
    """Relative error between an analytic vjp and its finite-difference estimate.

    ``fn`` maps ``x`` to an output; ``vjp(x, dy)`` returns the cotangent of ``x``.
    """
    y = fn(x)
    dy = rng.standard_normal(np.shape(y))
    return relative_error(vjp(x, dy), numeric_vjp(fn, x, dy, h))
