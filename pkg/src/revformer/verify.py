"""Verification suites.

Each suite returns one ``CaseResult`` per case it checks; a suite passes when all its cases do.
"""

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from revformer import kernels as K
from revformer.analytics import (
    activation_lower_bound,
    estimate_activation_memory,
    fit_linear,
    measure_live_memory,
    recompute_flops,
)
from revformer.config import MViTConfig, RunConfig, ViTConfig, preset, settings
from revformer.data import random_images
from revformer.engine import (
    RevBlock,
    Schedule,
    StepContext,
    TwoStreamState,
    drop_path,
    initiate_streams,
    rev_forward,
    rev_inverse,
    segment_forward,
)
from revformer.exceptions import ConfigError, InvariantViolationError
from revformer.gradcheck import check_vjp, relative_error
from revformer.layers import Module
from revformer.model import RevModel
from revformer.mvit import PoolAttention, stage_preserving_block
from revformer.utils import save_metrics, write_table
from revformer.vit import Attention, MlpBlock
from revformer.zoo import build_model

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["suite", "case", "passed", "max_error", "tolerance", "detail", "seconds"]

# Invertibility stacks reuse this many distinct blocks so depth-24 stacks at width 768 stay
# small in memory; every block still has its own index and seeds.
DISTINCT_BLOCKS = 4


@dataclass
class CaseResult:
    suite: str
    case: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


def vit_stack(
    width: int,
    depth: int,
    tokens: int,
    rng: np.random.Generator,
    dtype: Any,
    drop_path_rate: float = 0.0,
    distinct: int | None = None,
) -> list[RevBlock]:
    """Rev-ViT blocks at ``width``; sub-blocks repeat every ``distinct`` blocks."""
    heads = max(1, width // 64)
    distinct = depth if distinct is None else min(distinct, depth)
    subs = [
        (
            Attention(width, heads, rng, dtype, drop_path_rate=drop_path_rate),
            MlpBlock(width, 4 * width, rng, dtype, drop_path_rate=drop_path_rate),
        )
        for _ in range(distinct)
    ]
    return [
        RevBlock(*subs[i % distinct], index=i, token_shape=(tokens, width)) for i in range(depth)
    ]


def random_state(
    batch: int, tokens: int, width: int, rng: np.random.Generator, dtype: Any
) -> TwoStreamState:
    return TwoStreamState(
        rng.standard_normal((batch, tokens, width)).astype(dtype),
        rng.standard_normal((batch, tokens, width)).astype(dtype),
    )


def _timed(fn: Callable[[], CaseResult]) -> CaseResult:
    t0 = time.perf_counter()
    result = fn()
    result.seconds = time.perf_counter() - t0
    return result


# --- invertibility -------------------------------------------------------------------------


def suite_invertibility(cfg: RunConfig) -> list[CaseResult]:
    v = cfg.verify
    results = []
    for precision in v.precisions:
        dtype = np.dtype(precision)
        tol = v.tol_inverse_float64 if precision == "float64" else v.tol_inverse_float32
        for width in v.widths:
            for depth in v.depths:

                def case(width: int = width, depth: int = depth) -> CaseResult:
                    rng = np.random.default_rng(cfg.seed)
                    blocks = vit_stack(width, depth, v.tokens, rng, dtype, 0.1, DISTINCT_BLOCKS)
                    s0 = random_state(v.batch, v.tokens, width, rng, dtype)
                    ctx = StepContext(base_seed=cfg.seed, training=True)
                    s = s0
                    for block in blocks:
                        s = rev_forward(block, s, ctx)
                    for block in reversed(blocks):
                        s = rev_inverse(block, s)
                    err = float(max(np.abs(s.i1 - s0.i1).max(), np.abs(s.i2 - s0.i2).max()))
                    return CaseResult(
                        "invertibility", f"{precision}/d{width}/D{depth}", err < tol, err, tol
                    )

                results.append(_timed(case))
    return results


# --- gradient equivalence ------------------------------------------------------------------


def grad_snapshot(model: Module) -> dict[str, np.ndarray]:
    return {name: p.grad.copy() for name, p in model.named_parameters()}


def schedule_gradients(
    model: RevModel, images: np.ndarray, labels: np.ndarray, seed: int, schedule: Schedule
) -> tuple[float, dict[str, np.ndarray]]:
    model.zero_grad()
    ctx = model.context(step=1, base_seed=seed, training=True, schedule=schedule)
    loss, _ = model.loss_and_grad(images, labels, ctx)
    return loss, grad_snapshot(model)


def compare_gradients(
    a: dict[str, np.ndarray], b: dict[str, np.ndarray], floor_frac: float = 1e-3
) -> tuple[float, str]:
    """Worst per-parameter relative error of ``a`` against ``b``.

    Each parameter's error is normalised by its own largest gradient, floored at
    ``floor_frac`` of the largest gradient anywhere in the model. The floor only matters for
    a parameter whose whole gradient is near zero (a bias behind a zeroed path, say). There
    the criterion becomes absolute, ``floor_frac * max|grad|``, rather than relative. Pass
    ``floor_frac=0`` for the unfloored figure.
    """
    scale = max(float(np.abs(g).max()) for g in b.values())
    worst, name = 0.0, ""
    for key in b:
        err = relative_error(a[key], b[key], floor=max(floor_frac * scale, 1e-300))
        if err > worst:
            worst, name = err, key
    return worst, name


def suite_gradient(cfg: RunConfig) -> list[CaseResult]:
    tol = cfg.verify.tol_gradient
    results = []
    for name in ("tiny_vit", "tiny_mvit"):

        def case(name: str = name) -> CaseResult:
            section = preset(name).model_copy(update={"drop_path_rate": 0.1})
            dtype = np.dtype(settings.verify_dtype)
            model = build_model(section, seed=cfg.seed, dtype=dtype)
            images, labels = random_images(section, 4, np.random.default_rng(cfg.seed), dtype)
            _, g_rev = schedule_gradients(model, images, labels, cfg.seed, Schedule.REVERSIBLE)
            _, g_cached = schedule_gradients(model, images, labels, cfg.seed, Schedule.CACHED)
            err, where = compare_gradients(g_rev, g_cached)
            raw, raw_where = compare_gradients(g_rev, g_cached, floor_frac=0.0)
            detail = f"worst: {where}; unfloored {raw:.3e} at {raw_where}"
            return CaseResult("gradient", name, err < tol, err, tol, detail)

        results.append(_timed(case))
    return results


# --- finite differences --------------------------------------------------------------------


def _input(i: int = 0) -> Callable[[K.KernelGrad], np.ndarray]:
    return lambda g: g.input_grads[i]


def _param(i: int) -> Callable[[K.KernelGrad], np.ndarray]:
    return lambda g: g.param_grads[i]


def _wrt(
    i: int,
    forward: Callable[..., np.ndarray],
    backward: Callable[..., K.KernelGrad],
    pick: Callable[[K.KernelGrad], np.ndarray],
    args: tuple,
    rng: np.random.Generator,
    h: float,
) -> float:
    """Check the cotangent of ``args[i]``; ``backward(dy, *args)`` returns the kernel grads."""

    def swap(t: np.ndarray) -> list:
        a = list(args)
        a[i] = t
        return a

    return check_vjp(
        lambda t: forward(*swap(t)),
        lambda t, dy: pick(backward(dy, *swap(t))),
        args[i],
        rng,
        h,
    )


def _fd_checks(h: float) -> dict[str, Callable[[np.random.Generator], float]]:
    """Kernel name -> worst relative error of its vjp against central differences.

    Backward kernels are looked up on the module at call time.
    """

    def matmul(rng):
        args = (rng.standard_normal((5, 7)), rng.standard_normal((7, 3)))
        bwd = lambda dy, a, b: K.matmul_vjp(dy, a, b)  # noqa: E731
        return max(_wrt(i, K.matmul, bwd, _input(i), args, rng, h) for i in range(2))

    def linear(rng):
        args = (rng.standard_normal((3, 5)), rng.standard_normal((5, 2)), rng.standard_normal(2))
        bwd = lambda dy, x, w, b: K.linear_vjp(dy, x, w)  # noqa: E731
        picks = (_input(), _param(0), _param(1))
        return max(_wrt(i, K.linear, bwd, picks[i], args, rng, h) for i in range(3))

    def layer_norm(rng):
        args = (rng.standard_normal((4, 6)), rng.standard_normal(6), rng.standard_normal(6))
        bwd = lambda dy, x, g, b: K.layer_norm_vjp(dy, x, g)  # noqa: E731
        picks = (_input(), _param(0), _param(1))
        return max(_wrt(i, K.layer_norm, bwd, picks[i], args, rng, h) for i in range(3))

    def gelu(rng):
        bwd = lambda dy, x: K.gelu_vjp(dy, x)  # noqa: E731
        return _wrt(0, K.gelu, bwd, _input(), (rng.standard_normal((3, 4)),), rng, h)

    def softmax(rng):
        bwd = lambda dy, x: K.softmax_vjp(dy, K.softmax(x))  # noqa: E731
        return _wrt(0, K.softmax, bwd, _input(), (rng.standard_normal((2, 4)),), rng, h)

    def depthwise_conv_pool(rng):
        args = (rng.standard_normal((1, 8, 8, 3)), rng.standard_normal((3, 3, 3)))
        fwd = lambda x, k: K.depthwise_conv_pool(x, k, 2)  # noqa: E731
        bwd = lambda dy, x, k: K.depthwise_conv_pool_vjp(dy, x, k, 2)  # noqa: E731
        picks = (_input(), _param(0))
        return max(_wrt(i, fwd, bwd, picks[i], args, rng, h) for i in range(2))

    def conv2d(rng):
        args = (
            rng.standard_normal((1, 6, 6, 2)),
            rng.standard_normal((3, 3, 2, 3)),
            rng.standard_normal(3),
        )
        fwd = lambda x, w, b: K.conv2d(x, w, b, 2, 1)  # noqa: E731
        bwd = lambda dy, x, w, b: K.conv2d_vjp(dy, x, w, 2, 1)  # noqa: E731
        picks = (_input(), _param(0), _param(1))
        return max(_wrt(i, fwd, bwd, picks[i], args, rng, h) for i in range(3))

    def max_pool(rng):
        fwd = lambda x: K.max_pool(x, 3, 2)[0]  # noqa: E731
        bwd = lambda dy, x: K.max_pool_vjp(dy, K.max_pool(x, 3, 2)[1], x.shape, 3, 2)  # noqa: E731
        return _wrt(0, fwd, bwd, _input(), (rng.standard_normal((1, 6, 6, 2)),), rng, h)

    def structural(rng):
        a, c = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 4))
        x = rng.standard_normal((2, 5, 3))
        checks = [
            _wrt(0, K.concat, lambda dy, a, b: K.concat_vjp(dy, 3), _input(), (a, b), rng, h),
            _wrt(1, K.concat, lambda dy, a, b: K.concat_vjp(dy, 3), _input(1), (a, b), rng, h),
            _wrt(
                0,
                lambda t: K.split(t, 3)[1],
                lambda dy, t: K.split_vjp(np.zeros((2, 3)), dy),
                _input(),
                (np.concatenate([a, b], axis=-1),),
                rng,
                h,
            ),
            _wrt(0, K.add, lambda dy, a, b: K.add_vjp(dy), _input(), (a, c), rng, h),
            _wrt(1, K.add, lambda dy, a, b: K.add_vjp(dy), _input(1), (a, c), rng, h),
            _wrt(
                0,
                lambda t: K.scale(t, 0.7),
                lambda dy, t: K.scale_vjp(dy, 0.7),
                _input(),
                (a,),
                rng,
                h,
            ),
            _wrt(0, K.mean_pool, lambda dy, t: K.mean_pool_vjp(dy, 5), _input(), (x,), rng, h),
            _wrt(0, K.maximum, lambda dy, a, b: K.maximum_vjp(dy, a, b), _input(), (a, c), rng, h),
            _wrt(1, K.maximum, lambda dy, a, b: K.maximum_vjp(dy, a, b), _input(1), (a, c), rng, h),
        ]
        return max(checks)

    def cross_entropy(rng):
        labels = np.array([0, 3, 1])
        fwd = lambda t: np.asarray(K.softmax_cross_entropy(t, labels)[0])  # noqa: E731

        def bwd(dy, t):
            probs = K.softmax_cross_entropy(t, labels)[1]
            grads = K.softmax_cross_entropy_vjp(probs, labels)
            return K.KernelGrad(input_grads=(dy * grads.input_grads[0],))

        return _wrt(0, fwd, bwd, _input(), (rng.standard_normal((3, 4)),), rng, h)

    def dropout(rng):
        fwd = lambda t: K.dropout(t, 0.3, 11, True)  # noqa: E731
        bwd = lambda dy, t: K.dropout_vjp(dy, 0.3, 11, True)  # noqa: E731
        return _wrt(0, fwd, bwd, _input(), (rng.standard_normal((3, 4)),), rng, h)

    def stochastic_depth(rng):
        x = rng.standard_normal((4, 2, 3))
        scale = drop_path(np.ones_like(x), 0.5, 5, True)
        return check_vjp(lambda t: drop_path(t, 0.5, 5, True), lambda t, dy: dy * scale, x, rng, h)

    return {
        "matmul": matmul,
        "linear": linear,
        "layer_norm": layer_norm,
        "gelu": gelu,
        "softmax": softmax,
        "depthwise_conv_pool": depthwise_conv_pool,
        "conv2d": conv2d,
        "max_pool": max_pool,
        "concat/split/add/scale/mean_pool/maximum": structural,
        "softmax_cross_entropy": cross_entropy,
        "dropout": dropout,
        "drop_path": stochastic_depth,
    }


def suite_finite_difference(cfg: RunConfig) -> list[CaseResult]:
    tol = cfg.verify.tol_finite_difference
    results = []
    for name, check in _fd_checks(cfg.verify.fd_step).items():

        def case(name: str = name, check: Callable = check) -> CaseResult:
            err = check(np.random.default_rng(cfg.seed))
            return CaseResult("finite_difference", name, err < tol, err, tol)

        results.append(_timed(case))
    failed = [r.case for r in results if not r.passed]
    if failed:
        logger.error(f"Finite-difference check failed for: {', '.join(failed)}")
    return results


# --- shapes --------------------------------------------------------------------------------


def _reduced(section: ViTConfig | MViTConfig) -> ViTConfig | MViTConfig:
    """Same geometry, one block per stage."""
    if isinstance(section, MViTConfig):
        stages = [st.model_copy(update={"depth": 1}) for st in section.stages]
        return section.model_copy(update={"stages": stages})
    return section.model_copy(update={"depth": 1})


def _expected_streams(section: ViTConfig | MViTConfig) -> list[tuple[int, int]]:
    if isinstance(section, MViTConfig):
        return [(g * g, st.embed_dim) for g, st in zip(section.stage_grids(), section.stages)]
    return [(section.num_tokens, section.embed_dim)]


def stream_shapes(model: RevModel, images: np.ndarray) -> list[tuple[int, int]]:
    """Distinct per-sample stream shapes from the stem through the last segment."""
    ctx = model.context()
    tokens, _ = model.stem.forward(images)
    s = initiate_streams(tokens)
    seen = [tuple(s.i1.shape[1:])]
    for k, seg in enumerate(model.stack.segments):
        s, _ = segment_forward(seg, s, ctx)
        s.check(f"segment {k}")
        if tuple(s.i1.shape[1:]) != seen[-1]:
            seen.append(tuple(s.i1.shape[1:]))
    return seen


def suite_shape(cfg: RunConfig) -> list[CaseResult]:
    results = []
    for name in ("rev_vit_s", "rev_vit_b", "rev_vit_l", "rev_mvit_b"):

        def case(name: str = name) -> CaseResult:
            section = _reduced(preset(name))
            model = build_model(section, seed=cfg.seed, dtype=np.float32)
            size = section.image_size
            images = np.zeros((1, size, size, section.in_chans), np.float32)
            seen = stream_shapes(model, images)
            logits = model.predict(images)
            expected = _expected_streams(section)
            ok = seen == expected and logits.shape == (1, section.num_classes)
            return CaseResult("shape", name, ok, 0.0, 0.0, f"streams {seen}, expected {expected}")

        results.append(_timed(case))

    def gate() -> CaseResult:
        rng = np.random.default_rng(cfg.seed)
        f = PoolAttention(8, 16, 2, 4, 2, 1, 3, rng, np.float64)
        g = MlpBlock(8, 16, rng, np.float64)
        try:
            RevBlock(f, g, index=0, token_shape=(16, 8))
        except InvariantViolationError:
            return CaseResult("shape", "equidimensional_gate", True, 0.0, 0.0, "rejected")
        return CaseResult("shape", "equidimensional_gate", False, 0.0, 0.0, "accepted")

    results.append(_timed(gate))
    return results


# --- memory --------------------------------------------------------------------------------


def memory_model(width: int, depth: int) -> ViTConfig:
    return ViTConfig(
        image_size=16, patch_size=4, embed_dim=width, depth=depth, num_heads=1, num_classes=8
    )


def measure_step(
    section: ViTConfig, schedule: Schedule, batch: int, seed: int, dtype: Any = np.float32
) -> int:
    """Meter peak of one training step."""
    model = build_model(section, seed=seed, dtype=dtype, schedule=schedule)
    images, labels = random_images(section, batch, np.random.default_rng(seed), dtype)
    ctx = model.context(training=True)
    return measure_live_memory(lambda c: model.loss_and_grad(images, labels, c), ctx).peak_bytes


def retained_after_forward(section: ViTConfig, batch: int, seed: int) -> StepContext:
    """Context of a reversible training forward, left as it stands before backward."""
    model = build_model(section, seed=seed, dtype=np.float32, schedule=Schedule.REVERSIBLE)
    images, _ = random_images(section, batch, np.random.default_rng(seed), np.float32)
    ctx = model.context(training=True)
    model.forward(images, ctx)
    return ctx


def suite_memory(cfg: RunConfig) -> list[CaseResult]:
    v = cfg.verify
    depths = v.memory_depths
    schedules = (Schedule.REVERSIBLE, Schedule.CACHED)
    peaks: dict[Schedule, list[int]] = {s: [] for s in schedules}
    estimates: dict[Schedule, list[int]] = {s: [] for s in schedules}
    bound_ok = True
    t0 = time.perf_counter()
    for depth in depths:
        section = memory_model(v.memory_width, depth)
        for schedule in schedules:
            peak = measure_step(section, schedule, v.batch, cfg.seed)
            peaks[schedule].append(peak)
            estimates[schedule].append(estimate_activation_memory(section, schedule, v.batch, 4))
            bound_ok &= peak >= activation_lower_bound(section, v.batch, 4)
    elapsed = time.perf_counter() - t0

    rev, cached = peaks[Schedule.REVERSIBLE], peaks[Schedule.CACHED]
    rev_ratio = rev[-1] / rev[0]
    cached_ratio = cached[-1] / cached[0]
    fit = fit_linear(depths, estimates[Schedule.CACHED])
    agreement = max(abs(m - e) / e for s in schedules for m, e in zip(peaks[s], estimates[s]))
    span = f"D{depths[0]}->D{depths[-1]}"

    ctx = retained_after_forward(memory_model(v.memory_width, depths[-1]), v.batch, cfg.seed)
    meter = ctx.meter
    block_slots = [s for s in meter.slot_names if s.startswith("block:")]
    retained_ok = (
        meter.slot_tensors("streams") == 2
        and meter.seed_records == depths[-1]
        and not block_slots
    )

    return [
        CaseResult(
            "memory",
            f"reversible_flat {span}",
            rev_ratio < v.max_reversible_ratio,
            rev_ratio,
            v.max_reversible_ratio,
            f"peaks {rev}",
            elapsed,
        ),
        CaseResult(
            "memory",
            f"cached_grows {span}",
            cached_ratio > v.min_cached_ratio,
            cached_ratio,
            v.min_cached_ratio,
            f"peaks {cached}",
        ),
        CaseResult(
            "memory",
            "cached_estimate_linear",
            fit.r2 > 0.99,
            1.0 - fit.r2,
            0.01,
            f"slope {fit.slope:.0f} B/block, r2 {fit.r2:.6f}",
        ),
        CaseResult("memory", "estimate_vs_meter", agreement < 0.3, agreement, 0.3),
        CaseResult("memory", "meter_above_lower_bound", bound_ok, 0.0, 0.0),
        CaseResult(
            "memory",
            "reversible_retains_boundary_only",
            retained_ok,
            0.0,
            0.0,
            f"streams {meter.slot_tensors('streams')}, seeds {meter.seed_records}, "
            f"block slots {len(block_slots)}",
        ),
    ]


# --- recompute accounting ------------------------------------------------------------------


def count_step(
    model: RevModel, images: np.ndarray, labels: np.ndarray, schedule: Schedule
) -> tuple[int, int]:
    """Sub-block evaluations and kernel MACs of one training step."""
    model.stack.reset_counters()
    model.zero_grad()
    with K.count_macs() as tally:
        model.loss_and_grad(images, labels, model.context(training=True, schedule=schedule))
    return model.sub_block_calls(), tally.macs


def recompute_cases(cfg: RunConfig, name: str) -> list[CaseResult]:
    section = preset(name)
    dtype = np.dtype(settings.verify_dtype)
    model = build_model(section, seed=cfg.seed, dtype=dtype)
    images, labels = random_images(section, 2, np.random.default_rng(cfg.seed), dtype)

    model.stack.reset_counters()
    model.predict(images)
    forward_calls = model.sub_block_calls()
    rev_calls, rev_macs = count_step(model, images, labels, Schedule.REVERSIBLE)
    cached_calls, cached_macs = count_step(model, images, labels, Schedule.CACHED)

    calls_ok = rev_calls == 2 * forward_calls and cached_calls == forward_calls
    extra = rev_macs - cached_macs
    expected = len(labels) * recompute_flops(section)
    mac_err = abs(extra - expected) / expected
    return [
        CaseResult(
            "recompute",
            f"{name}/invocations",
            calls_ok,
            rev_calls / max(forward_calls, 1),
            2.0,
            f"forward {forward_calls}, reversible {rev_calls}, cached {cached_calls}",
        ),
        CaseResult(
            "recompute",
            f"{name}/extra_macs",
            mac_err < 0.05,
            mac_err,
            0.05,
            f"extra {extra}, one forward of the stack {expected}",
        ),
    ]


def suite_recompute(cfg: RunConfig) -> list[CaseResult]:
    results = []
    for name in ("tiny_vit", "tiny_mvit"):
        t0 = time.perf_counter()
        rows = recompute_cases(cfg, name)
        rows[0].seconds = time.perf_counter() - t0
        results.extend(rows)
    return results


# --- reduction -----------------------------------------------------------------------------


def share_weights(vit_block: RevBlock, mvit_block: RevBlock) -> None:
    """Copy a Rev-ViT block's weights into an unpooled stage-preserving block."""
    attn, pool = vit_block.f, mvit_block.f
    assert isinstance(attn, Attention) and isinstance(pool, PoolAttention)
    assert pool.norm is not None
    d = attn.proj.d_in
    pool.norm.gamma.value[...] = attn.norm.gamma.value
    pool.norm.beta.value[...] = attn.norm.beta.value
    for i, lin in enumerate((pool.q, pool.k, pool.v)):
        lin.weight.value[...] = attn.qkv.weight.value[:, i * d : (i + 1) * d]
        lin.bias.value[...] = attn.qkv.bias.value[i * d : (i + 1) * d]
    pool.proj.weight.value[...] = attn.proj.weight.value
    pool.proj.bias.value[...] = attn.proj.bias.value
    for (_, src), (_, dst) in zip(vit_block.g.named_parameters(), mvit_block.g.named_parameters()):
        dst.value[...] = src.value


def suite_reduction(cfg: RunConfig) -> list[CaseResult]:
    tol = 1e-12

    def case() -> CaseResult:
        rng = np.random.default_rng(cfg.seed)
        d, heads, grid = 32, 2, 4
        vit_block = RevBlock(
            Attention(d, heads, rng, np.float64),
            MlpBlock(d, 4 * d, rng, np.float64),
            index=0,
            token_shape=(grid * grid, d),
        )
        mvit_block = stage_preserving_block(0, d, heads, grid, 1, 1, 4.0, rng, np.float64)
        share_weights(vit_block, mvit_block)
        s = random_state(2, grid * grid, d, rng, np.float64)
        a = rev_forward(vit_block, s)
        b = rev_forward(mvit_block, s)
        err = max(relative_error(b.i1, a.i1), relative_error(b.i2, a.i2))
        return CaseResult("reduction", "unpooled_mvit_block_vs_vit_block", err < tol, err, tol)

    return [_timed(case)]


SUITE_FUNCTIONS: dict[str, Callable[[RunConfig], list[CaseResult]]] = {
    "invertibility": suite_invertibility,
    "gradient": suite_gradient,
    "finite_difference": suite_finite_difference,
    "shape": suite_shape,
    "memory": suite_memory,
    "recompute": suite_recompute,
    "reduction": suite_reduction,
}


def run_suites(cfg: RunConfig, suites: list[str] | None = None) -> list[CaseResult]:
    """Run the named suites (default: those listed in ``cfg.verify.suites``)."""
    names = suites or list(cfg.verify.suites)
    results: list[CaseResult] = []
    for name in names:
        if name not in SUITE_FUNCTIONS:
            raise ConfigError(f"unknown suite {name!r}; known: {list(SUITE_FUNCTIONS)}")
        logger.info(f"Running {name} suite...")
        rows = SUITE_FUNCTIONS[name](cfg)
        status = "passed" if all(r.passed for r in rows) else "FAILED"
        worst = max((r.max_error for r in rows), default=0.0)
        logger.info(f"  {name}: {status} ({len(rows)} cases, max error {worst:.3e})")
        results.extend(rows)
    return results


def summarize(results: list[CaseResult]) -> dict[str, Any]:
    """Pass/fail and worst error per suite."""
    summary: dict[str, Any] = {}
    for r in results:
        entry = summary.setdefault(r.suite, {"passed": True, "max_error": 0.0, "cases": 0})
        entry["passed"] &= r.passed
        entry["max_error"] = max(entry["max_error"], r.max_error)
        entry["cases"] += 1
    return {"passed": all(e["passed"] for e in summary.values()), "suites": summary}


def run_verify(cfg: RunConfig, suites: list[str] | None = None, out_dir: Path | None = None) -> int:
    """Run suites, write ``verify.csv`` and ``verify.json`` under ``out_dir``; 0 if all passed."""
    results = run_suites(cfg, suites)
    summary = summarize(results)
    if out_dir is not None:
        write_table([r.as_dict() for r in results], out_dir / "verify.csv", RESULT_COLUMNS)
        save_metrics(summary, out_dir / "verify.json")
        logger.info(f"Verification results saved to {out_dir}")
    failed = [name for name, entry in summary["suites"].items() if not entry["passed"]]
    if failed:
        logger.error(f"Failed suites: {', '.join(failed)}")
        return 1
    logger.info("All suites passed")
    return 0
