"""Analytic cost accounting: parameters, MACs and activation memory per schedule.

Costs are derived from the architecture description alone, so full-size models are costed
without allocating weights. MACs count matmul, linear and convolution multiply-accumulates
(one MAC is one FLOP); softmax, layer norm and GELU are not counted. Memory counts activation
tensors only: no parameters, gradients or optimiser state.
"""

import logging
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Any, Callable

import numpy as np
import pandas as pd

from revformer.config import FusionStrategy, MViTConfig, ViTConfig, preset
from revformer.engine import SEED_RECORD_BYTES, ActivationMeter, Schedule, StepContext
from revformer.model import RevModel

logger = logging.getLogger(__name__)

ModelDescription = ViTConfig | MViTConfig


@dataclass(frozen=True)
class LayerCost:
    """Cost of one stem, block, transition, termination or head, per sample.

    ``cache_elems`` is what the cached schedule keeps for backward; ``workspace_elems`` is the
    transient cache while the layer is recomputed under the reversible schedule.
    """

    name: str
    kind: str
    params: int
    macs: int
    cache_elems: int
    workspace_elems: int = 0
    stream_elems: int = 0
    checkpoint_elems: int = 0


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int
    act_mem_cached: int
    act_mem_reversible: int
    recompute_flops: int

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _linear(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _fusion_cost(
    strategy: FusionStrategy, d: int, n: int, lateral: bool
) -> tuple[int, int, int, int]:
    """(params, macs, cache elements, output width) of a fusion over ``n`` tokens."""
    merged = d if strategy.op == "max" else 2 * d
    out = d if lateral else merged
    params = 4 * d if strategy.pre_norm else 0
    macs = 0
    cache = 2 * n * d if strategy.op == "max" and strategy.pre_norm else 0
    if strategy.op == "linear" or (strategy.op == "concat" and lateral):
        params += _linear(merged, out)
        macs += n * merged * out
        cache += n * merged
    elif strategy.op == "mlp":
        hidden = strategy.mlp_ratio * merged
        params += _linear(merged, hidden) + _linear(hidden, out)
        macs += n * (merged * hidden + hidden * out)
        cache += n * merged + 2 * n * hidden
    if strategy.post_norm:
        params += 2 * out
        cache += n * out
    return params, macs, cache, out


def _mlp_block(n: int, d: int, hidden: int) -> tuple[int, int, int]:
    return (
        2 * d + _linear(d, hidden) + _linear(hidden, d),
        2 * n * d * hidden,
        2 * n * d + 2 * n * hidden,
    )


def _vit_inventory(cfg: ViTConfig) -> list[LayerCost]:
    n, d, hidden, heads = cfg.num_tokens, cfg.embed_dim, cfg.mlp_hidden, cfg.heads
    patch = cfg.patch_size**2 * cfg.in_chans
    layers = [
        LayerCost(
            "stem", "stem", _linear(patch, d) + n * d, n * patch * d, n * patch, stream_elems=n * d
        )
    ]
    attn_params = 2 * d + _linear(d, 3 * d) + _linear(d, d)
    attn_macs = 3 * n * d * d + 2 * n * n * d + n * d * d
    attn_cache = 6 * n * d + heads * n * n
    mlp_params, mlp_macs, mlp_cache = _mlp_block(n, d, hidden)
    for i in range(cfg.depth):
        layers.append(
            LayerCost(
                f"block{i}",
                "block",
                attn_params + mlp_params,
                attn_macs + mlp_macs,
                attn_cache + mlp_cache,
                workspace_elems=max(attn_cache, mlp_cache),
                stream_elems=n * d,
            )
        )
    layers.extend(_head(cfg.termination, d, n, cfg.num_classes))
    return layers


def _head(strategy: FusionStrategy, d: int, n: int, classes: int) -> list[LayerCost]:
    params, macs, cache, out = _fusion_cost(strategy, d, n, lateral=False)
    return [
        LayerCost("termination", "termination", params, macs, cache),
        LayerCost("head", "head", _linear(out, classes), out * classes, out),
    ]


def _pool_attention(
    d_in: int,
    d_out: int,
    heads: int,
    grid: int,
    q_stride: int,
    kv_stride: int,
    kernel: int,
    pre_norm: bool,
) -> tuple[int, int, int, int]:
    """(params, macs, cache elements, query tokens) of pooling attention."""
    n = grid * grid
    q_pooled = q_stride > 1
    kv_pooled = not (kernel == 1 and kv_stride == 1)
    nq = _ceil_div(grid, q_stride) ** 2 if q_pooled else n
    nk = _ceil_div(grid, kv_stride) ** 2 if kv_pooled else n
    pool = kernel * kernel * d_in + 2 * d_in

    params = (2 * d_in if pre_norm else 0) + 3 * _linear(d_in, d_out) + _linear(d_out, d_out)
    params += (pool if q_pooled else 0) + (2 * pool if kv_pooled else 0)

    macs = nq * d_in * d_out + 2 * nk * d_in * d_out + 2 * nq * nk * d_out + nq * d_out * d_out
    if q_pooled:
        macs += nq * d_in * kernel * kernel
    if kv_pooled:
        macs += 2 * nk * d_in * kernel * kernel

    cache = (2 * n * d_in if pre_norm else n * d_in) + nq * d_out + 2 * nk * d_out
    cache += heads * nq * nk + nq * d_out
    if q_pooled:
        cache += n * d_in + 2 * nq * d_in
    if kv_pooled:
        cache += 2 * (n * d_in + 2 * nk * d_in)
    return params, macs, cache, nq


def _mvit_inventory(cfg: MViTConfig) -> list[LayerCost]:
    grid = cfg.stem_grid
    d0 = cfg.stages[0].embed_dim
    n0 = grid * grid
    k = cfg.stem_kernel
    layers = [
        LayerCost(
            "stem",
            "stem",
            k * k * cfg.in_chans * d0 + d0 + n0 * d0,
            n0 * k * k * cfg.in_chans * d0,
            cfg.image_size**2 * cfg.in_chans,
            stream_elems=n0 * d0,
        )
    ]
    index = 0
    for s, stage in enumerate(cfg.stages):
        d = stage.embed_dim
        if s > 0:
            prev = cfg.stages[s - 1]
            dp, n_in = prev.embed_dim, grid * grid
            hidden = int(d * stage.mlp_ratio)
            f_params, f_macs, f_cache, _ = _fusion_cost(cfg.fusion, dp, n_in, lateral=True)
            a_params, a_macs, a_cache, nq = _pool_attention(
                dp,
                d,
                stage.num_heads,
                grid,
                stage.q_pool_stride,
                stage.transition_kv_stride,
                cfg.pool_kernel,
                pre_norm=False,
            )
            m_params, m_macs, m_cache = _mlp_block(nq, d, hidden)
            params = f_params + 2 * dp + a_params + m_params
            macs = f_macs + a_macs + m_macs
            # the norm1 input is the only cache the transition adds
            cache = f_cache + n_in * dp + a_cache + m_cache
            layers.append(
                LayerCost(
                    f"transition{index}",
                    "transition",
                    params,
                    macs,
                    cache,
                    workspace_elems=cache,
                    stream_elems=nq * d,
                    checkpoint_elems=2 * n_in * dp,
                )
            )
            grid = _ceil_div(grid, stage.q_pool_stride)
            index += 1
        n = grid * grid
        a_params, a_macs, a_cache, _ = _pool_attention(
            d, d, stage.num_heads, grid, 1, stage.kv_pool_stride, cfg.pool_kernel, pre_norm=True
        )
        m_params, m_macs, m_cache = _mlp_block(n, d, int(d * stage.mlp_ratio))
        for _ in range(stage.depth):
            layers.append(
                LayerCost(
                    f"block{index}",
                    "block",
                    a_params + m_params,
                    a_macs + m_macs,
                    a_cache + m_cache,
                    workspace_elems=max(a_cache, m_cache),
                    stream_elems=n * d,
                )
            )
            index += 1
    layers.extend(_head(cfg.termination, cfg.stages[-1].embed_dim, grid * grid, cfg.num_classes))
    return layers


def layer_inventory(cfg: ModelDescription) -> list[LayerCost]:
    """Per-layer parameters, MACs and cache sizes, derived from the description alone."""
    if isinstance(cfg, MViTConfig):
        return _mvit_inventory(cfg)
    return _vit_inventory(cfg)


def _description(
    model: RevModel | ModelDescription, input_size: int | None = None
) -> ModelDescription:
    cfg = model.config if isinstance(model, RevModel) else model
    if input_size is not None and input_size != cfg.image_size:
        cfg = type(cfg).model_validate({**cfg.model_dump(), "image_size": input_size})
    return cfg


def count_params(model: RevModel | ModelDescription) -> int:
    """Total parameter elements; a built model is counted from its tensors."""
    if isinstance(model, RevModel):
        return model.num_parameters()
    return sum(layer.params for layer in layer_inventory(model))


def count_flops(model: RevModel | ModelDescription, input_size: int | None = None) -> int:
    """MACs of one forward pass of one sample."""
    return sum(layer.macs for layer in layer_inventory(_description(model, input_size)))


def recompute_flops(model: RevModel | ModelDescription) -> int:
    """Extra MACs the reversible backward spends re-running blocks and transitions."""
    return sum(
        layer.macs
        for layer in layer_inventory(_description(model))
        if layer.kind in ("block", "transition")
    )


def _reversible_elems(layers: list[LayerCost]) -> int:
    fixed = sum(
        layer.cache_elems for layer in layers if layer.kind in ("stem", "termination", "head")
    )
    fixed += sum(layer.checkpoint_elems for layer in layers)
    peak = max(
        (4 * layer.stream_elems + layer.workspace_elems for layer in layers), default=0
    )
    return fixed + peak


def _cached_elems(layers: list[LayerCost]) -> int:
    kept = sum(layer.cache_elems + layer.checkpoint_elems for layer in layers)
    last_stream = [layer.stream_elems for layer in layers if layer.stream_elems]
    return kept + 4 * (last_stream[-1] if last_stream else 0)


def estimate_activation_memory(
    model: RevModel | ModelDescription,
    schedule: Schedule | str,
    batch: int = 1,
    element_bytes: int = 4,
) -> int:
    """Peak activation bytes one training step holds for ``batch`` samples.

    Cached: every layer's backward cache plus the final streams and cotangents.
    Reversible: boundary streams and cotangents, the largest single-layer recompute workspace,
    and the inputs kept by checkpoint segments. Both add the recorded seeds.
    """
    layers = layer_inventory(_description(model))
    schedule = Schedule(schedule)
    elems = _cached_elems(layers) if schedule is Schedule.CACHED else _reversible_elems(layers)
    seeds = sum(1 for layer in layers if layer.kind == "block") * SEED_RECORD_BYTES
    return elems * batch * element_bytes + seeds


def activation_lower_bound(
    model: RevModel | ModelDescription, batch: int = 1, element_bytes: int = 4
) -> int:
    """Bytes any schedule must hold: stem input and the two boundary streams."""
    layers = layer_inventory(_description(model))
    stem = layers[0]
    return (stem.cache_elems + 2 * stem.stream_elems) * batch * element_bytes


def cost_report(model: RevModel | ModelDescription, element_bytes: int = 4) -> CostReport:
    cfg = _description(model)
    return CostReport(
        params=count_params(model),
        flops=count_flops(cfg),
        act_mem_cached=estimate_activation_memory(cfg, Schedule.CACHED, 1, element_bytes),
        act_mem_reversible=estimate_activation_memory(cfg, Schedule.REVERSIBLE, 1, element_bytes),
        recompute_flops=recompute_flops(cfg),
    )


@dataclass(frozen=True)
class MemoryMeasurement:
    peak_bytes: int
    tracemalloc_peak: int


def measure_live_memory(run: Callable[[StepContext], Any], ctx: StepContext) -> MemoryMeasurement:
    """Run ``run(ctx)`` and report the engine meter's peak.

    The Python allocator peak from ``tracemalloc`` is recorded alongside as a cross-check;
    it includes weights and temporaries, so only the meter is asserted on.
    """
    ctx.meter = ActivationMeter()
    tracemalloc.start()
    try:
        run(ctx)
        _, traced = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return MemoryMeasurement(
        peak_bytes=ctx.meter.peak_bytes,
        tracemalloc_peak=traced,
    )


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float


def fit_linear(x: Any, y: Any) -> LinearFit:
    """Least-squares line through ``(x, y)`` with its coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / total if total > 0 else 1.0
    return LinearFit(float(slope), float(intercept), r2)


# Published figures: params in millions, GFLOPs at 224 x 224. Every row must land within 1%
# of the params and 5% of the GFLOPs.
PARAMS_REL_TOL = 0.01
FLOPS_REL_TOL = 0.05

PUBLISHED_FIGURES: list[dict[str, Any]] = [
    {"model": "rev_vit_s", "params_m": 22.0, "gflops": 4.6},
    {"model": "rev_vit_b", "params_m": 87.0, "gflops": 17.6},
    {"model": "rev_vit_l", "params_m": 305.0, "gflops": 61.6},
    {"model": "rev_mvit_b", "params_m": 39.0, "gflops": 8.7},
]


def within(value: float, reference: float, rel_tol: float, resolution: float) -> bool:
    """True if ``value`` is within ``rel_tol`` of ``reference`` or rounds to it.

    ``resolution`` is the last printed digit of ``reference``; a value inside its rounding
    interval is as close as the published figure can resolve. Published parameter counts are
    printed to the nearest million, so "22M" stands for anything in [21.5M, 22.5M) and the
    params bound is never tighter than +-0.5M. GFLOPs carry one decimal, so their slack
    (+-0.05G) stays below the 5% bound for every published row.
    """
    return abs(value - reference) <= max(rel_tol * reference, resolution / 2)


def published_regression() -> pd.DataFrame:
    """Analytic parameter and MAC counts of the zoo against the published figures."""
    rows = []
    for ref in PUBLISHED_FIGURES:
        cfg = preset(ref["model"])
        params_m = count_params(cfg) / 1e6
        gflops = count_flops(cfg) / 1e9
        params_ok = within(params_m, ref["params_m"], PARAMS_REL_TOL, 1.0)
        flops_ok = within(gflops, ref["gflops"], FLOPS_REL_TOL, 0.1)
        rows.append(
            {
                "model": ref["model"],
                "params_m": round(params_m, 3),
                "published_params_m": ref["params_m"],
                "params_rel_err": abs(params_m - ref["params_m"]) / ref["params_m"],
                "gflops": round(gflops, 3),
                "published_gflops": ref["gflops"],
                "flops_rel_err": abs(gflops - ref["gflops"]) / ref["gflops"],
                "passed": params_ok and flops_ok,
            }
        )
    frame = pd.DataFrame(rows)
    logger.debug(f"Regression table:\n{frame.to_string(index=False)}")
    return frame
