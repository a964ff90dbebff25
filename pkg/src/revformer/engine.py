"""Reversible two-stream engine.

A reversible block maps ``(I1, I2)`` to ``O2 = I2 + F(I1)``, ``O1 = I1 + G(O2)``. Its inputs
can be rebuilt from its outputs, so the backward pass walks the stack right to left,
recomputing each block's inputs instead of reading them from a cache. Stochastic layers are
replayed from per-block seeds recorded in the stream state.

Non-reversible transforms (stage transitions) sit in checkpoint segments that keep their input.
"""

import logging
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator, NamedTuple

import numpy as np

from revformer import kernels as K
from revformer.exceptions import (
    ConfigError,
    InvariantViolationError,
    NumericError,
    ReplayError,
)
from revformer.kernels import Tensor
from revformer.layers import Module, tensors_in

logger = logging.getLogger(__name__)

ROLE_F = 0
ROLE_G = 1
ROLE_EXTRA = 2

# Bytes charged per recorded seed: one 64-bit seed for each of F and G.
SEED_RECORD_BYTES = 16


class Schedule(str, Enum):
    """How activations are kept between forward and backward."""

    REVERSIBLE = "reversible"
    CACHED = "cached"


def derive_seed(base_seed: int, step: int, block: int, role: int) -> int:
    """Seed for one stochastic layer, keyed by (run seed, step, block index, layer role)."""
    state = np.random.SeedSequence([base_seed, step, block, role]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])


@dataclass(frozen=True)
class SeedRecord:
    block: int
    seeds: tuple[int, ...]
    training: bool

    @property
    def f(self) -> int:
        return self.seeds[ROLE_F]

    @property
    def g(self) -> int:
        return self.seeds[ROLE_G]


class ActivationMeter:
    """Bytes of activation tensors held by the engine, with their running peak.

    Tensors are registered under named slots and deduplicated by identity, so a tensor held
    by two slots counts once. Recorded seeds are charged ``SEED_RECORD_BYTES`` each.
    """

    def __init__(self) -> None:
        self._slots: dict[str, list[int]] = {}
        self._tensors: dict[int, Tensor] = {}
        self._refs: dict[int, int] = {}
        self._tensor_bytes = 0
        self.seed_records = 0
        self.peak_bytes = 0

    @property
    def live_bytes(self) -> int:
        return self._tensor_bytes + self.seed_records * SEED_RECORD_BYTES

    @property
    def live_tensors(self) -> int:
        return len(self._tensors)

    def slot_tensors(self, slot: str) -> int:
        return len(self._slots.get(slot, ()))

    @property
    def slot_names(self) -> list[str]:
        return list(self._slots)

    def _update_peak(self) -> None:
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def hold(self, slot: str, obj: Any) -> None:
        """Register the tensors in ``obj`` under ``slot``, replacing what the slot held."""
        ids = []
        for t in tensors_in(obj):
            key = id(t)
            if key in ids:
                continue
            ids.append(key)
            if key not in self._tensors:
                self._tensors[key] = t
                self._refs[key] = 0
                self._tensor_bytes += t.nbytes
            self._refs[key] += 1
        self._update_peak()
        old = self._slots.get(slot)
        self._slots[slot] = ids
        if old is not None:
            self._drop(old)

    def release(self, slot: str) -> None:
        ids = self._slots.pop(slot, None)
        if ids is not None:
            self._drop(ids)

    def _drop(self, ids: list[int]) -> None:
        for key in ids:
            self._refs[key] -= 1
            if self._refs[key] == 0:
                self._tensor_bytes -= self._tensors.pop(key).nbytes
                del self._refs[key]

    def set_seed_records(self, n: int) -> None:
        self.seed_records = n
        self._update_peak()

    @contextmanager
    def workspace(self, slot: str, obj: Any) -> Iterator[None]:
        """Hold ``obj`` for the duration of the block."""
        self.hold(slot, obj)
        try:
            yield
        finally:
            self.release(slot)

    def reset(self) -> None:
        self.__init__()  # type: ignore[misc]


@dataclass
class StepContext:
    """Everything a forward/backward pair needs besides tensors."""

    step: int = 0
    base_seed: int = 0
    training: bool = False
    schedule: Schedule = Schedule.REVERSIBLE
    meter: ActivationMeter = field(default_factory=ActivationMeter)

    def record(self, block: int, roles: int = 2) -> SeedRecord:
        seeds = tuple(derive_seed(self.base_seed, self.step, block, r) for r in range(roles))
        return SeedRecord(block=block, seeds=seeds, training=self.training)


@dataclass
class TwoStreamState:
    i1: Tensor
    i2: Tensor
    seeds: dict[int, SeedRecord] = field(default_factory=dict)

    def check(self, where: str) -> None:
        if self.i1.shape != self.i2.shape:
            raise InvariantViolationError(
                f"{where}: stream shapes differ {self.i1.shape} and {self.i2.shape}"
            )


def initiate_streams(tokens: Tensor) -> TwoStreamState:
    """Both streams start as the same tensor (duplication, not a channel split)."""
    return TwoStreamState(tokens, tokens)


# --- stochastic depth ----------------------------------------------------------------------


def drop_path_scale(
    batch: int, ndim: int, rate: float, seed: int, training: bool, dtype: Any
) -> Tensor | None:
    """Per-sample keep mask scaled by ``1 / (1 - rate)``; ``None`` means identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop path rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return None
    keep = K.philox(seed).random(batch) >= rate
    return (keep.astype(dtype) / (1.0 - rate)).reshape((batch,) + (1,) * (ndim - 1))


def drop_path(x: Tensor, rate: float, seed: int, training: bool) -> Tensor:
    """Zero whole samples with probability ``rate``, rescaling the survivors."""
    scale = drop_path_scale(x.shape[0], x.ndim, rate, seed, training, x.dtype)
    return x if scale is None else x * scale


# --- sub-blocks and blocks -----------------------------------------------------------------


class SubBlock(Module, ABC):
    """One of the two residual functions of a reversible block.

    Subclasses implement the branch (without residual); the base applies stochastic depth,
    enforces equidimensionality, and counts evaluations.
    """

    def __init__(self, drop_path_rate: float = 0.0) -> None:
        if not 0.0 <= drop_path_rate < 1.0:
            raise ConfigError(f"drop path rate must lie in [0, 1), got {drop_path_rate}")
        self.drop_path_rate = drop_path_rate
        self.calls = 0

    @abstractmethod
    def branch_forward(self, x: Tensor) -> tuple[Tensor, Any]: ...

    @abstractmethod
    def branch_backward(self, cache: Any, dy: Tensor) -> Tensor: ...

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x: Tensor, seed: int, training: bool) -> tuple[Tensor, tuple]:
        self.calls += 1
        y, inner = self.branch_forward(x)
        if y.shape != x.shape:
            raise InvariantViolationError(
                f"{type(self).__name__} is not equidimensional: {x.shape} -> {y.shape}"
            )
        scale = drop_path_scale(x.shape[0], y.ndim, self.drop_path_rate, seed, training, y.dtype)
        if scale is not None:
            y = y * scale
        return y, (inner, scale)

    def backward(self, cache: tuple, dy: Tensor) -> Tensor:
        inner, scale = cache
        return self.branch_backward(inner, dy if scale is None else dy * scale)

    def apply(self, x: Tensor, seed: int, training: bool) -> Tensor:
        return self.forward(x, seed, training)[0]

    def vjp(self, x: Tensor, dy: Tensor, seed: int, training: bool) -> Tensor:
        _, cache = self.forward(x, seed, training)
        return self.backward(cache, dy)


class RevBlock(Module):
    """Reversible unit; residual signal only flows through the cross-stream additions."""

    def __init__(self, f: SubBlock, g: SubBlock, index: int, token_shape: tuple[int, ...]):
        for name, fn in (("F", f), ("G", g)):
            out = fn.output_shape(tuple(token_shape))
            if out != tuple(token_shape):
                raise InvariantViolationError(
                    f"block {index}: {name} maps {tuple(token_shape)} to {out}, "
                    "reversible sub-blocks must be equidimensional"
                )
        self.f = f
        self.g = g
        self.index = index
        self.token_shape = tuple(token_shape)

    @property
    def drop_path_rate(self) -> float:
        return self.f.drop_path_rate

    def reset_counters(self) -> None:
        self.f.calls = 0
        self.g.calls = 0


def _seed_for(block: RevBlock, s: TwoStreamState) -> SeedRecord:
    rec = s.seeds.get(block.index)
    if rec is None:
        raise ReplayError(f"block {block.index}: no recorded seed to replay")
    return rec


def _check_finite(block: int, *grads: Tensor) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError(f"block {block}: non-finite gradient")


def rev_forward(
    block: RevBlock, s: TwoStreamState, ctx: StepContext | None = None
) -> TwoStreamState:
    """``O2 = I2 + F(I1)``, ``O1 = I1 + G(O2)``; records the block's seeds in the result."""
    ctx = ctx or StepContext()
    s.check(f"block {block.index}")
    rec = ctx.record(block.index)
    y, f_cache = block.f.forward(s.i1, rec.f, rec.training)
    with ctx.meter.workspace("workspace", f_cache):
        o2 = K.add(s.i2, y)
    y, g_cache = block.g.forward(o2, rec.g, rec.training)
    with ctx.meter.workspace("workspace", g_cache):
        o1 = K.add(s.i1, y)
    return TwoStreamState(o1, o2, {**s.seeds, block.index: rec})


def rev_inverse(block: RevBlock, s_out: TwoStreamState) -> TwoStreamState:
    """Rebuild the inputs: ``I1 = O1 - G(O2)``, ``I2 = O2 - F(I1)``."""
    s_out.check(f"block {block.index}")
    rec = _seed_for(block, s_out)
    i1 = s_out.i1 - block.g.apply(s_out.i2, rec.g, rec.training)
    i2 = s_out.i2 - block.f.apply(i1, rec.f, rec.training)
    seeds = {k: v for k, v in s_out.seeds.items() if k != block.index}
    return TwoStreamState(i1, i2, seeds)


class BlockBackward(NamedTuple):
    state: TwoStreamState
    d1: Tensor
    d2: Tensor


def rev_backward(
    block: RevBlock,
    s_out: TwoStreamState,
    d_o1: Tensor,
    d_o2: Tensor,
    ctx: StepContext | None = None,
) -> BlockBackward:
    """Reconstruct the block's inputs and propagate cotangents without cached activations.

    Parameter gradients are added into the parameters' ``grad`` buffers.
    """
    ctx = ctx or StepContext()
    s_out.check(f"block {block.index}")
    rec = _seed_for(block, s_out)
    o1, o2 = s_out.i1, s_out.i2

    y, g_cache = block.g.forward(o2, rec.g, rec.training)
    with ctx.meter.workspace("workspace", g_cache):
        i1 = o1 - y
        d_o2_hat = d_o2 + block.g.backward(g_cache, d_o1)

    y, f_cache = block.f.forward(i1, rec.f, rec.training)
    with ctx.meter.workspace("workspace", f_cache):
        i2 = o2 - y
        d_i1 = d_o1 + block.f.backward(f_cache, d_o2_hat)

    _check_finite(block.index, d_i1, d_o2_hat)
    seeds = {k: v for k, v in s_out.seeds.items() if k != block.index}
    return BlockBackward(TwoStreamState(i1, i2, seeds), d_i1, d_o2_hat)


@dataclass
class BlockCache:
    f_cache: tuple
    g_cache: tuple


def cached_forward(
    block: RevBlock, s: TwoStreamState, ctx: StepContext | None = None
) -> tuple[TwoStreamState, BlockCache]:
    """Forward that keeps every intermediate, the conventional backprop reference."""
    ctx = ctx or StepContext()
    s.check(f"block {block.index}")
    rec = ctx.record(block.index)
    y, f_cache = block.f.forward(s.i1, rec.f, rec.training)
    o2 = K.add(s.i2, y)
    y, g_cache = block.g.forward(o2, rec.g, rec.training)
    o1 = K.add(s.i1, y)
    return TwoStreamState(o1, o2, {**s.seeds, block.index: rec}), BlockCache(f_cache, g_cache)


def cached_backward(
    block: RevBlock, cache: BlockCache, d_o1: Tensor, d_o2: Tensor
) -> tuple[Tensor, Tensor]:
    d_o2_hat = d_o2 + block.g.backward(cache.g_cache, d_o1)
    d_i1 = d_o1 + block.f.backward(cache.f_cache, d_o2_hat)
    _check_finite(block.index, d_i1, d_o2_hat)
    return d_i1, d_o2_hat


def cached_forward_backward(
    block: RevBlock,
    s: TwoStreamState,
    d_o1: Tensor,
    d_o2: Tensor,
    ctx: StepContext | None = None,
) -> tuple[TwoStreamState, BlockBackward]:
    """Single-block reference: forward with caches, then backward from the given cotangents."""
    s_out, cache = cached_forward(block, s, ctx)
    d_i1, d_i2 = cached_backward(block, cache, d_o1, d_o2)
    return s_out, BlockBackward(s, d_i1, d_i2)


# --- segments ------------------------------------------------------------------------------


class CheckpointTransform(Module, ABC):
    """A non-reversible map between two-stream states whose input must be kept for backward."""

    index: int
    num_roles: int = 1
    calls: int = 0

    @abstractmethod
    def forward(self, s: TwoStreamState, rec: SeedRecord) -> tuple[Tensor, Tensor, Any]: ...

    @abstractmethod
    def backward(self, cache: Any, d1: Tensor, d2: Tensor) -> tuple[Tensor, Tensor]: ...


class ReversibleSegment(Module):
    def __init__(self, blocks: list[RevBlock]):
        self.blocks = list(blocks)


class CheckpointSegment(Module):
    def __init__(self, transform: CheckpointTransform):
        self.transform = transform


Segment = ReversibleSegment | CheckpointSegment


@dataclass
class SegmentTape:
    """What a segment leaves behind between forward and backward."""

    block_caches: list[BlockCache] = field(default_factory=list)
    checkpoint_input: TwoStreamState | None = None
    checkpoint_record: SeedRecord | None = None
    checkpoint_cache: Any = None


def _slot(kind: str, index: int) -> str:
    return f"{kind}:{index}"


def segment_forward(
    seg: Segment, s: TwoStreamState, ctx: StepContext
) -> tuple[TwoStreamState, SegmentTape]:
    """Run one segment; reversible segments leave nothing but the boundary streams."""
    tape = SegmentTape()
    meter = ctx.meter
    if isinstance(seg, ReversibleSegment):
        for block in seg.blocks:
            if ctx.schedule is Schedule.CACHED:
                s, cache = cached_forward(block, s, ctx)
                tape.block_caches.append(cache)
                meter.hold(_slot("block", block.index), cache)
            else:
                s = rev_forward(block, s, ctx)
            meter.hold("streams", (s.i1, s.i2))
            meter.set_seed_records(len(s.seeds))
        return s, tape

    t = seg.transform
    rec = ctx.record(t.index, t.num_roles)
    o1, o2, cache = t.forward(s, rec)
    tape.checkpoint_input = s
    tape.checkpoint_record = rec
    if ctx.schedule is Schedule.CACHED:
        tape.checkpoint_cache = cache
        meter.hold(_slot("checkpoint", t.index), (s.i1, s.i2, cache))
    else:
        meter.hold(_slot("checkpoint", t.index), (s.i1, s.i2))
    out = TwoStreamState(o1, o2, dict(s.seeds))
    meter.hold("streams", (out.i1, out.i2))
    return out, tape


def segment_backward(
    seg: Segment,
    s_out: TwoStreamState,
    tape: SegmentTape,
    d1: Tensor,
    d2: Tensor,
    ctx: StepContext,
) -> BlockBackward:
    """Propagate cotangents through a segment right to left, returning its input state."""
    meter = ctx.meter
    s = s_out
    if isinstance(seg, ReversibleSegment):
        for i, block in reversed(list(enumerate(seg.blocks))):
            if ctx.schedule is Schedule.CACHED:
                d1, d2 = cached_backward(block, tape.block_caches[i], d1, d2)
                meter.release(_slot("block", block.index))
                seeds = {k: v for k, v in s.seeds.items() if k != block.index}
                s = TwoStreamState(s.i1, s.i2, seeds)
            else:
                s, d1, d2 = rev_backward(block, s, d1, d2, ctx)
                meter.hold("streams", (s.i1, s.i2))
            meter.hold("cotangents", (d1, d2))
            meter.set_seed_records(len(s.seeds))
        return BlockBackward(s, d1, d2)

    t = seg.transform
    assert tape.checkpoint_input is not None and tape.checkpoint_record is not None
    cache = tape.checkpoint_cache
    if cache is None:
        _, _, cache = t.forward(tape.checkpoint_input, tape.checkpoint_record)
    with meter.workspace("workspace", cache):
        d1, d2 = t.backward(cache, d1, d2)
    _check_finite(t.index, d1, d2)
    meter.release(_slot("checkpoint", t.index))
    s_in = tape.checkpoint_input
    meter.hold("streams", (s_in.i1, s_in.i2))
    meter.hold("cotangents", (d1, d2))
    return BlockBackward(s_in, d1, d2)


class RevStack(Module):
    """An ordered list of segments driven under either schedule."""

    def __init__(self, segments: list[Segment]):
        self.segments = list(segments)

    def blocks(self) -> list[RevBlock]:
        return [
            b for seg in self.segments if isinstance(seg, ReversibleSegment) for b in seg.blocks
        ]

    def transforms(self) -> list[CheckpointTransform]:
        return [seg.transform for seg in self.segments if isinstance(seg, CheckpointSegment)]

    def reset_counters(self) -> None:
        for b in self.blocks():
            b.reset_counters()
        for t in self.transforms():
            t.calls = 0

    def forward(
        self, s: TwoStreamState, ctx: StepContext
    ) -> tuple[TwoStreamState, list[SegmentTape]]:
        tapes = []
        for seg in self.segments:
            s, tape = segment_forward(seg, s, ctx)
            tapes.append(tape)
        return s, tapes

    def backward(
        self,
        s_out: TwoStreamState,
        tapes: list[SegmentTape],
        d1: Tensor,
        d2: Tensor,
        ctx: StepContext,
    ) -> BlockBackward:
        s = s_out
        ctx.meter.hold("cotangents", (d1, d2))
        for seg, tape in zip(reversed(self.segments), reversed(tapes)):
            s, d1, d2 = segment_backward(seg, s, tape, d1, d2, ctx)
        return BlockBackward(s, d1, d2)
