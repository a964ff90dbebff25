"""Full classifiers: stem, two-stream stack, termination fusion and linear head."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

import numpy as np

from revformer import kernels as K
from revformer.engine import (
    RevStack,
    Schedule,
    SegmentTape,
    StepContext,
    TwoStreamState,
    initiate_streams,
)
from revformer.exceptions import InvariantViolationError
from revformer.fusion import Fusion
from revformer.kernels import Tensor
from revformer.layers import Linear, Module

logger = logging.getLogger(__name__)


class Stem(Module, ABC):
    """Maps a batch of ``B x H x W x C`` images to ``B x N x d`` tokens."""

    num_tokens: int
    dim: int

    @abstractmethod
    def forward(self, images: Tensor) -> tuple[Tensor, Any]: ...

    @abstractmethod
    def backward(self, cache: Any, d_tokens: Tensor) -> None: ...


def terminate_streams(
    s: TwoStreamState, fusion: Fusion, seed: int = 0, training: bool = False
) -> tuple[Tensor, tuple]:
    """Fuse the final streams token by token, then average over tokens.

    With the default ``norm->concat`` fusion this is: layer-normalise each stream, concatenate
    on channels, mean-pool, giving a ``2d`` feature per sample.
    """
    s.check("termination")
    fused, cache = fusion.forward(s.i1, s.i2, seed, training)
    return K.mean_pool(fused), (cache, fused.shape[-2])


def terminate_streams_backward(
    fusion: Fusion, cache: tuple, d_feat: Tensor
) -> tuple[Tensor, Tensor]:
    fusion_cache, num_tokens = cache
    d_fused = K.mean_pool_vjp(d_feat, num_tokens).input_grads[0]
    return fusion.backward(fusion_cache, d_fused)


@dataclass
class ModelTape:
    stem: Any
    state: TwoStreamState
    segments: list[SegmentTape]
    termination: tuple
    head: Tensor


class RevModel(Module):
    """Stem -> duplicated streams -> segments -> termination -> head."""

    def __init__(
        self,
        stem: Stem,
        stack: RevStack,
        termination: Fusion,
        head: Linear,
        schedule: Schedule = Schedule.REVERSIBLE,
        config: Any = None,
    ):
        self.stem = stem
        self.stack = stack
        self.termination = termination
        self.head = head
        self.schedule = schedule
        self.config = config
        self.termination_index = len(stack.blocks()) + len(stack.transforms())

    @property
    def dtype(self) -> np.dtype:
        return self.head.weight.value.dtype

    def context(
        self,
        step: int = 0,
        base_seed: int = 0,
        training: bool = False,
        schedule: Schedule | None = None,
    ) -> StepContext:
        return StepContext(
            step=step, base_seed=base_seed, training=training, schedule=schedule or self.schedule
        )

    def forward(self, images: Tensor, ctx: StepContext | None = None) -> tuple[Tensor, ModelTape]:
        ctx = ctx or self.context()
        tokens, stem_cache = self.stem.forward(images)
        ctx.meter.hold("stem", stem_cache)
        s_out, tapes = self.stack.forward(initiate_streams(tokens), ctx)
        rec = ctx.record(self.termination_index, roles=1)
        feat, term_cache = terminate_streams(s_out, self.termination, rec.seeds[0], rec.training)
        logits, head_cache = self.head.forward(feat)
        ctx.meter.hold("head", (term_cache, head_cache))
        return logits, ModelTape(stem_cache, s_out, tapes, term_cache, head_cache)

    def backward(self, tape: ModelTape, d_logits: Tensor, ctx: StepContext) -> None:
        """Add all parameter gradients for ``d_logits`` into the ``grad`` buffers."""
        d_feat = self.head.backward(tape.head, d_logits)
        d1, d2 = terminate_streams_backward(self.termination, tape.termination, d_feat)
        s_in, d1, d2 = self.stack.backward(tape.state, tape.segments, d1, d2, ctx)
        if s_in.seeds:
            raise InvariantViolationError(
                f"seeds left unreplayed after backward: {sorted(s_in.seeds)}"
            )
        self.stem.backward(tape.stem, d1 + d2)
        ctx.meter.release("head")
        ctx.meter.release("stem")

    def predict(self, images: Tensor) -> Tensor:
        """Evaluation-mode logits."""
        return self.forward(images, self.context(training=False))[0]

    def loss_and_grad(
        self, images: Tensor, labels: Tensor, ctx: StepContext
    ) -> tuple[float, Tensor]:
        """One forward/backward; returns the mean loss and the class probabilities."""
        logits, tape = self.forward(images, ctx)
        loss, probs = K.softmax_cross_entropy(logits, labels)
        self.backward(tape, K.softmax_cross_entropy_vjp(probs, labels).input_grads[0], ctx)
        return loss, probs

    def sub_block_calls(self) -> int:
        return sum(b.f.calls + b.g.calls for b in self.stack.blocks())
