"""Optimisers over a model's ``Parameter`` buffers."""

from abc import ABC, abstractmethod

import numpy as np

from revformer.config import TrainSection
from revformer.exceptions import ConfigError
from revformer.kernels import Tensor
from revformer.layers import Module, Parameter


class Optimizer(ABC):
    """Base class; subclasses keep their per-parameter state in named buffers."""

    def __init__(self, model: Module, lr: float, weight_decay: float):
        self.named = list(model.named_parameters())
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()

    @staticmethod
    def decays(p: Parameter) -> bool:
        """Weight decay applies to matrices and kernels, not to biases or norm affines."""
        return p.value.ndim >= 2

    @abstractmethod
    def step(self) -> None: ...

    @abstractmethod
    def state_dict(self) -> dict[str, Tensor]: ...

    @abstractmethod
    def load_state_dict(self, state: dict[str, Tensor], steps: int) -> None: ...


class SGD(Optimizer):
    """Heavy-ball momentum with L2 weight decay folded into the gradient."""

    def __init__(self, model: Module, lr: float, weight_decay: float = 0.0, momentum: float = 0.9):
        super().__init__(model, lr, weight_decay)
        self.momentum = momentum
        self.buf = {name: np.zeros_like(p.value) for name, p in self.named}

    def step(self) -> None:
        self.steps += 1
        for name, p in self.named:
            g = p.grad + self.weight_decay * p.value if self.decays(p) else p.grad
            buf = self.buf[name]
            buf *= self.momentum
            buf += g
            p.value -= self.lr * buf

    def state_dict(self) -> dict[str, Tensor]:
        return {f"optim.m/{name}": buf for name, buf in self.buf.items()}

    def load_state_dict(self, state: dict[str, Tensor], steps: int) -> None:
        for name in self.buf:
            self.buf[name][...] = state[f"optim.m/{name}"]
        self.steps = steps


class AdamW(Optimizer):
    """Adam with bias correction and decoupled weight decay."""

    def __init__(
        self,
        model: Module,
        lr: float,
        weight_decay: float = 0.05,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        super().__init__(model, lr, weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {name: np.zeros_like(p.value) for name, p in self.named}
        self.v = {name: np.zeros_like(p.value) for name, p in self.named}

    def step(self) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, p in self.named:
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            if self.decays(p):
                p.value -= self.lr * self.weight_decay * p.value
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, Tensor]:
        state = {f"optim.m/{name}": m for name, m in self.m.items()}
        state.update({f"optim.v/{name}": v for name, v in self.v.items()})
        return state

    def load_state_dict(self, state: dict[str, Tensor], steps: int) -> None:
        for name in self.m:
            self.m[name][...] = state[f"optim.m/{name}"]
            self.v[name][...] = state[f"optim.v/{name}"]
        self.steps = steps


def make_optimizer(train: TrainSection, model: Module) -> Optimizer:
    if train.optimizer == "sgd":
        return SGD(model, train.lr, train.weight_decay, train.momentum)
    if train.optimizer == "adamw":
        return AdamW(model, train.lr, train.weight_decay, train.betas)
    raise ConfigError(f"unknown optimizer {train.optimizer!r}")
