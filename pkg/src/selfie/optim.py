"""Nesterov momentum with coupled L2 decay and the warmup-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .params import ParamStore

DTYPE = np.float32


def cosine_lr(t: int, lr_max: float, warmup: int = 100, total: int = 1000) -> float:
    """Linear warmup to lr_max over ``warmup`` steps, then cosine decay to 0."""
    if t > total:
        raise ConfigError(f"schedule step {t} past total {total}")
    if warmup > 0 and t < warmup:
        return lr_max * t / warmup
    if total == warmup:
        return lr_max
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * (t - warmup) / (total - warmup)))


@dataclass
class OptimizerState:
    """Velocity per trainable parameter plus the step counter."""

    lr_max: float
    total: int
    warmup: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    t: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, store: ParamStore, lr_max: float, total: int,
               warmup: int = 100, momentum: float = 0.9,
               weight_decay: float = 1e-4) -> "OptimizerState":
        state = cls(lr_max=lr_max, total=total, warmup=warmup, momentum=momentum,
                    weight_decay=weight_decay)
        for e in store.entries(trainable=True):
            state.velocity[e.name] = np.zeros_like(e.tensor.data)
        return state

    def lr(self) -> float:
        return cosine_lr(self.t, self.lr_max, self.warmup, self.total)


def nesterov_step(store: ParamStore, state: OptimizerState, lr: float) -> None:
    """One update: g <- grad + wd*theta; vel <- mu*vel + g; theta -= lr*(g + mu*vel).

    L2 decay applies only to entries flagged ``decay`` (conv/FC weights and
    embeddings, not norm affines or biases).
    """
    mu = DTYPE(state.momentum)
    lr = DTYPE(lr)
    wd = DTYPE(state.weight_decay)
    for e in store.entries(trainable=True):
        if e.tensor.grad is None:
            raise ConfigError(f"parameter {e.name!r} has no gradient; "
                              "was it used in the forward pass?")
        if e.tensor.grad.shape != e.tensor.data.shape:
            raise ShapeError(f"gradient shape mismatch for {e.name!r}")
        g = e.tensor.grad
        if e.decay and state.weight_decay:
            g = g + wd * e.tensor.data
        vel = state.velocity[e.name]
        vel *= mu
        vel += g
        e.tensor.data -= lr * (g + mu * vel)
    state.t += 1
