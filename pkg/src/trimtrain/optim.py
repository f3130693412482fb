"""Mini-batch SGD with classical momentum and coupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr=None) -> None:
    """In place: v <- mu*v + (g + wd*w);  w <- w - lr*v."""
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter {w.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        if state.weight_decay:
            g = g + state.weight_decay * w
        v *= state.momentum
        v += g
        w -= lr * v


class SGD:
    """SGD over a dict of parameter arrays with a step-decay schedule.

    ``schedule`` is a sequence of ``(iteration, factor)`` pairs; from that
    iteration on the learning rate is multiplied by ``factor``.
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, schedule=()):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.state = OptimizerState(lr, momentum, weight_decay)
        self.schedule = sorted((int(i), float(f)) for i, f in schedule)
        self.iteration = 0

    def lr_at(self, iteration: int) -> float:
        lr = self.state.lr
        for at, factor in self.schedule:
            if iteration >= at:
                lr *= factor
        return lr

    def step(self, grads: dict, iteration=None) -> None:
        """Apply one update; ``iteration`` overrides the internal step count."""
        if iteration is not None:
            self.iteration = int(iteration)
        sgd_step(self.params, grads, self.state, self.lr_at(self.iteration))
        self.iteration += 1
