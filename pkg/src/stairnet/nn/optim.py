"""SGD with momentum and weight decay, and the step learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def sgd_step(w: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """In place: ``v <- m*v + (g + wd*w)``; ``w <- w - lr*v``."""
    if w.shape != grad.shape or w.shape != velocity.shape:
        raise ValueError("parameter, gradient and velocity shapes differ")
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * w
    w -= lr * velocity


@dataclass
class StepSchedule:
    """Initial rate divided by ``factor`` at each milestone epoch."""

    lr: float = 0.1
    factor: float = 5.0
    milestones: tuple[int, ...] = (60, 120, 180)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr / (self.factor ** drops)

    @property
    def lowest(self) -> float:
        return self.lr / (self.factor ** len(self.milestones))


@dataclass
class SGD:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def step(self, network, lr: float) -> None:
        for name, p, g in network.parameters():
            v = self.velocity.get(name)
            if v is None or v.shape != p.shape:
                v = self.velocity[name] = np.zeros_like(p)
            sgd_step(p, g, v, lr, self.momentum, self.weight_decay)
