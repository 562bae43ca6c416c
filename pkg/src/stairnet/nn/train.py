"""Minibatch SGD training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..tensor import Rng
from .data import BatchStream, Dataset
from .losses import cross_entropy, error_rate
from .network import ResNet
from .optim import SGD, StepSchedule

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    lr_factor: float = 5.0
    lr_milestones: tuple[int, ...] = (60, 120, 180)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True
    crop_pad: int = 4

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.lr, self.lr_factor, self.lr_milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


def ce_objective(network: ResNet, xb, yb):
    """Forward + backward for plain cross-entropy; returns (loss, parts)."""
    logits, _ = network.forward(xb, training=True)
    loss, dlogits = cross_entropy(logits, yb, return_grad=True)
    network.backward(dlogits)
    return loss, {"ce": loss, "err": error_rate(logits, yb)}


Objective = Callable[[ResNet, np.ndarray, np.ndarray], tuple]


def evaluate(network: ResNet, x, y, batch_size: int = 256) -> tuple[float, float]:
    """(mean cross-entropy, error rate) in inference mode."""
    if len(x) == 0:
        return 0.0, 0.0
    logits = network.predict(x, batch_size)
    return cross_entropy(logits, y), error_rate(logits, y)


def train_step(network: ResNet, optimizer: SGD, xb, yb, lr: float,
               objective: Objective = ce_objective, where: str = ""):
    network.zero_grad()
    loss, parts = objective(network, xb, yb)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} {where}".strip())
    optimizer.step(network, lr)
    return loss, parts


@dataclass
class TrainResult:
    network: ResNet
    metrics: list[dict] = field(default_factory=list)
    optimizer: SGD | None = None


def train(network: ResNet, dataset: Dataset, config: TrainConfig,
          objective: Objective = ce_objective, eval_batch: int = 256) -> TrainResult:
    """Train in place for ``config.epochs`` epochs and record per-epoch metrics."""
    if len(dataset.x_train) == 0:
        raise ValueError("dataset is empty")
    stream = BatchStream(dataset.x_train, dataset.y_train, config.batch_size,
                         Rng(config.seed).child("batches"), config.augment, config.crop_pad)
    optimizer = SGD(config.momentum, config.weight_decay)
    schedule = config.schedule
    result = TrainResult(network, optimizer=optimizer)
    for epoch in range(config.epochs):
        lr = schedule.at(epoch)
        sums: dict[str, float] = {}
        count = 0
        for step, (xb, yb) in enumerate(stream.epoch_batches()):
            _, parts = train_step(network, optimizer, xb, yb, lr, objective,
                                  f"at epoch {epoch} step {step}")
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(xb)
            count += len(xb)
        test_loss, test_err = evaluate(network, dataset.x_test, dataset.y_test, eval_batch)
        row = {"epoch": epoch, "lr": lr}
        row.update({f"train_{k}": v / count for k, v in sums.items()})
        row.update(test_loss=test_loss, test_err=test_err)
        result.metrics.append(row)
        log.info("epoch %d lr %.4g %s", epoch, lr,
                 " ".join(f"{k}={v:.4f}" for k, v in row.items() if k not in ("epoch", "lr")))
    return result
