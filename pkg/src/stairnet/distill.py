"""Attention-transfer distillation from a frozen teacher."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.data import Dataset
from .nn.losses import cross_entropy, error_rate
from .nn.network import NetworkSpec, ResNet
from .nn.train import TrainConfig, TrainResult, train
from .tensor import Rng, ShapeError

DEFAULT_BETA = 1000.0


def init_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> ResNet:
    """Freshly initialised network; the same (spec, seed) always gives the same weights."""
    return ResNet(spec, Rng(seed).child("init"), dtype)


def _raw_map(activation: np.ndarray) -> np.ndarray:
    if activation.ndim != 4 or activation.shape[1] < 1:
        raise ShapeError(f"attention maps need N x C x H x W activations, got {activation.shape}")
    n = activation.shape[0]
    return (activation * activation).mean(axis=1).reshape(n, -1)


def attention_map(activation: np.ndarray) -> np.ndarray:
    """Channel mean of squared activations, flattened and l2-normalised per sample.

    All-zero maps stay zero.
    """
    f = _raw_map(activation)
    norm = np.sqrt((f * f).sum(axis=1, keepdims=True))
    return np.divide(f, norm, out=np.zeros_like(f), where=norm > 0)


def attention_map_backward(activation: np.ndarray, dmap: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the activation given dL/d(attention_map(activation))."""
    n, c, h, w = activation.shape
    f = _raw_map(activation)
    norm = np.sqrt((f * f).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    m = f / safe
    df = (dmap - m * (m * dmap).sum(axis=1, keepdims=True)) / safe
    df = np.where(norm > 0, df, 0.0)
    return (df.reshape(n, 1, h, w) * (2.0 / c)) * activation


DISTANCES = ("l2", "l2sq", "l2sq_mean")


def attention_distance(teacher_maps, student_maps, form: str = "l2"):
    """Sum over attention points of a batch-mean distance between paired maps.

    ``form`` selects the per-sample distance:

    ``l2``         ||m_t - m_s||_2
    ``l2sq``       ||m_t - m_s||_2 ** 2
    ``l2sq_mean``  ||m_t - m_s||_2 ** 2 / (number of map positions)

    Returns ``(value, grads)`` where ``grads[i]`` is d(value)/d(student_maps[i]).
    """
    if form not in DISTANCES:
        raise ValueError(f"unknown attention distance {form!r}; choose from {DISTANCES}")
    if len(teacher_maps) != len(student_maps):
        raise ShapeError(f"{len(teacher_maps)} teacher maps vs {len(student_maps)} student maps")
    total, grads = 0.0, []
    for mt, ms in zip(teacher_maps, student_maps):
        if mt.shape != ms.shape:
            raise ShapeError(f"attention map shapes differ: {mt.shape} vs {ms.shape}")
        n, p = ms.shape
        diff = ms - mt
        if form == "l2":
            dist = np.sqrt((diff * diff).sum(axis=1, keepdims=True))
            total += float(dist.mean())
            grads.append(np.divide(diff, dist * n, out=np.zeros_like(diff), where=dist > 0))
        else:
            scale = p if form == "l2sq_mean" else 1
            total += float((diff * diff).sum(axis=1).mean() / scale)
            grads.append(2.0 * diff / (n * scale))
    return total, grads


def at_loss(logits, labels, teacher_maps, student_maps, beta: float, form: str = "l2") -> float:
    """Cross-entropy plus ``beta`` times the attention distance."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    dist, _ = attention_distance(teacher_maps, student_maps, form)
    return cross_entropy(logits, labels) + beta * dist


@dataclass
class DistillConfig:
    """``beta`` is rescaled by 3 / (number of attention points) unless ``scale_beta`` is off.

    The default distance averages squared map differences over positions, the
    normalisation under which beta = 1000 is a sensible weight; plain ``l2`` at
    that beta swamps the cross-entropy term.
    """

    beta: float = DEFAULT_BETA
    scale_beta: bool = True
    distance: str = "l2sq_mean"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown attention distance {self.distance!r}")

    def effective_beta(self, points: int) -> float:
        if self.scale_beta and points and points != 3:
            return self.beta * 3.0 / points
        return self.beta


def at_objective(teacher: ResNet, beta: float, form: str = "l2sq_mean"):
    """Training objective closure: CE + beta * attention distance to ``teacher``."""

    def objective(student: ResNet, xb, yb):
        t_logits, t_acts = teacher.forward(xb, training=False)
        logits, s_acts = student.forward(xb, training=True)
        if len(t_acts) != len(s_acts):
            raise ShapeError("teacher and student attention point counts differ")
        ce, dlogits = cross_entropy(logits, yb, return_grad=True)
        if beta == 0:
            student.backward(dlogits)
            return ce, {"ce": ce, "at": 0.0, "err": error_rate(logits, yb)}
        t_maps = [attention_map(a) for a in t_acts]
        s_maps = [attention_map(a) for a in s_acts]
        dist, dmaps = attention_distance(t_maps, s_maps, form)
        act_grads = [(attention_map_backward(a, beta * g)).astype(a.dtype)
                     for a, g in zip(s_acts, dmaps)]
        student.backward(dlogits, act_grads)
        return ce + beta * dist, {"ce": ce, "at": dist, "err": error_rate(logits, yb)}

    return objective


def distill(teacher: ResNet, student_spec: NetworkSpec, dataset: Dataset,
            config: DistillConfig, student: ResNet | None = None) -> TrainResult:
    """Train a freshly initialised student against the frozen teacher's attention maps."""
    if len(teacher.spec.attention_points) != len(student_spec.attention_points):
        raise ShapeError("teacher and student must have the same number of attention points")
    if student is None:
        student = init_network(student_spec, config.train.seed, teacher.dtype)
    beta = config.effective_beta(len(student_spec.attention_points))
    result = train(student, dataset, config.train, at_objective(teacher, beta, config.distance))
    for row in result.metrics:
        row.setdefault("train_at", 0.0)
    return result
