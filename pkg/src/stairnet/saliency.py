"""Channel saliency (Fisher, l1, random) and the iterative prune-and-tune loop."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn.data import BatchStream, Dataset
from .nn.layers import StateError
from .nn.network import NetworkSpec, ResNet
from .nn.optim import SGD
from .nn.train import train_step
from .tensor import Rng, ShapeError

METHODS = ("fisher", "l1", "random")


def fisher_contribution(activation: np.ndarray, grad: np.ndarray) -> float:
    """Fisher saliency of one channel from an N x W x H activation and its gradient.

    ``(1 / 2N) * sum_n (-sum_ij C[n,i,j] * g[n,i,j])**2``
    """
    c = np.asarray(activation, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if c.shape != g.shape:
        raise ShapeError(f"activation {c.shape} and gradient {g.shape} differ")
    if c.ndim < 1 or c.shape[0] < 1:
        raise ShapeError("need at least one example")
    n = c.shape[0]
    per_example = -(c * g).reshape(n, -1).sum(axis=1)
    return float((per_example ** 2).sum() / (2 * n))


def channel_fisher(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """:func:`fisher_contribution` for every channel of N x C x H x W tensors."""
    if activation.shape != grad.shape or activation.ndim != 4:
        raise ShapeError(f"expected congruent NCHW tensors, got {activation.shape}, {grad.shape}")
    n = activation.shape[0]
    s = np.einsum("nchw,nchw->nc", activation.astype(np.float64), grad.astype(np.float64))
    return (s * s).sum(axis=0) / (2 * n)


class FisherAccumulator:
    """Running per-channel Fisher sums for each prunable layer."""

    def __init__(self, widths):
        self.values = [np.zeros(w, dtype=np.float64) for w in widths]
        self.batches = 0

    def accumulate(self, activations, gradients, masks=None) -> "FisherAccumulator":
        if gradients is None or any(g is None for g in gradients):
            raise StateError("accumulate needs gradients: run backward first")
        if len(activations) != len(self.values) or len(gradients) != len(self.values):
            raise ShapeError("one activation/gradient pair per prunable layer is required")
        for i, (a, g) in enumerate(zip(activations, gradients)):
            contrib = channel_fisher(a, g)
            if masks is not None:
                contrib = np.where(np.asarray(masks[i]) != 0, contrib, 0.0)
            self.values[i] += contrib
        self.batches += 1
        return self

    def accumulate_network(self, network: ResNet) -> "FisherAccumulator":
        acts = [b.activation for b in network.blocks]
        grads = [b.activation_grad for b in network.blocks]
        if any(a is None for a in acts):
            raise StateError("accumulate needs a training-mode forward")
        return self.accumulate(acts, grads, network.masks)

    def reset(self) -> None:
        for v in self.values:
            v.fill(0)
        self.batches = 0


def l1_saliency(weight: np.ndarray) -> np.ndarray:
    """Sum of absolute filter weights per output channel."""
    w = np.asarray(weight, dtype=np.float64)
    return np.abs(w).reshape(w.shape[0], -1).sum(axis=1)


@dataclass
class PruneEvent:
    step: int
    layer: int
    channel: int
    saliency: float
    params: int
    widths: tuple[int, ...]


@dataclass
class PruningTrace:
    """Ordered channel removals; point 0 is the unpruned network."""

    method: str
    spec: NetworkSpec
    initial_params: int
    events: list[PruneEvent] = field(default_factory=list)
    floor: int = 1

    def __len__(self) -> int:
        return len(self.events) + 1

    def params_at(self, i: int) -> int:
        return self.initial_params if i == 0 else self.events[i - 1].params

    def widths_at(self, i: int) -> tuple[int, ...]:
        return tuple(self.spec.widths) if i == 0 else tuple(self.events[i - 1].widths)

    def spec_at(self, i: int) -> NetworkSpec:
        return self.spec.with_widths(self.widths_at(i))

    @property
    def param_counts(self) -> list[int]:
        return [self.params_at(i) for i in range(len(self))]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "spec": self.spec.to_dict(),
            "initial_params": self.initial_params,
            "floor": self.floor,
            "events": [dict(asdict(e), widths=list(e.widths)) for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruningTrace":
        events = [PruneEvent(e["step"], e["layer"], e["channel"], e["saliency"], e["params"],
                             tuple(e["widths"])) for e in d["events"]]
        return cls(d["method"], NetworkSpec.from_dict(d["spec"]), d["initial_params"], events,
                   d.get("floor", 1))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PruningTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "layer", "channel", "saliency", "params"])
            for e in self.events:
                w.writerow([e.step, e.layer, e.channel, repr(float(e.saliency)), e.params])


def sample_trace(trace: PruningTrace, k: int) -> list[int]:
    """Indices of ``k`` trace points spread evenly by parameter count.

    Targets are evenly spaced between the largest and smallest counts (the
    midpoint when ``k == 1``); each takes the nearest unused point, ties going
    to the larger count.  Returned in target order, largest first.
    """
    n = len(trace)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    counts = np.array(trace.param_counts, dtype=np.float64)
    hi, lo = counts.max(), counts.min()
    targets = [(hi + lo) / 2] if k == 1 else np.linspace(hi, lo, k)
    used: set[int] = set()
    chosen = []
    for t in targets:
        best = min((i for i in range(n) if i not in used),
                   key=lambda i: (abs(counts[i] - t), -counts[i], i))
        used.add(best)
        chosen.append(best)
    return chosen


@dataclass
class PruneConfig:
    method: str = "fisher"
    lr: float = 0.0008
    steps_per_prune: int = 100
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    floor: int = 1
    max_events: int | None = None
    seed: int = 0
    augment: bool = True
    crop_pad: int = 4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown pruning method {self.method!r}; choose from {METHODS}")
        if self.floor < 1:
            raise ValueError("pruning floor must be >= 1 channel")


@dataclass
class PruneResult:
    trace: PruningTrace
    network: ResNet
    # masked network state after each trace point (index-aligned with the trace)
    snapshots: list[dict] = field(default_factory=list)


def _select(saliencies, masks, floor):
    best = None
    for layer, (sal, mask) in enumerate(zip(saliencies, masks)):
        live = np.flatnonzero(mask)
        if live.size <= floor:
            continue
        for ch in live:
            key = (float(sal[ch]), layer, int(ch))
            if best is None or key < best:
                best = key
    return best


def prune_loop(network: ResNet, dataset: Dataset, config: PruneConfig,
               keep_snapshots: bool = True) -> PruneResult:
    """Alternate ``steps_per_prune`` fine-tuning steps with one channel removal.

    Stops when every prunable layer is down to ``config.floor`` live channels
    (or after ``max_events`` removals).  Fisher sums restart after each removal.
    """
    net = ResNet(network.spec, None, network.dtype)
    net.load_state(network.state())
    rng = Rng(config.seed)
    stream = BatchStream(dataset.x_train, dataset.y_train, config.batch_size,
                         rng.child("prune-batches"), config.augment, config.crop_pad)
    pick_rng = rng.child("random-saliency")
    optimizer = SGD(config.momentum, config.weight_decay)
    acc = FisherAccumulator(net.spec.widths)
    trace = PruningTrace(config.method, net.spec, net.live_param_count(), floor=config.floor)
    snapshots = [{k: v.copy() for k, v in net.state().items()}] if keep_snapshots else []
    step = 0
    while config.max_events is None or len(trace.events) < config.max_events:
        if all(np.count_nonzero(m) <= config.floor for m in net.masks):
            break
        for _ in range(config.steps_per_prune):
            xb, yb = stream.next()
            train_step(net, optimizer, xb, yb, config.lr, where=f"while pruning at step {step}")
            if config.method == "fisher":
                acc.accumulate_network(net)
            step += 1
        if config.method == "fisher":
            saliencies = acc.values
        elif config.method == "l1":
            saliencies = [l1_saliency(b.conv1.params["weight"]) for b in net.blocks]
        else:
            saliencies = [pick_rng.uniform(len(m), dtype=np.float64) for m in net.masks]
        choice = _select(saliencies, net.masks, config.floor)
        if choice is None:
            break
        value, layer, channel = choice
        net.blocks[layer].mask[channel] = 0
        trace.events.append(PruneEvent(step, layer, channel, value, net.live_param_count(),
                                       net.live_widths()))
        acc.reset()
        if keep_snapshots:
            snapshots.append({k: v.copy() for k, v in net.state().items()})
    return PruneResult(trace, net, snapshots)
