"""Residual network description and the executable network built from it."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from ..tensor import DTYPE, Rng, ShapeError, conv_output_size
from .layers import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ReLU, StateError


@dataclass(frozen=True)
class GroupSpec:
    blocks: int
    width: int
    stride: int = 1


@dataclass(frozen=True)
class BlockShape:
    """Resolved geometry of one residual block."""

    index: int
    group: int
    in_ch: int
    width: int
    out_ch: int
    stride: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]

    @property
    def projection(self) -> bool:
        return self.in_ch != self.out_ch or self.stride != 1


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a residual network with per-block prunable widths.

    ``widths[b]`` is the output channel count of block ``b``'s first
    convolution, the only pruned/snapped quantity.  Attention points sit at the
    output of each group and are stored as the index of the group's last block.
    """

    input_shape: tuple[int, int, int]
    classes: int
    stem_width: int
    groups: tuple[GroupSpec, ...]
    widths: tuple[int, ...]
    attention_points: tuple[int, ...] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "groups", tuple(
            g if isinstance(g, GroupSpec) else GroupSpec(**g) for g in self.groups))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        ends, total = [], 0
        for g in self.groups:
            if g.blocks < 1:
                raise ValueError("each group needs at least one block")
            total += g.blocks
            ends.append(total - 1)
        if self.attention_points is None:
            object.__setattr__(self, "attention_points", tuple(ends))
        else:
            object.__setattr__(self, "attention_points", tuple(int(p) for p in self.attention_points))
        if len(self.widths) != total:
            raise ValueError(f"expected {total} prunable widths, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"prunable widths must be >= 1: {self.widths}")
        if len(self.attention_points) != len(self.groups):
            raise ValueError("one attention point per group is required")
        if list(self.attention_points) != ends:
            raise ValueError("attention points must sit at group outputs")

    @classmethod
    def wide_resnet(cls, depth=16, width_mult=1, input_shape=(3, 32, 32), classes=10,
                    base_widths=(16, 32, 64), stem_width=16):
        if (depth - 4) % 6:
            raise ValueError("depth must be 6n + 4")
        n = (depth - 4) // 6
        groups = tuple(GroupSpec(n, w * width_mult, 1 if i == 0 else 2)
                       for i, w in enumerate(base_widths))
        widths = tuple(g.width for g in groups for _ in range(g.blocks))
        return cls(tuple(input_shape), classes, stem_width, groups, widths)

    @property
    def num_blocks(self) -> int:
        return len(self.widths)

    @property
    def teacher_widths(self) -> tuple[int, ...]:
        return tuple(g.width for g in self.groups for _ in range(g.blocks))

    def with_widths(self, widths) -> "NetworkSpec":
        return replace(self, widths=tuple(int(w) for w in widths))

    def blocks(self) -> list[BlockShape]:
        out = []
        ch = self.stem_width
        hw = self.input_shape[1:]
        b = 0
        for gi, g in enumerate(self.groups):
            for j in range(g.blocks):
                stride = g.stride if j == 0 else 1
                ohw = tuple(conv_output_size(s, 3, stride, 1) for s in hw)
                out.append(BlockShape(b, gi, ch, self.widths[b], g.width, stride, hw, ohw))
                ch, hw = g.width, ohw
                b += 1
        return out

    @property
    def feature_width(self) -> int:
        return self.groups[-1].width if self.groups else self.stem_width

    def param_count(self) -> int:
        """Closed-form count of trainable parameters (conv, norm scale/shift, linear)."""
        c0 = self.input_shape[0]
        total = c0 * self.stem_width * 9 + 2 * self.stem_width
        for blk in self.blocks():
            total += blk.in_ch * blk.width * 9 + 2 * blk.width
            total += blk.width * blk.out_ch * 9 + 2 * blk.out_ch
            if blk.projection:
                total += blk.in_ch * blk.out_ch
        return total + self.feature_width * self.classes + self.classes

    def mac_count(self) -> int:
        """Multiply-accumulates for one input: out*in*k^2*Ho*Wo per conv plus the classifier."""
        c0, h, w = self.input_shape
        total = self.stem_width * c0 * 9 * h * w
        for blk in self.blocks():
            ho, wo = blk.out_hw
            total += blk.width * blk.in_ch * 9 * ho * wo
            total += blk.out_ch * blk.width * 9 * ho * wo
            if blk.projection:
                total += blk.out_ch * blk.in_ch * ho * wo
        return total + self.feature_width * self.classes

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "stem_width": self.stem_width,
            "groups": [{"blocks": g.blocks, "width": g.width, "stride": g.stride} for g in self.groups],
            "widths": list(self.widths),
            "attention_points": list(self.attention_points),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), int(d["classes"]), int(d["stem_width"]),
                   tuple(GroupSpec(**g) for g in d["groups"]), tuple(d["widths"]),
                   tuple(d.get("attention_points")) if d.get("attention_points") is not None else None)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ResidualBlock:
    """conv3x3 -> BN -> ReLU -> mask -> conv3x3 -> BN, plus (projected) skip."""

    def __init__(self, shape: BlockShape, rng: Rng | None, dtype=DTYPE, backend=None,
                 num_threads=1):
        self.shape = shape
        kw = dict(dtype=dtype, backend=backend, num_threads=num_threads)
        self.conv1 = Conv2d(shape.in_ch, shape.width, 3, shape.stride, rng=rng, **kw)
        self.bn1 = BatchNorm2d(shape.width, dtype=dtype)
        self.relu = ReLU()
        self.conv2 = Conv2d(shape.width, shape.out_ch, 3, 1, rng=rng, **kw)
        self.bn2 = BatchNorm2d(shape.out_ch, dtype=dtype)
        self.shortcut = (Conv2d(shape.in_ch, shape.out_ch, 1, shape.stride, rng=rng, **kw)
                         if shape.projection else None)
        self.mask = np.ones(shape.width, dtype=dtype)
        # C and dL/dC at the prunable activation, from the last forward/backward
        self.activation = None
        self.activation_grad = None

    def layers(self):
        named = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.shortcut is not None:
            named.append(("shortcut", self.shortcut))
        return named

    def forward(self, x, training=True):
        h = self.relu.forward(self.bn1.forward(self.conv1.forward(x, training), training), training)
        h = h * self.mask[None, :, None, None]
        if training:
            self.activation = h
            self.activation_grad = None
        h = self.bn2.forward(self.conv2.forward(h, training), training)
        skip = x if self.shortcut is None else self.shortcut.forward(x, training)
        return h + skip

    def backward(self, dy):
        dh = self.conv2.backward(self.bn2.backward(dy))
        self.activation_grad = dh
        dh = dh * self.mask[None, :, None, None]
        dx = self.conv1.backward(self.bn1.backward(self.relu.backward(dh)))
        dx += dy if self.shortcut is None else self.shortcut.backward(dy)
        return dx


class ResNet:
    """Executable network for a :class:`NetworkSpec`.

    ``forward`` returns logits and the activations at the attention points;
    ``backward`` accepts optional extra gradients for those activations.
    """

    def __init__(self, spec: NetworkSpec, rng: Rng | None = None, dtype=DTYPE, backend=None,
                 num_threads=1):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.stem = Conv2d(spec.input_shape[0], spec.stem_width, 3, 1, rng=rng, dtype=dtype,
                           backend=backend, num_threads=num_threads)
        self.stem_bn = BatchNorm2d(spec.stem_width, dtype=dtype)
        self.stem_relu = ReLU()
        self.blocks = [ResidualBlock(s, rng, dtype, backend, num_threads) for s in spec.blocks()]
        self.head_relu = ReLU()
        self.pool = GlobalAvgPool()
        self.fc = Linear(spec.feature_width, spec.classes, rng=rng, dtype=dtype, backend=backend)
        self._forwarded = False

    # -- parameter access ---------------------------------------------------

    def named_layers(self):
        yield "stem", self.stem
        yield "stem_bn", self.stem_bn
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.layers():
                yield f"block{i}.{name}", layer
        yield "fc", self.fc

    def parameters(self):
        for lname, layer in self.named_layers():
            for pname, p in layer.params.items():
                yield f"{lname}.{pname}", p, layer.grads[pname]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.named_layers():
            for pname, p in layer.params.items():
                out[f"{lname}.{pname}"] = p
            for bname, b in layer.buffers.items():
                out[f"{lname}.{bname}"] = b
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.mask"] = blk.mask
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        current = self.state()
        missing = set(current) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, arr in current.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: expected {arr.shape}, got {src.shape}")
            arr[...] = src

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    @property
    def masks(self) -> list[np.ndarray]:
        return [b.mask for b in self.blocks]

    def live_widths(self) -> tuple[int, ...]:
        return tuple(int(np.count_nonzero(m)) for m in self.masks)

    def live_param_count(self) -> int:
        """Counts parameters actually reachable given the channel masks."""
        total = 0
        for lname, layer in self.named_layers():
            if lname.startswith("block"):
                continue
            total += sum(p.size for p in layer.params.values())
        for blk in self.blocks:
            live = blk.mask != 0
            total += blk.conv1.params["weight"][live].size
            total += blk.bn1.params["gamma"][live].size + blk.bn1.params["beta"][live].size
            total += blk.conv2.params["weight"][:, live].size
            total += sum(p.size for p in blk.bn2.params.values())
            if blk.shortcut is not None:
                total += blk.shortcut.params["weight"].size
        return total

    # -- propagation --------------------------------------------------------

    def forward(self, x, training=True):
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != {self.spec.input_shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        h = self.stem_relu.forward(self.stem_bn.forward(self.stem.forward(x, training), training),
                                   training)
        attention = []
        points = set(self.spec.attention_points)
        for i, blk in enumerate(self.blocks):
            h = blk.forward(h, training)
            if i in points:
                attention.append(h)
        logits = self.fc.forward(self.pool.forward(self.head_relu.forward(h, training), training),
                                 training)
        self._forwarded = training
        return logits, attention

    def backward(self, dlogits, attention_grads=None):
        if not self._forwarded:
            raise StateError("backward called without a training-mode forward")
        self._forwarded = False
        points = list(self.spec.attention_points)
        extra = {}
        if attention_grads is not None:
            if len(attention_grads) != len(points):
                raise ShapeError("one gradient per attention point is required")
            extra = {p: g for p, g in zip(points, attention_grads) if g is not None}
        dh = self.head_relu.backward(self.pool.backward(self.fc.backward(dlogits)))
        for i in range(len(self.blocks) - 1, -1, -1):
            if i in extra:
                dh = dh + extra[i]
            dh = self.blocks[i].backward(dh)
        dx = self.stem.backward(self.stem_bn.backward(self.stem_relu.backward(dh)))
        return dx

    def predict(self, x, batch_size=256):
        outs = []
        for i in range(0, len(x), batch_size):
            outs.append(self.forward(x[i:i + batch_size], training=False)[0])
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.classes), self.dtype)

    # -- structure ----------------------------------------------------------

    def compact(self) -> "ResNet":
        """Physically remove masked channels; the result computes the same function."""
        spec = self.spec.with_widths([max(w, 1) for w in self.live_widths()])
        net = ResNet(spec, None, self.dtype)
        state = {k: v.copy() for k, v in self.state().items()}
        for i, blk in enumerate(self.blocks):
            live = np.flatnonzero(blk.mask)
            if live.size == 0:
                live = np.array([0])
                state[f"block{i}.conv2.weight"] = np.zeros_like(blk.conv2.params["weight"])
            p = f"block{i}."
            state[p + "conv1.weight"] = blk.conv1.params["weight"][live]
            for name in ("gamma", "beta"):
                state[p + f"bn1.{name}"] = blk.bn1.params[name][live]
            for name in ("running_mean", "running_var"):
                state[p + f"bn1.{name}"] = blk.bn1.buffers[name][live]
            state[p + "conv2.weight"] = state[p + "conv2.weight"][:, live]
            state[p + "mask"] = blk.mask[live]
        net.load_state(state)
        return net

    def astype(self, dtype) -> "ResNet":
        net = ResNet(self.spec, None, dtype)
        net.load_state(self.state())
        return net
