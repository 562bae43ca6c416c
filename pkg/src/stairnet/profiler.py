"""Per-layer latency sweeps and staircase step detection.

A sweep benchmarks a freshly built convolution for every output width from 1
to the teacher width.  Weights are random; only shapes affect latency.  Step
detection flags consecutive latency differences larger than the mean
difference plus three (population) standard deviations and reports the
channel count on the lower tread of each step.
"""
from __future__ import annotations

import csv
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .nn.layers import Conv2d
from .nn.network import NetworkSpec, ResNet
from .tensor import Rng

SIGMA = 3.0


@dataclass(frozen=True)
class LayerConfig:
    in_ch: int
    out_ch: int
    hw: tuple[int, int]
    ksize: int = 3
    stride: int = 1
    batch: int = 1


@dataclass(frozen=True)
class Timing:
    median_ns: float
    iqr_ns: float
    flagged: bool = False


def conv_workload(cfg: LayerConfig, rng: Rng, threads: int = 1, backend=None):
    conv = Conv2d(cfg.in_ch, cfg.out_ch, cfg.ksize, cfg.stride, rng=rng, backend=backend,
                  num_threads=threads)
    x = rng.normal((cfg.batch, cfg.in_ch) + tuple(cfg.hw))
    return lambda: conv.forward(x, training=False)


def network_workload(spec: NetworkSpec, rng: Rng, threads: int = 1, backend=None):
    net = ResNet(spec, rng, backend=backend, num_threads=threads)
    x = rng.normal((1,) + spec.input_shape)
    return lambda: net.forward(x, training=False)


def _host_description() -> str:
    return f"{platform.machine()} {platform.processor() or platform.system()} python{platform.python_version()}"


@dataclass
class HarnessConfig:
    """Benchmark settings; ``clock`` and the workload factories are injection seams."""

    warmup: int = 10
    repeats: int = 30
    # sweeps visit every width ``passes`` times, ``repeats`` runs per visit, and
    # pool the samples, so slow drifts in machine speed hit all widths alike
    passes: int = 1
    threads: int = 1
    seed: int = 0
    backend: str | None = None
    clock: Callable[[], int] = time.perf_counter_ns
    clock_resolution_ns: float = field(
        default_factory=lambda: time.get_clock_info("perf_counter").resolution * 1e9)
    layer_workload: Callable = conv_workload
    net_workload: Callable = network_workload
    host: str = field(default_factory=_host_description)

    def describe(self) -> dict:
        """Settings that affect results (for cache keys and provenance)."""
        return {"warmup": self.warmup, "repeats": self.repeats, "passes": self.passes,
                "threads": self.threads,
                "seed": self.seed, "backend": self.backend or "default"}


class FakeTimer:
    """Synthetic clock: each timed run advances time by ``cost(cfg)`` nanoseconds.

    Plug in with :meth:`harness`.  Spec strings for the CLI::

        ceil:P[:UNIT]    cost = ceil(out_ch / P) * UNIT   (UNIT defaults to 1000)
        linear:UNIT      cost = out_ch * UNIT
        const:UNIT       cost = UNIT
    """

    def __init__(self, cost: Callable[[LayerConfig], float], fixed_ns: float = 0.0):
        self.cost = cost
        self.fixed_ns = fixed_ns
        self.now = 0

    @classmethod
    def parse(cls, text: str) -> "FakeTimer":
        kind, *args = text.split(":")
        try:
            nums = [float(a) for a in args]
        except ValueError:
            raise ValueError(f"bad fake timer spec {text!r}") from None
        if kind == "ceil" and len(nums) in (1, 2):
            period, unit = nums[0], (nums[1] if len(nums) == 2 else 1000.0)
            return cls(lambda cfg: math.ceil(cfg.out_ch / period) * unit, fixed_ns=unit)
        if kind == "linear" and len(nums) == 1:
            return cls(lambda cfg: cfg.out_ch * nums[0], fixed_ns=nums[0])
        if kind == "const" and len(nums) == 1:
            return cls(lambda cfg: nums[0], fixed_ns=nums[0])
        raise ValueError(f"bad fake timer spec {text!r}")

    def clock(self) -> int:
        return self.now

    def _advance(self, ns):
        def run():
            self.now += int(round(ns))
        return run

    def layer_workload(self, cfg, rng, threads=1, backend=None):
        return self._advance(self.cost(cfg))

    def net_workload(self, spec, rng, threads=1, backend=None):
        total = self.fixed_ns
        for cfg in prunable_layers(spec).values():
            total += self.cost(cfg)
        return self._advance(total)

    def harness(self, **kw) -> HarnessConfig:
        return HarnessConfig(clock=self.clock, clock_resolution_ns=1.0,
                             layer_workload=self.layer_workload,
                             net_workload=self.net_workload, host="fake-timer", **kw)


def _measure(run: Callable[[], object], harness: HarnessConfig) -> np.ndarray:
    clock = harness.clock
    samples = np.empty(max(harness.repeats, 1), dtype=np.float64)
    for i in range(len(samples)):
        t0 = clock()
        run()
        samples[i] = clock() - t0
    return samples


def _summarise(samples: np.ndarray, harness: HarnessConfig) -> Timing:
    median = float(np.median(samples))
    q1, q3 = np.percentile(samples, [25, 75])
    coarse = harness.clock_resolution_ns > 0.01 * median
    return Timing(median, float(q3 - q1), bool(coarse))


def time_workload(run: Callable[[], object], harness: HarnessConfig) -> Timing:
    """Warm up, then time ``repeats`` single runs; median and interquartile range."""
    for _ in range(harness.warmup):
        run()
    return _summarise(_measure(run, harness), harness)


def bench_layer(cfg: LayerConfig, harness: HarnessConfig, rng: Rng | None = None) -> Timing:
    """Latency of one inference through a new conv layer with ``cfg`` geometry."""
    if cfg.out_ch < 1:
        raise ValueError("out_ch must be >= 1")
    rng = rng or Rng(harness.seed).child(f"bench-{cfg}")
    run = harness.layer_workload(cfg, rng, harness.threads, harness.backend)
    return time_workload(run, harness)


def bench_network(spec: NetworkSpec, harness: HarnessConfig) -> Timing:
    rng = Rng(harness.seed).child(f"net-{spec.digest()}")
    run = harness.net_workload(spec, rng, harness.threads, harness.backend)
    for _ in range(harness.warmup):
        run()
    return _summarise(np.concatenate([_measure(run, harness)
                                      for _ in range(max(harness.passes, 1))]), harness)


def prunable_layers(spec: NetworkSpec) -> dict[int, LayerConfig]:
    """Geometry of every prunable (first-in-block) convolution at the network's widths."""
    return {b.index: LayerConfig(b.in_ch, b.width, tuple(b.in_hw), 3, b.stride)
            for b in spec.blocks()}


@dataclass
class Sample:
    channels: int
    median_ns: float
    iqr_ns: float
    flagged: bool = False


@dataclass
class LatencyProfile:
    layer_id: int
    input_shape: tuple[int, int, int]
    stride: int
    samples: list[Sample]
    threads: int = 1
    host: str = ""

    def __post_init__(self):
        chans = [s.channels for s in self.samples]
        if chans and chans != list(range(chans[0], chans[0] + len(chans))):
            raise ValueError("profile channel counts must be contiguous and increasing")

    @property
    def channels(self) -> list[int]:
        return [s.channels for s in self.samples]

    @property
    def latencies(self) -> np.ndarray:
        return np.array([s.median_ns for s in self.samples], dtype=np.float64)

    def latency_at(self, channels: int) -> float:
        for s in self.samples:
            if s.channels == channels:
                return s.median_ns
        raise KeyError(f"layer {self.layer_id} has no sample at {channels} channels")


@dataclass
class OptimalPoints:
    layer_id: int
    points: tuple[int, ...]
    sigma: float = SIGMA
    step_heights: tuple[float, ...] = ()


def sweep(spec: NetworkSpec, layer_id: int, harness: HarnessConfig) -> LatencyProfile:
    """Benchmark layer ``layer_id`` at every width 1..teacher width, one fresh layer each."""
    layers = prunable_layers(spec.with_widths(spec.teacher_widths))
    if layer_id not in layers:
        raise KeyError(f"layer {layer_id} is not prunable in this spec")
    base = layers[layer_id]
    widths = range(1, base.out_ch + 1)
    runs = []
    for c in widths:
        cfg = LayerConfig(base.in_ch, c, base.hw, base.ksize, base.stride)
        run = harness.layer_workload(cfg, Rng(harness.seed).child(f"sweep-{layer_id}-{c}"),
                                     harness.threads, harness.backend)
        for _ in range(harness.warmup):
            run()
        runs.append(run)
    timed = [[] for _ in runs]
    for _ in range(max(harness.passes, 1)):
        for i, run in enumerate(runs):
            timed[i].append(_measure(run, harness))
    samples = []
    for c, parts in zip(widths, timed):
        t = _summarise(np.concatenate(parts), harness)
        samples.append(Sample(c, t.median_ns, t.iqr_ns, t.flagged))
    return LatencyProfile(layer_id, (base.in_ch,) + tuple(base.hw), base.stride, samples,
                          harness.threads, harness.host)


def step_positions(latencies, sigma: float = SIGMA) -> list[int]:
    """Indices ``i`` where ``t[i+1] - t[i]`` exceeds mean + sigma * std of all differences."""
    t = np.asarray(latencies, dtype=np.float64)
    if t.size < 3:
        raise ValueError("step detection needs at least 3 samples")
    d = np.diff(t)
    mean = d.mean()
    std = d.std()  # population
    # absorbs float rounding when all differences are equal
    tol = 1e-12 * max(float(np.abs(d).max()), 1.0)
    return [int(i) for i in np.flatnonzero(d > mean + sigma * std + tol)]


def detect_steps(profile: LatencyProfile, sigma: float = SIGMA) -> OptimalPoints:
    t = profile.latencies
    idx = step_positions(t, sigma)
    d = np.diff(t)
    return OptimalPoints(profile.layer_id, tuple(profile.samples[i].channels for i in idx), sigma,
                         tuple(float(d[i]) for i in idx))


@dataclass
class NetworkProfile:
    spec: NetworkSpec
    profiles: dict[int, LatencyProfile]
    points: dict[int, OptimalPoints]
    network_ns: float
    network_iqr_ns: float = 0.0

    @property
    def fixed_ns(self) -> float:
        """Measured cost of everything except the prunable layers at teacher width."""
        teacher = self.spec.teacher_widths
        return self.network_ns - sum(p.latency_at(teacher[l]) for l, p in self.profiles.items())

    def point_sets(self) -> dict[int, tuple[int, ...]]:
        return {l: p.points for l, p in self.points.items()}


def profile_network(spec: NetworkSpec, harness: HarnessConfig) -> NetworkProfile:
    """Sweep every prunable layer (sequentially) and time the whole network."""
    teacher = spec.with_widths(spec.teacher_widths)
    profiles, points = {}, {}
    for layer_id in prunable_layers(teacher):
        prof = sweep(teacher, layer_id, harness)
        profiles[layer_id] = prof
        if len(prof.samples) >= 3:
            points[layer_id] = detect_steps(prof)
        else:
            points[layer_id] = OptimalPoints(layer_id, ())
    net = bench_network(teacher, harness)
    return NetworkProfile(teacher, profiles, points, net.median_ns, net.iqr_ns)


def _fmt(v: float) -> str:
    return f"{v:.1f}"


def write_profiles_csv(path: str | Path, profiles) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer_id", "channels", "median_ns", "iqr_ns", "flagged"])
        for prof in profiles:
            for s in prof.samples:
                w.writerow([prof.layer_id, s.channels, _fmt(s.median_ns), _fmt(s.iqr_ns),
                            int(s.flagged)])


def write_points_csv(path: str | Path, points) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer_id", "channel_count"])
        for op in points:
            for c in op.points:
                w.writerow([op.layer_id, c])


def read_profiles_csv(path: str | Path, spec: NetworkSpec | None = None) -> dict[int, LatencyProfile]:
    rows: dict[int, list[Sample]] = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.setdefault(int(r["layer_id"]), []).append(
                Sample(int(r["channels"]), float(r["median_ns"]), float(r["iqr_ns"]),
                       bool(int(r["flagged"]))))
    geo = prunable_layers(spec) if spec is not None else {}
    out = {}
    for layer_id, samples in rows.items():
        cfg = geo.get(layer_id)
        shape = (cfg.in_ch,) + tuple(cfg.hw) if cfg else (0, 0, 0)
        out[layer_id] = LatencyProfile(layer_id, shape, cfg.stride if cfg else 1,
                                       sorted(samples, key=lambda s: s.channels))
    return out


def read_points_csv(path: str | Path) -> dict[int, tuple[int, ...]]:
    out: dict[int, list[int]] = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            out.setdefault(int(r["layer_id"]), []).append(int(r["channel_count"]))
    return {k: tuple(sorted(v)) for k, v in out.items()}
