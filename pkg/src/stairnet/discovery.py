"""Student discovery: snap Fisher-pruned widths to latency-optimal points."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .nn.network import NetworkSpec
from .profiler import NetworkProfile

OPTIMAL = "optimal_point"
FALLBACK = "fisher_fallback"


class DiscoveryError(ValueError):
    pass


def nearest_point(width: int, points: Sequence[int]) -> int:
    """Point closest to ``width``; equidistant ties go to the larger point.

    With no points the width is returned unchanged.
    """
    if width < 1:
        raise DiscoveryError(f"width must be >= 1, got {width}")
    if not points:
        return width
    return min(points, key=lambda p: (abs(p - width), -p))


@dataclass(frozen=True)
class LayerChoice:
    layer: int
    fisher_width: int
    chosen_width: int
    origin: str


@dataclass(frozen=True)
class StudentSpec:
    spec: NetworkSpec
    provenance: tuple[LayerChoice, ...]

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(),
                "provenance": [vars(c).copy() for c in self.provenance]}

    @classmethod
    def from_dict(cls, d: dict) -> "StudentSpec":
        return cls(NetworkSpec.from_dict(d["spec"]),
                   tuple(LayerChoice(**c) for c in d["provenance"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "StudentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _congruent(a: NetworkSpec, b: NetworkSpec) -> bool:
    return (a.input_shape == b.input_shape and a.classes == b.classes
            and a.stem_width == b.stem_width and a.groups == b.groups
            and len(a.widths) == len(b.widths))


def discover(teacher: NetworkSpec, fisher: NetworkSpec,
             points: Mapping[int, Sequence[int]] | Sequence[Sequence[int]]) -> StudentSpec:
    """Per prunable layer, replace the Fisher width with its nearest optimal point."""
    if not _congruent(teacher, fisher):
        raise DiscoveryError("fisher spec is not a width reduction of the teacher spec")
    n = teacher.num_blocks
    if not isinstance(points, Mapping):
        points = dict(enumerate(points))
    if set(points) - set(range(n)) or (points and len(points) != n):
        raise DiscoveryError(f"optimal points must cover exactly layers 0..{n - 1}")
    limits = teacher.teacher_widths
    widths, provenance = [], []
    for layer, w in enumerate(fisher.widths):
        if w > limits[layer]:
            raise DiscoveryError(f"layer {layer}: fisher width {w} exceeds teacher width {limits[layer]}")
        pts = tuple(sorted(points.get(layer, ())))
        chosen = nearest_point(w, pts)
        widths.append(chosen)
        provenance.append(LayerChoice(layer, w, chosen, OPTIMAL if pts else FALLBACK))
    return StudentSpec(teacher.with_widths(widths), tuple(provenance))


def estimate_latency(spec: NetworkSpec, profile: NetworkProfile) -> float:
    """Sum of profiled per-layer medians at ``spec``'s widths plus the fixed cost."""
    if not profile.profiles and spec.num_blocks:
        raise DiscoveryError("no latency profiles supplied")
    total = profile.fixed_ns
    for layer, w in enumerate(spec.widths):
        prof = profile.profiles.get(layer)
        if prof is None:
            raise DiscoveryError(f"no profile for layer {layer}")
        try:
            total += prof.latency_at(w)
        except KeyError as exc:
            raise DiscoveryError(str(exc)) from None
    return total


def snapping_points(points: Mapping[int, Sequence[int]], teacher: NetworkSpec) -> dict[int, tuple[int, ...]]:
    """Detected step points plus the teacher width, which closes the top tread.

    Layers without detected steps keep an empty set so they fall back to the
    Fisher width.
    """
    widths = teacher.teacher_widths
    out = {}
    for layer in range(teacher.num_blocks):
        pts = set(points.get(layer, ()))
        if pts:
            pts.add(widths[layer])
        out[layer] = tuple(sorted(pts))
    return out
