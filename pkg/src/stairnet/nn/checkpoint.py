"""Checkpoint = ``manifest.json`` (spec, config, epoch, metrics, tensor index)
plus ``weights.bin`` (tensor records in index order)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..tensor import load_tensors, save_tensors
from .network import NetworkSpec, ResNet

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_checkpoint(directory: str | Path, network: ResNet, *, config: dict | None = None,
                    epoch: int = 0, metrics: list | None = None, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = network.state()
    names = sorted(state)
    manifest = {
        "spec": network.spec.to_dict(),
        "config": config or {},
        "epoch": epoch,
        "metrics": metrics or [],
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    if extra:
        manifest.update(extra)
    save_tensors(directory / WEIGHTS, [state[n] for n in names])
    dump_json(manifest, directory / MANIFEST)
    return directory


def load_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory: str | Path, dtype=np.float32) -> tuple[ResNet, dict]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    spec = NetworkSpec.from_dict(manifest["spec"])
    tensors = load_tensors(directory / WEIGHTS)
    names = [t["name"] for t in manifest["tensors"]]
    if len(tensors) != len(names):
        raise ValueError(f"{directory}: manifest lists {len(names)} tensors, blob has {len(tensors)}")
    net = ResNet(spec, None, dtype)
    net.load_state(dict(zip(names, tensors)))
    return net, manifest
