"""End-to-end pipeline: train -> prune -> profile -> discover -> distill -> report.

Every command reads a :class:`PipelineConfig` and works inside one output
directory::

    config.ini                  effective configuration
    teacher/                    checkpoint + metrics.csv
    prune-<method>/             trace.json, trace.csv, samples.csv, sample-<i>.json,
                                samples/<i>/ (compacted checkpoints)
    profile/                    profiles.csv, points.csv, network.json
    discover/student-<i>.json   snapped student specs with provenance
    distill/student-<i>/        student checkpoints + metrics.csv
    report.csv                  one row per (method, sample), sorted by latency
    timing/<command>.json       wall-clock durations

Latency values live only in ``profile/``, ``report.csv`` and ``timing/``;
everything else is byte-reproducible for a fixed config and seed.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import fcntl
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discovery import DiscoveryError, StudentSpec, discover, estimate_latency, snapping_points
from .distill import DISTANCES, DistillConfig, distill, init_network
from .nn.checkpoint import dump_json, load_checkpoint, load_manifest, save_checkpoint
from .nn.data import DataError, Dataset, load_cifar10, load_raw, make_synthetic
from .nn.network import NetworkSpec, ResNet
from .nn.train import TrainConfig, evaluate, train
from .profiler import (FakeTimer, HarnessConfig, NetworkProfile, OptimalPoints, bench_network,
                       profile_network, read_points_csv, read_profiles_csv,
                       write_points_csv, write_profiles_csv)
from .saliency import METHODS, PruneConfig, prune_loop, sample_trace

log = logging.getLogger(__name__)

SNAPPED = "snapped+AT"


class ConfigError(ValueError):
    """Bad configuration or command-line usage."""


class BusyError(RuntimeError):
    """Profiling and training may not overlap on one host."""


# -- configuration -----------------------------------------------------------

@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | cifar10 | raw
    path: str = ""
    n_train: int = 5000
    n_test: int = 1000
    size: int = 32
    noise: float = 1.2
    distractors: int = 3
    # identity of the synthetic dataset; kept apart from the experiment seed
    seed: int = 0


@dataclass
class NetworkConfig:
    depth: int = 16
    width_mult: int = 1
    classes: int = 10
    base_widths: tuple[int, ...] = (16, 32, 64)
    stem_width: int = 16


@dataclass
class PruneSettings:
    methods: tuple[str, ...] = ("l1", "fisher")
    samples: int = 5
    lr: float | None = None  # None: lowest learning rate of the teacher schedule
    steps_per_prune: int = 100
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    floor: int = 1
    max_events: int | None = None
    augment: bool = True
    crop_pad: int = 4


@dataclass
class ProfileSettings:
    warmup: int = 10
    repeats: int = 30
    passes: int = 1
    threads: int = 1
    backend: str | None = None
    fake_timer: str | None = None


@dataclass
class DistillSettings:
    beta: float = 1000.0
    scale_beta: bool = True
    distance: str = "l2sq_mean"


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneSettings = field(default_factory=PruneSettings)
    profile: ProfileSettings = field(default_factory=ProfileSettings)
    distill: DistillSettings = field(default_factory=DistillSettings)
    student: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("data", "network", "train", "prune", "profile", "distill", "student")
    # fields whose default is None need an explicit type
    OPTIONAL = {("prune", "lr"): float, ("prune", "max_events"): int,
                ("profile", "backend"): str, ("profile", "fake_timer"): str}

    def validate(self) -> "PipelineConfig":
        bad = [m for m in self.prune.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown pruning method(s) {bad}; choose from {METHODS}")
        if self.distill.distance not in DISTANCES:
            raise ConfigError(f"unknown attention distance {self.distill.distance!r}")
        if self.data.kind not in ("synthetic", "cifar10", "raw"):
            raise ConfigError(f"unknown dataset kind {self.data.kind!r}")
        if self.prune.samples < 1:
            raise ConfigError("prune.samples must be >= 1")
        pr = self.profile
        if pr.warmup < 0 or pr.repeats < 1 or pr.passes < 1 or pr.threads < 1:
            raise ConfigError("profile needs warmup >= 0 and repeats, passes, threads >= 1")
        if self.profile.fake_timer:
            try:
                FakeTimer.parse(self.profile.fake_timer)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        try:
            self.train = TrainConfig(**self.train.to_dict())
            self.student = TrainConfig(**self.student.to_dict())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        # the single seed drives every stochastic component of the experiment
        self.train.seed = self.seed
        self.student.seed = self.seed
        return self

    # key=value text form

    def to_ini(self) -> str:
        lines = ["[pipeline]", f"seed = {self.seed}", ""]
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                if name in ("train", "student") and f.name == "seed":
                    continue
                lines.append(f"{f.name} = {_format(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def set(self, section: str, key: str, value: str) -> None:
        if section == "pipeline":
            if key != "seed":
                raise ConfigError(f"unknown key pipeline.{key}")
            self.seed = _parse(value, 0, "pipeline.seed")
            return
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(self, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if key not in names or (section in ("train", "student") and key == "seed"):
            raise ConfigError(f"unknown key {section}.{key}")
        current = getattr(obj, key)
        kind = self.OPTIONAL.get((section, key))
        setattr(obj, key, _parse(value, current, f"{section}.{key}", kind))

    @classmethod
    def load(cls, path: str | Path | None = None, overrides=()) -> "PipelineConfig":
        cfg = cls()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise DataError(f"config file {path} does not exist")
            parser = configparser.ConfigParser(interpolation=None)
            try:
                parser.read(path)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(section, key, value)
        for item in overrides:
            lhs, sep, value = item.partition("=")
            section, dot, key = lhs.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not section.key=value")
            cfg.set(section, key.strip(), value.strip())
        return cfg.validate()


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(text: str, current, where: str, kind=None):
    text = text.strip()
    if kind is not None:
        if text.lower() in ("none", ""):
            return None
        if current is None:
            current = kind()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if current and isinstance(current[0], str):
                return tuple(items)
            return tuple(int(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {where}") from None


# -- host lock ---------------------------------------------------------------

def lock_path() -> Path:
    return Path(os.environ.get("STAIRNET_LOCK", Path(tempfile.gettempdir()) / "stairnet.lock"))


@contextmanager
def host_lock(exclusive: bool):
    """Shared for training-type commands, exclusive for latency measurement."""
    path = lock_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        try:
            fcntl.flock(f, (fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH) | fcntl.LOCK_NB)
        except BlockingIOError:
            what = "profile while training runs" if exclusive else "train while profiling runs"
            raise BusyError(f"refusing to {what} on this host (lock {path})") from None
        try:
            yield
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


@contextmanager
def _timed(out: Path, command: str):
    t0 = time.perf_counter()
    yield
    dump_json({"command": command, "seconds": round(time.perf_counter() - t0, 3)},
              _mkdir(out / "timing") / f"{command}.json")


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- inputs ------------------------------------------------------------------

def load_dataset(cfg: DataConfig) -> Dataset:
    if cfg.kind == "synthetic":
        return make_synthetic(cfg.n_train, cfg.n_test, shape=(3, cfg.size, cfg.size),
                              noise=cfg.noise, distractors=cfg.distractors, seed=cfg.seed)
    root = Path(cfg.path)
    if not cfg.path or not root.exists():
        raise DataError(f"dataset path {cfg.path!r} does not exist")
    if cfg.kind == "cifar10":
        return load_cifar10(root, cfg.n_train or None, cfg.n_test or None)
    for name in ("train.bin", "test.bin"):
        if not (root / name).exists():
            raise DataError(f"raw dataset needs {root / name}")
    ds = load_raw(root / "train.bin", root / "test.bin")
    if cfg.n_train:
        ds = Dataset(ds.x_train[:cfg.n_train], ds.y_train[:cfg.n_train], ds.x_test, ds.y_test, ds.name)
    if cfg.n_test:
        ds = Dataset(ds.x_train, ds.y_train, ds.x_test[:cfg.n_test], ds.y_test[:cfg.n_test], ds.name)
    return ds


def teacher_spec(cfg: PipelineConfig, input_shape) -> NetworkSpec:
    n = cfg.network
    return NetworkSpec.wide_resnet(n.depth, n.width_mult, tuple(input_shape), n.classes,
                                   n.base_widths, n.stem_width)


def harness(cfg: PipelineConfig) -> HarnessConfig:
    p = cfg.profile
    kw = dict(warmup=p.warmup, repeats=p.repeats, passes=p.passes, threads=p.threads,
              seed=cfg.seed, backend=p.backend)
    if p.fake_timer:
        return FakeTimer.parse(p.fake_timer).harness(**kw)
    return HarnessConfig(**kw)


def _write_metrics(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_config(cfg: PipelineConfig, out: Path) -> None:
    (_mkdir(out) / "config.ini").write_text(cfg.to_ini())


# -- commands ----------------------------------------------------------------

TRAIN_COLUMNS = ("epoch", "lr", "train_ce", "train_err", "test_loss", "test_err")
DISTILL_COLUMNS = ("epoch", "train_ce", "train_at", "test_err")


def cmd_train(cfg: PipelineConfig, out: str | Path) -> Path:
    """Train the teacher from a fresh initialisation."""
    out = Path(out)
    data = load_dataset(cfg.data)
    write_config(cfg, out)
    with host_lock(exclusive=False), _timed(out, "train"):
        spec = teacher_spec(cfg, data.input_shape)
        net = init_network(spec, cfg.seed)
        result = train(net, data, cfg.train)
        _, test_err = evaluate(net, data.x_test, data.y_test)
        ckpt = save_checkpoint(out / "teacher", net, config=cfg.train.to_dict(),
                               epoch=cfg.train.epochs, metrics=result.metrics,
                               extra={"test_err": test_err, "config_digest": cfg.digest()})
        _write_metrics(ckpt / "metrics.csv", result.metrics, TRAIN_COLUMNS)
    return ckpt


def _load_teacher(out: Path) -> tuple[ResNet, dict]:
    path = out / "teacher"
    if not (path / "manifest.json").exists():
        raise DataError(f"no teacher checkpoint in {path}; run `stairnet train` first")
    return load_checkpoint(path)


def cmd_prune(cfg: PipelineConfig, out: str | Path, method: str) -> Path:
    """Prune the teacher channel by channel and keep ``prune.samples`` points of the trace."""
    if method not in METHODS:
        raise ConfigError(f"unknown pruning method {method!r}; choose from {METHODS}")
    out = Path(out)
    teacher, _ = _load_teacher(out)
    data = load_dataset(cfg.data)
    p = cfg.prune
    pcfg = PruneConfig(method, p.lr if p.lr is not None else cfg.train.schedule.lowest,
                       p.steps_per_prune, p.batch_size, p.momentum, p.weight_decay, p.floor,
                       p.max_events, cfg.seed, p.augment, p.crop_pad)
    write_config(cfg, out)
    d = out / f"prune-{method}"
    if d.exists():
        shutil.rmtree(d)
    _mkdir(d)
    with host_lock(exclusive=False), _timed(out, f"prune-{method}"):
        result = prune_loop(teacher, data, pcfg)
        trace = result.trace
        trace.save(d / "trace.json")
        trace.write_csv(d / "trace.csv")
        k = min(p.samples, len(trace))
        rows = []
        net = ResNet(trace.spec, None, teacher.dtype)
        for j, idx in enumerate(sample_trace(trace, k)):
            net.load_state(result.snapshots[idx])
            _, err = evaluate(net, data.x_test, data.y_test)
            small = net.compact()
            spec = small.spec
            spec_path = d / f"sample-{j}.json"
            dump_json(spec.to_dict(), spec_path)
            save_checkpoint(d / "samples" / str(j), small, config=dataclasses.asdict(pcfg),
                            extra={"trace_index": idx, "test_err": err})
            rows.append({"sample": j, "trace_index": idx, "params": spec.param_count(),
                         "macs": spec.mac_count(), "test_err": err,
                         "widths": " ".join(map(str, spec.widths))})
        _write_metrics(d / "samples.csv", rows,
                       ("sample", "trace_index", "params", "macs", "test_err", "widths"))
    return d


def profile_key(spec: NetworkSpec, h: HarnessConfig, fake_timer: str | None) -> str:
    blob = json.dumps({"spec": spec.to_dict(), "harness": h.describe(),
                       "timer": f"fake:{fake_timer}" if fake_timer else f"host:{h.host}"},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _save_profile(d: Path, prof: NetworkProfile, h: HarnessConfig, key: str) -> None:
    _mkdir(d)
    order = sorted(prof.profiles)
    write_profiles_csv(d / "profiles.csv", [prof.profiles[i] for i in order])
    write_points_csv(d / "points.csv", [prof.points[i] for i in order])
    dump_json({"key": key, "spec": prof.spec.to_dict(), "network_ns": prof.network_ns,
               "network_iqr_ns": prof.network_iqr_ns, "host": h.host, "threads": h.threads,
               "harness": h.describe()}, d / "network.json")


def load_profile(d: str | Path) -> NetworkProfile:
    d = Path(d)
    if not (d / "network.json").exists():
        raise DataError(f"no latency profile in {d}; run `stairnet profile` first")
    meta = json.loads((d / "network.json").read_text())
    spec = NetworkSpec.from_dict(meta["spec"])
    profiles = read_profiles_csv(d / "profiles.csv", spec)
    point_sets = read_points_csv(d / "points.csv")
    points = {}
    for layer, prof in profiles.items():
        pts = point_sets.get(layer, ())
        t = prof.latencies
        heights = tuple(float(t[c] - t[c - 1]) for c in pts)
        points[layer] = OptimalPoints(layer, pts, step_heights=heights)
    return NetworkProfile(spec, profiles, points, meta["network_ns"], meta["network_iqr_ns"])


def cmd_profile(cfg: PipelineConfig, out: str | Path, cache_dir: str | Path | None = None):
    """Sweep the teacher's prunable layers; reuses a cached profile with the same key.

    Returns ``(profile, cache_hit)``.
    """
    out = Path(out)
    teacher, _ = _load_teacher(out)
    spec = teacher.spec.with_widths(teacher.spec.teacher_widths)
    h = harness(cfg)
    key = profile_key(spec, h, cfg.profile.fake_timer)
    cache = Path(cache_dir) if cache_dir else out / "cache"
    entry = cache / f"profile-{key}"
    target = out / "profile"
    write_config(cfg, out)
    if (entry / "network.json").exists():
        log.info("profile cache hit %s", key)
        hit = True
    else:
        hit = False
        lock = host_lock(exclusive=True) if not cfg.profile.fake_timer else _nolock()
        with lock, _timed(out, "profile"):
            prof = profile_network(spec, h)
            tmp = cache / f".tmp-{key}"
            if tmp.exists():
                shutil.rmtree(tmp)
            _save_profile(tmp, prof, h, key)
            tmp.replace(entry)
    if target.resolve() != entry.resolve():
        if target.exists():
            shutil.rmtree(target)
        shutil.copytree(entry, target)
    return load_profile(target), hit


@contextmanager
def _nolock():
    yield


def _fisher_samples(out: Path) -> list[NetworkSpec]:
    d = out / "prune-fisher"
    files = sorted(d.glob("sample-*.json"), key=lambda p: int(p.stem.split("-")[1]))
    if not files:
        raise DataError(f"no Fisher samples in {d}; run `stairnet prune --method fisher` first")
    return [NetworkSpec.from_dict(json.loads(f.read_text())) for f in files]


def cmd_discover(cfg: PipelineConfig, out: str | Path) -> list[StudentSpec]:
    """Snap every sampled Fisher spec to the teacher's optimal points."""
    out = Path(out)
    teacher, _ = _load_teacher(out)
    prof = load_profile(out / "profile")
    points = snapping_points(prof.point_sets(), teacher.spec)
    d = out / "discover"
    if d.exists():
        shutil.rmtree(d)
    _mkdir(d)
    students = []
    for j, fisher in enumerate(_fisher_samples(out)):
        student = discover(teacher.spec, fisher, points)
        student.save(d / f"student-{j}.json")
        students.append(student)
    return students


def cmd_distill(cfg: PipelineConfig, out: str | Path, only: int | None = None) -> list[Path]:
    """Train each discovered student from scratch with attention transfer."""
    out = Path(out)
    teacher, _ = _load_teacher(out)
    data = load_dataset(cfg.data)
    files = sorted((out / "discover").glob("student-*.json"), key=lambda p: int(p.stem.split("-")[1]))
    if not files:
        raise DataError(f"no student specs in {out / 'discover'}; run `stairnet discover` first")
    dc = DistillConfig(cfg.distill.beta, cfg.distill.scale_beta, cfg.distill.distance, cfg.student)
    write_config(cfg, out)
    done = []
    with host_lock(exclusive=False), _timed(out, "distill"):
        for f in files:
            j = int(f.stem.split("-")[1])
            if only is not None and j != only:
                continue
            student = StudentSpec.load(f)
            result = distill(teacher, student.spec, data, dc)
            _, err = evaluate(result.network, data.x_test, data.y_test)
            cfg_dict = {"beta": dc.beta, "scale_beta": dc.scale_beta, "distance": dc.distance,
                        "train": dc.train.to_dict()}
            ckpt = save_checkpoint(out / "distill" / f"student-{j}", result.network,
                                   config=cfg_dict, epoch=dc.train.epochs, metrics=result.metrics,
                                   extra={"test_err": err, "provenance": student.to_dict()["provenance"]})
            _write_metrics(ckpt / "metrics.csv", result.metrics, DISTILL_COLUMNS)
            done.append(ckpt)
    if only is not None and not done:
        raise DataError(f"no student {only} in {out / 'discover'}")
    return done


REPORT_COLUMNS = ("method", "sample", "params", "macs", "latency_ns", "est_latency_ns",
                  "test_err", "macs_per_s")


def report_rows(cfg: PipelineConfig, out: str | Path) -> list[dict]:
    out = Path(out)
    entries = []
    for d in sorted(out.glob("prune-*")):
        method = d.name.split("-", 1)[1]
        for j, spec_file in enumerate(sorted(d.glob("sample-*.json"),
                                             key=lambda p: int(p.stem.split("-")[1]))):
            j = int(spec_file.stem.split("-")[1])
            manifest = load_manifest(d / "samples" / str(j))
            entries.append((method, j, NetworkSpec.from_dict(json.loads(spec_file.read_text())),
                            manifest["test_err"]))
    for d in sorted((out / "distill").glob("student-*")):
        manifest = load_manifest(d)
        entries.append((SNAPPED, int(d.name.split("-")[1]), NetworkSpec.from_dict(manifest["spec"]),
                        manifest["test_err"]))
    if not entries:
        raise DataError(f"nothing to report in {out}: no completed prune or distill runs")
    prof = load_profile(out / "profile") if (out / "profile" / "network.json").exists() else None
    h = harness(cfg)
    rows = []
    for method, j, spec, err in entries:
        latency = bench_network(spec, h).median_ns
        est = ""
        if prof is not None and prof.spec.input_shape == spec.input_shape:
            try:
                est = estimate_latency(spec, prof)
            except DiscoveryError:
                est = ""
        macs = spec.mac_count()
        rows.append({"method": method, "sample": j, "params": spec.param_count(), "macs": macs,
                     "latency_ns": latency, "est_latency_ns": est, "test_err": err,
                     "macs_per_s": macs / (latency * 1e-9) if latency > 0 else float("inf")})
    rows.sort(key=lambda r: (r["latency_ns"], r["method"], r["sample"]))
    return rows


def cmd_report(cfg: PipelineConfig, out: str | Path) -> Path:
    """Measure each finished model once more and write ``report.csv``."""
    out = Path(out)
    lock = host_lock(exclusive=True) if not cfg.profile.fake_timer else _nolock()
    with lock:
        rows = report_rows(cfg, out)
    path = out / "report.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            est = r["est_latency_ns"]
            w.writerow([r["method"], r["sample"], r["params"], r["macs"], f"{r['latency_ns']:.1f}",
                        f"{est:.1f}" if est != "" else "", f"{r['test_err']:.6f}",
                        f"{r['macs_per_s']:.6e}"])
    return path


def cmd_pipeline(cfg: PipelineConfig, out: str | Path, cache_dir=None) -> Path:
    """All stages in order."""
    out = Path(out)
    cmd_train(cfg, out)
    for method in cfg.prune.methods:
        cmd_prune(cfg, out, method)
    if "fisher" not in cfg.prune.methods:
        cmd_prune(cfg, out, "fisher")
    cmd_profile(cfg, out, cache_dir)
    cmd_discover(cfg, out)
    cmd_distill(cfg, out)
    return cmd_report(cfg, out)
