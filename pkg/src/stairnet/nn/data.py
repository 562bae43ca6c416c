"""Datasets: CIFAR-10 binary batches, the raw labeled-tensor format, and a
synthetic 10-class image task for desk-scale experiments."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor import DTYPE, Rng, read_tensor, write_tensor

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=DTYPE)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=DTYPE)


class DataError(Exception):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        if len(self.x_train) == 0:
            raise DataError("training set is empty")
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise DataError("image/label counts differ")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])

    @property
    def classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max() if len(self.y_test) else 0)) + 1


# -- CIFAR-10 ---------------------------------------------------------------

def read_cifar_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes (CHW)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise DataError(f"{path}: size is not a multiple of 3073 bytes")
    rec = raw.reshape(-1, 3073)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / 255.0
    return images, labels


def load_cifar10(root: str | Path, n_train: int | None = None, n_test: int | None = None) -> Dataset:
    root = Path(root)
    if root.is_dir() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_file = root / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise DataError(f"no CIFAR-10 binary batches under {root}")
    xs, ys = zip(*(read_cifar_batch(f) for f in train_files))
    x_train, y_train = np.concatenate(xs), np.concatenate(ys)
    x_test, y_test = read_cifar_batch(test_file)
    if n_train:
        x_train, y_train = x_train[:n_train], y_train[:n_train]
    if n_test:
        x_test, y_test = x_test[:n_test], y_test[:n_test]
    norm = lambda x: (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]
    return Dataset(norm(x_train), y_train, norm(x_test), y_test, "cifar10")


# -- raw labeled tensors ----------------------------------------------------
# file = images tensor (N x C x H x W) followed by labels tensor (N), both in
# the weight-blob record format

def save_raw(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, images)
        write_tensor(f, np.asarray(labels, dtype=DTYPE))


def load_raw_split(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        try:
            images = read_tensor(f)
            labels = read_tensor(f)
        except (EOFError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from None
    if images.ndim != 4 or labels.shape != (len(images),):
        raise DataError(f"{path}: expected N x C x H x W images and N labels")
    return images, labels.astype(np.int64)


def load_raw(train_path: str | Path, test_path: str | Path) -> Dataset:
    return Dataset(*load_raw_split(train_path), *load_raw_split(test_path), name="raw")


# -- synthetic task ---------------------------------------------------------

def make_synthetic(n_train: int = 5000, n_test: int = 1000, classes: int = 10,
                   shape: tuple[int, int, int] = (3, 16, 16), blobs: int = 3,
                   jitter: int = 2, noise: float = 1.2, distractors: int = 3,
                   seed: int = 0) -> Dataset:
    """Each class is a fixed constellation of coloured Gaussian blobs.

    Samples shift the constellation by up to ``jitter`` pixels, rescale blob
    amplitudes, add weaker blobs borrowed from other classes and white noise.
    """
    rng = Rng(seed).child("synthetic")
    c, h, w = shape
    centers = rng.uniform((classes, blobs, 2), 0.15, 0.85, dtype=np.float64) * np.array([h, w])
    sigmas = rng.uniform((classes, blobs), 1.0, 2.5, dtype=np.float64) * (min(h, w) / 16)
    colors = rng.normal((classes, blobs, c), dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    def render(n, stream):
        labels = stream.integers(0, classes, n)
        images = np.zeros((n, c, h, w))
        for i, lab in enumerate(labels):
            shift = stream.integers(-jitter, jitter + 1, 2)
            parts = [(lab, b, 1.0) for b in range(blobs)]
            for _ in range(distractors):
                parts.append((stream.integers(0, classes), stream.integers(0, blobs), 0.5))
            for cls, b, weight in parts:
                cy, cx = centers[cls, b] + shift
                amp = weight * stream.uniform((), 0.6, 1.4, dtype=np.float64)
                g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigmas[cls, b] ** 2))
                images[i] += amp * colors[cls, b][:, None, None] * g
        images += noise * stream.normal((n, c, h, w), dtype=np.float64)
        return images.astype(DTYPE), labels.astype(np.int64)

    x_train, y_train = render(n_train, rng.child("train"))
    x_test, y_test = render(n_test, rng.child("test"))
    return Dataset(x_train, y_train, x_test, y_test, "synthetic")


# -- batching ---------------------------------------------------------------

def augment_batch(x: np.ndarray, rng: Rng, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus pad-and-crop."""
    n, _, h, w = x.shape
    flip = rng.integers(0, 2, n).astype(bool)
    out = x.copy()
    out[flip] = out[flip, :, :, ::-1]
    if pad:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(0, 2 * pad + 1, (n, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


class BatchStream:
    """Endless shuffled minibatches; epoch ``e`` uses the stream ``rng.child(f"epoch{e}")``."""

    def __init__(self, x, y, batch_size, rng: Rng, augment=False, pad=4):
        if len(x) == 0:
            raise DataError("cannot batch an empty dataset")
        self.x, self.y, self.batch_size, self.rng = x, y, batch_size, rng
        self.augment, self.pad = augment, pad
        self.epoch = 0
        self._order = None
        self._pos = 0
        self._aug_rng = None

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.x) // self.batch_size)

    def _start_epoch(self):
        stream = self.rng.child(f"epoch{self.epoch}")
        self._order = stream.permutation(len(self.x))
        self._aug_rng = stream.child("augment")
        self._pos = 0

    def next(self):
        if self._order is None:
            self._start_epoch()
        elif self._pos >= len(self._order):
            self.epoch += 1
            self._start_epoch()
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        xb, yb = self.x[idx], self.y[idx]
        if self.augment:
            xb = augment_batch(xb, self._aug_rng, self.pad)
        return xb, yb

    def epoch_batches(self):
        """The remaining batches of the current epoch (a whole epoch when fresh)."""
        if self._order is not None and self._pos >= len(self._order):
            self.epoch += 1
            self._order = None
        if self._order is None:
            self._start_epoch()
        while self._pos < len(self._order):
            yield self.next()
