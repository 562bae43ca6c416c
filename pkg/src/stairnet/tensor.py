"""Dense tensor kernels, seeded RNG and the weight-blob format.

Tensors are plain row-major ``numpy.ndarray`` objects (float32 by default,
float64 for gradient checks).  The numeric kernels come from the compiled
extension when it is importable and from ``_fallback`` otherwise; setting
``STAIRNET_PURE=1`` forces the fallback.
"""
from __future__ import annotations

import contextlib
import os
import struct
import zlib
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import _fallback

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _load_compiled():
    if os.environ.get("STAIRNET_PURE", "") not in ("", "0"):
        return None
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
BACKENDS = {"fallback": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled
BACKEND = "compiled" if _compiled is not None else "fallback"


def kernels(backend: str | None = None):
    """Return the kernel module for ``backend`` (default: the import-time choice)."""
    name = backend or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ParameterError(f"kernel backend {name!r} is not available") from None


# -- checked mode -----------------------------------------------------------

_checked = False


def set_checked(enabled: bool) -> None:
    global _checked
    _checked = bool(enabled)


def is_checked() -> bool:
    return _checked


@contextlib.contextmanager
def checked(enabled: bool = True):
    prev = _checked
    set_checked(enabled)
    try:
        yield
    finally:
        set_checked(prev)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if _checked and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# -- kernels ----------------------------------------------------------------

def _as_real(x: np.ndarray) -> np.ndarray:
    if x.dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {x.dtype}")
    return x


def gemm(a: np.ndarray, b: np.ndarray, trans_a: bool = False, trans_b: bool = False, *,
         out: np.ndarray | None = None, num_threads: int = 1,
         backend: str | None = None) -> np.ndarray:
    """Matrix product ``op(a) @ op(b)`` where ``op`` optionally transposes."""
    a = _as_real(np.asarray(a))
    b = _as_real(np.asarray(b))
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm needs matrices, got {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ParameterError(f"dtype mismatch {a.dtype} vs {b.dtype}")
    if num_threads < 1:
        raise ParameterError("num_threads must be >= 1")
    if trans_a:
        a = a.T
    if trans_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    shape = (a.shape[0], b.shape[1])
    if out is None:
        out = np.empty(shape, dtype=a.dtype)
    elif out.shape != shape or out.dtype != a.dtype or not out.flags.c_contiguous:
        raise ShapeError(f"bad output buffer {out.shape} {out.dtype}")
    kernels(backend).gemm_into(a, b, out, num_threads)
    return check_finite(out, "gemm output")


def conv_output_size(size: int, ksize: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - ksize) // stride + 1


def _check_conv_params(ksize: int, stride: int, pad: int) -> None:
    if ksize not in (1, 3):
        raise ParameterError(f"kernel size must be 1 or 3, got {ksize}")
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    if pad not in (0, 1):
        raise ParameterError(f"padding must be 0 or 1, got {pad}")


def im2col(x: np.ndarray, ksize: int = 3, stride: int = 1, pad: int = 1, *,
           backend: str | None = None) -> np.ndarray:
    """Unfold an NCHW tensor into a ``(C*k*k, N*Ho*Wo)`` column matrix.

    Row ``(c*k + i)*k + j`` holds input channel ``c`` at kernel offset
    ``(i, j)``; columns run over ``(n, oh, ow)`` in row-major order.
    """
    _check_conv_params(ksize, stride, pad)
    x = np.ascontiguousarray(_as_real(np.asarray(x)))
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h + 2 * pad < ksize or w + 2 * pad < ksize:
        raise ShapeError(f"input {h}x{w} smaller than kernel {ksize} with padding {pad}")
    ho = conv_output_size(h, ksize, stride, pad)
    wo = conv_output_size(w, ksize, stride, pad)
    out = np.empty((c * ksize * ksize, n * ho * wo), dtype=x.dtype)
    kernels(backend).im2col_into(x, out, ksize, stride, pad)
    return check_finite(out, "im2col output")


def col2im(cols: np.ndarray, shape: Sequence[int], ksize: int = 3, stride: int = 1,
           pad: int = 1, *, backend: str | None = None) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping taps are summed."""
    _check_conv_params(ksize, stride, pad)
    n, c, h, w = shape
    ho = conv_output_size(h, ksize, stride, pad)
    wo = conv_output_size(w, ksize, stride, pad)
    cols = np.ascontiguousarray(cols)
    if cols.shape != (c * ksize * ksize, n * ho * wo):
        raise ShapeError(f"columns {cols.shape} do not match image shape {tuple(shape)}")
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    kernels(backend).col2im_into(cols, out, ksize, stride, pad)
    return check_finite(out, "col2im output")


# -- randomness -------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream; ``child(name)`` derives independent named streams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, name: str) -> "Rng":
        mixed = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32,
                                        zlib.crc32(name.encode())])
        return Rng(int(mixed.generate_state(1, np.uint64)[0]))

    def normal(self, shape, scale: float = 1.0, dtype=DTYPE) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())


# -- serialization ----------------------------------------------------------
# record = rank (u64 LE) | extents (u64 LE each) | data (f32 LE, row-major)

def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    x = np.asarray(x)
    f.write(struct.pack("<Q", x.ndim))
    f.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    f.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(8)
    if len(head) != 8:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<Q", head)
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise EOFError("truncated tensor data")
    return np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(shape)


def save_tensors(path: str | Path, tensors: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as f:
        for t in tensors:
            write_tensor(f, t)


def load_tensors(path: str | Path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as f:
        while f.peek(1) if hasattr(f, "peek") else False:
            out.append(read_tensor(f))
    return out
