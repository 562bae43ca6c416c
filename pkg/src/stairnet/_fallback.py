"""Pure numpy versions of the compiled kernels.

Used when the extension is not built (or ``STAIRNET_PURE=1``).  The GEMM keeps
the compiled path's row-tile padding so the latency staircase survives, but
the arithmetic is delegated to ``numpy.matmul``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MR = 16
NR = 16
BLOCKING = {"MR": MR, "NR": NR}


def gemm_into(a, b, c, num_threads=1):
    m = a.shape[0]
    if m == 0:
        return
    padded = -(-m // MR) * MR
    if padded != m:
        ap = np.zeros((padded, a.shape[1]), dtype=a.dtype)
        ap[:m] = a
        c[...] = np.matmul(ap, b)[:m]
    else:
        np.matmul(a, b, out=c)


def im2col_into(x, out, ksize, stride, pad):
    n, ch, _, _ = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (ksize, ksize), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (n, c, ho, wo, ki, kj) -> (c, ki, kj, n, ho, wo)
    out[...] = win.transpose(1, 4, 5, 0, 2, 3).reshape(ch * ksize * ksize, n * ho * wo)


def col2im_into(cols, out, ksize, stride, pad):
    n, ch, h, w = out.shape
    ho = (h + 2 * pad - ksize) // stride + 1
    wo = (w + 2 * pad - ksize) // stride + 1
    buf = np.zeros((n, ch, h + 2 * pad, w + 2 * pad), dtype=out.dtype)
    blocks = cols.reshape(ch, ksize, ksize, n, ho, wo)
    for ki in range(ksize):
        for kj in range(ksize):
            buf[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                blocks[:, ki, kj].transpose(1, 0, 2, 3)
            )
    out += buf[:, :, pad:pad + h, pad:pad + w]
