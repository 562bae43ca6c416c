"""Layers with explicit forward/backward passes.

Every layer keeps what its backward pass needs from the most recent
``forward`` call; calling ``backward`` before ``forward`` raises
:class:`StateError`.
"""
from __future__ import annotations

import numpy as np

from ..tensor import DTYPE, ShapeError, col2im, conv_output_size, gemm, im2col


class StateError(RuntimeError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a matching forward")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x, training=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Conv2d(Layer):
    """k x k convolution (k in {1, 3}) via im2col + GEMM, no bias."""

    kind = "conv"

    def __init__(self, in_ch, out_ch, ksize=3, stride=1, pad=None, rng=None, dtype=DTYPE,
                 backend=None, num_threads=1):
        super().__init__()
        self.num_threads = num_threads
        self.in_ch, self.out_ch, self.ksize, self.stride = in_ch, out_ch, ksize, stride
        self.pad = (ksize // 2) if pad is None else pad
        self.backend = backend
        shape = (out_ch, in_ch, ksize, ksize)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            # fan-out scaling
            w = rng.normal(shape, scale=np.sqrt(2.0 / (out_ch * ksize * ksize)), dtype=dtype)
        self.params = {"weight": w}
        self._init_grads()

    def output_shape(self, n, h, w):
        return (n, self.out_ch,
                conv_output_size(h, self.ksize, self.stride, self.pad),
                conv_output_size(w, self.ksize, self.stride, self.pad))

    def forward(self, x, training=True):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects (N, {self.in_ch}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        cols = im2col(x, self.ksize, self.stride, self.pad, backend=self.backend)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        y = gemm(wmat, cols, num_threads=self.num_threads, backend=self.backend)
        _, _, ho, wo = self.output_shape(n, h, w)
        if training:
            self._cache = (x.shape, cols)
        return np.ascontiguousarray(y.reshape(self.out_ch, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, dy):
        xshape, cols = self._pop_cache()
        dmat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(self.out_ch, -1)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        self.grads["weight"] += gemm(dmat, cols, trans_b=True, num_threads=self.num_threads,
                                     backend=self.backend).reshape(self.params["weight"].shape)
        dcols = gemm(wmat, dmat, trans_a=True, num_threads=self.num_threads, backend=self.backend)
        return col2im(dcols, xshape, self.ksize, self.stride, self.pad, backend=self.backend)


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, ch, momentum=0.1, eps=1e-5, dtype=DTYPE):
        super().__init__()
        self.ch, self.momentum, self.eps = ch, momentum, eps
        self.params = {"gamma": np.ones(ch, dtype=dtype), "beta": np.zeros(ch, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(ch, dtype=dtype),
                        "running_var": np.ones(ch, dtype=dtype)}
        self._init_grads()

    def forward(self, x, training=True):
        if x.ndim != 4 or x.shape[1] != self.ch:
            raise ShapeError(f"batchnorm expects {self.ch} channels, got {x.shape}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if not training:
            rm = self.buffers["running_mean"][None, :, None, None]
            rv = self.buffers["running_var"][None, :, None, None]
            return (x - rm) / np.sqrt(rv + self.eps) * gamma + beta
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv[None, :, None, None]
        count = x.size // self.ch
        unbiased = var * (count / max(count - 1, 1))
        m = self.momentum
        self.buffers["running_mean"] *= 1 - m
        self.buffers["running_mean"] += m * mean.astype(x.dtype)
        self.buffers["running_var"] *= 1 - m
        self.buffers["running_var"] += m * unbiased.astype(x.dtype)
        self._cache = (xhat, inv)
        return xhat * gamma + beta

    def backward(self, dy):
        xhat, inv = self._pop_cache()
        self.grads["gamma"] += (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.params["gamma"][None, :, None, None]
        mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv[None, :, None, None]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=True):
        mask = x > 0
        if training:
            self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._pop_cache()


class GlobalAvgPool(Layer):
    kind = "pool"

    def forward(self, x, training=True):
        if training:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._pop_cache()
        return np.broadcast_to(dy[:, :, None, None] / (h * w), (n, c, h, w)).copy()


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=DTYPE, backend=None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.backend = backend
        if rng is None:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(in_features)
            w = rng.uniform((out_features, in_features), -bound, bound, dtype=dtype)
        self.params = {"weight": w, "bias": np.zeros(out_features, dtype=dtype)}
        self._init_grads()

    def forward(self, x, training=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (N, {self.in_features}), got {x.shape}")
        if training:
            self._cache = x
        return gemm(x, self.params["weight"], trans_b=True, backend=self.backend) + self.params["bias"]

    def backward(self, dy):
        x = self._pop_cache()
        self.grads["weight"] += gemm(dy, x, trans_a=True, backend=self.backend)
        self.grads["bias"] += dy.sum(axis=0)
        return gemm(dy, self.params["weight"], backend=self.backend)
