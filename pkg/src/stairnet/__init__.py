"""Latency-aware student discovery: Fisher pruning, latency staircase
profiling, width snapping and attention-transfer distillation on a small
numpy/Cython neural-network engine."""
from .tensor import BACKEND, BACKENDS, DTYPE, Rng, gemm, im2col, col2im

__version__ = "0.1.0"

__all__ = ["BACKEND", "BACKENDS", "DTYPE", "Rng", "gemm", "im2col", "col2im", "__version__"]
