"""Softmax cross-entropy."""
from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, return_grad: bool = False):
    """Mean over the batch of ``-log softmax(logits)[label]``.

    With ``return_grad`` also returns dL/dlogits.  Uses log-sum-exp, so
    saturated logits stay finite.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels])) if n else 0.0
    if not return_grad:
        return loss
    grad = np.exp(z - lse[:, None])
    grad[np.arange(n), labels] -= 1
    return loss, (grad / max(n, 1)).astype(logits.dtype)


def error_rate(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) != np.asarray(labels)))
