"""Loss primitives: softmax cross entropy, binary cross entropy, MSE.

Softmax is stabilized by subtracting the per-row maximum as a constant,
which leaves gradients untouched. Binary cross entropy clamps probabilities
to [1e-12, 1 - 1e-12] because the loss is undefined at exactly 0 or 1.
"""

from __future__ import annotations

import numpy as np

from .tape import Value, as_value, clip, exp, log, vsum

BCE_CLAMP = 1e-12


def log_softmax(logits: Value) -> Value:
    """Row-wise log softmax of an (N, C) batch."""
    logits = as_value(logits)
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = log(vsum(exp(shifted), axis=1, keepdims=True))
    return shifted - lse


def cross_entropy_rows(logits: Value, labels: np.ndarray) -> Value:
    """Per-sample cross entropy, shape (N,). Labels are class indices."""
    logits = as_value(logits)
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    onehot = np.zeros((n, c), dtype=np.float64)
    onehot[np.arange(n), labels] = 1.0
    return -vsum(log_softmax(logits) * onehot, axis=1)


def cross_entropy(logits: Value, labels: np.ndarray) -> Value:
    """Mean softmax cross entropy of an (N, C) logit batch."""
    return cross_entropy_rows(logits, labels).mean()


def binary_cross_entropy(scores: Value, labels: np.ndarray) -> Value:
    """Mean binary cross entropy of probability scores against {0,1} labels."""
    scores = as_value(scores)
    s = clip(scores.reshape((-1,)), BCE_CLAMP, 1.0 - BCE_CLAMP)
    b = np.asarray(labels, dtype=np.float64).reshape(-1)
    if b.shape != s.shape:
        raise ValueError(f"labels shape {b.shape} does not match scores {s.shape}")
    return (-(log(s) * b + log(1.0 - s) * (1.0 - b))).mean()


def mse(x, y) -> Value:
    """Mean squared elementwise difference."""
    x, y = as_value(x), as_value(y)
    if x.shape != y.shape:
        raise ValueError(f"mse shape mismatch: {x.shape} vs {y.shape}")
    return ((x - y) ** 2.0).mean()
