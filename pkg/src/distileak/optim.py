"""SGD and Adam over tape leaves, with deterministic step-count schedules."""

from __future__ import annotations

import math

import numpy as np

from .tape import Value


class NonFiniteGradient(RuntimeError):
    """A parameter gradient contained NaN or inf; the run must abort."""


def _grad_array(g) -> np.ndarray:
    return g.data if isinstance(g, Value) else np.asarray(g, dtype=np.float64)


def constant_schedule(lr: float):
    return lambda step: lr


def cosine_schedule(lr0: float, lr_min: float, total_steps: int):
    """Cosine annealing from lr0 down to lr_min over total_steps."""

    def schedule(step: int) -> float:
        frac = min(step, total_steps) / max(total_steps, 1)
        return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * frac))

    return schedule


def step_decay_schedule(lr0: float, factor: float, every: int):
    return lambda step: lr0 * (factor ** (step // every))


class SGD:
    """Plain gradient descent: p <- p - lr(step) * g."""

    kind = "sgd"

    def __init__(self, lr: float, lr_schedule=None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.schedule = lr_schedule if lr_schedule is not None else constant_schedule(lr)
        self.step_count = 0

    def current_lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self, params, grads) -> None:
        lr = self.current_lr()
        for i, (p, g) in enumerate(zip(params, grads)):
            ga = _grad_array(g)
            if not np.all(np.isfinite(ga)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {i} at step {self.step_count}")
            p.data = p.data - lr * ga
        self.step_count += 1


class Adam:
    """Adam with bias correction; moments are created lazily per parameter."""

    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, lr_schedule=None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.schedule = lr_schedule if lr_schedule is not None else constant_schedule(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def current_lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self, params, grads) -> None:
        lr = self.current_lr()
        t = self.step_count + 1
        for i, (p, g) in enumerate(zip(params, grads)):
            ga = _grad_array(g)
            if not np.all(np.isfinite(ga)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {i} at step {self.step_count}")
            m = self._m.get(i)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[i] = m
                self._v[i] = np.zeros_like(p.data)
            v = self._v[i]
            m[...] = self.beta1 * m + (1 - self.beta1) * ga
            v[...] = self.beta2 * v + (1 - self.beta2) * ga * ga
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.step_count += 1
