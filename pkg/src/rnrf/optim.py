"""Adam with an exponentially decaying learning-rate schedule.

Moment math runs in float64 and is stored back at parameter precision, which
keeps updates deterministic and stable at float32 storage.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError


class ExponentialDecay:
    """lr(step) = lr0 * (lr1/lr0)^(step/total): lr(0) = lr0, lr(total) = lr1."""

    def __init__(self, lr0: float, lr1: float, total_steps: int):
        if lr0 <= 0 or lr1 <= 0:
            raise ParameterError("learning rates must be positive")
        if total_steps < 1:
            raise ParameterError("total_steps must be >= 1")
        self.lr0 = float(lr0)
        self.lr1 = float(lr1)
        self.total_steps = int(total_steps)

    def __call__(self, step: int) -> float:
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        return self.lr0 * (self.lr1 / self.lr0) ** frac


class ConstantLr:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def __call__(self, step: int) -> float:
        return self.lr


class Adam:
    """Standard bias-corrected Adam over a list of parameter tensors."""

    def __init__(self, params, schedule, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Tensor):
                raise ParameterError("Adam parameters must be Tensors")
        self.schedule = schedule if callable(schedule) else ConstantLr(float(schedule))
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        lr = self.schedule(self.step_count)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = 0.0
            else:
                if g.shape != p.data.shape:
                    raise ParameterError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
                g = g.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
