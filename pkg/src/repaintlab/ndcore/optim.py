"""Bias-corrected adaptive-moment optimizer."""

from __future__ import annotations

import numpy as np

from .array import NdError
from .tape import Tensor


class OptimError(NdError):
    pass


class Adam:
    """Standard Adam. Moments are lazily allocated to match parameter shapes;
    the step counter increases by exactly one per `step` call."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        """Update parameters in place from a gradient map."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.value.shape:
                raise OptimError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"'{name}' shape {p.value.shape}"
                )
            if not np.isfinite(g).all():
                raise OptimError(
                    f"non-finite gradient for parameter '{name}' at step {self.t}"
                )
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value = p.value - self.lr * update
