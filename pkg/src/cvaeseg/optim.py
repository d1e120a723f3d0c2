"""ADAM with bias correction.

Moment buffers exist only for trainable parameters; frozen parameters are
never read or written, which is what makes the freeze contract bit-exact.
"""

from __future__ import annotations

import numpy as np

from .errors import MissingGradient
from .tensor import ParamRegistry


class AdamState:
    def __init__(self, registry: ParamRegistry, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, p in registry.trainable_items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)


def adam_step(registry: ParamRegistry, state: AdamState) -> None:
    """One update over all trainable parameters; the step counter advances
    exactly once per call."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, p in registry.trainable_items():
        g = p.grad
        if g is None:
            raise MissingGradient(f"trainable parameter {name!r} has no gradient")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
