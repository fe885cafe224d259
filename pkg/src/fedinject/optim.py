"""First-order update rules over a ParamTree."""
from __future__ import annotations

import numpy as np

from .params import ParamTree


class SGD:
    def __init__(self, lr: float):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr

    def step(self, tree: ParamTree, grads: dict[str, np.ndarray]) -> None:
        for path in sorted(grads):
            if tree.is_frozen(path):
                continue
            tree.set(path, tree.value(path) - self.lr * grads[path])


class Adam:
    """Adam with bias correction; moments live only as long as the instance."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tree: ParamTree, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for path in sorted(grads):
            if tree.is_frozen(path):
                continue
            g = grads[path]
            m = self.m.get(path, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(path, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[path], self.v[path] = m, v
            tree.set(path, tree.value(path) - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
