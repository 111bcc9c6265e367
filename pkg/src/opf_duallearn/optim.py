"""First-order optimizers over dictionaries of numpy arrays.

Both follow the usual reference formulas (AdamW with decoupled weight decay,
AdaMax with L2 weight decay folded into the gradient).  Updates are applied
in place, in the key order of the parameter dictionary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamW", "AdaMax", "SGD"]


@dataclass
class AdamW:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 6.9e-15
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            p *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class AdaMax:
    lr: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        clr = self.lr / (1.0 - b1**self.step_count)
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.u[name] = np.zeros_like(p)
            m, u = self.m[name], self.u[name]
            m *= b1
            m += (1.0 - b1) * g
            np.maximum(u * b2, np.abs(g) + self.eps, out=u)
            p -= clr * m / u


@dataclass
class SGD:
    lr: float = 1.0
    weight_decay: float = 0.0
    step_count: int = 0

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= self.lr * g
