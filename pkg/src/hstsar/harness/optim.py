"""Adam with decoupled weight decay, and warmup + decay learning-rate schedules."""

from __future__ import annotations

import enum
import math

import numpy as np


class Decay(str, enum.Enum):
    ROOT_SQUARE = "root_square"  # lr * sqrt(warmup / step) after warmup
    COSINE = "cosine"
    POLYNOMIAL = "polynomial"  # linear decay to zero
    NONE = "none"


def learning_rate(step, peak, warmup, total, decay=Decay.NONE):
    """Learning rate for 1-based ``step``.

    Linear warmup ``peak * step / warmup`` while ``step < warmup``, then the
    configured decay.
    """
    decay = Decay(decay)
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if decay is Decay.NONE:
        return peak
    if decay is Decay.ROOT_SQUARE:
        return peak * math.sqrt(max(warmup, 1) / max(step, 1))
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    if decay is Decay.COSINE:
        return peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    return peak * (1.0 - frac)


class Adam:
    """Adam with bias correction; ``weight_decay`` is applied decoupled (AdamW)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_dict(self):
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}
