"""SGD with momentum and weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * epoch / total)) / 2; 0 at ``epoch == total``."""
    if total <= 0:
        raise ValueError("total epochs must be positive")
    if lr0 < 0:
        raise ValueError("lr0 must be non-negative")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    buffers: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place update: v <- m*v + (g + wd*p); p <- p - lr*v."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for p, g, v in zip(params, grads, buffers):
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= lr * v


class SGD:
    """Momentum SGD over a fixed list of parameter tensors.

    Momentum buffers start at zero.  Parameters whose ``grad`` is ``None``
    after a backward pass are skipped for that step.
    """

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        live = [(p.data, p.grad, b) for p, b in zip(self.params, self.buffers) if p.grad is not None]
        if not live:
            return
        ps, gs, bs = zip(*live)
        sgd_step(ps, gs, bs, lr, self.momentum, self.weight_decay)
