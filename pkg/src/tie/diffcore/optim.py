"""Adam with bias correction, stepping :class:`Parameter` state in place."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {p.name or p.shape} has no gradient")
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        # fresh array: snapshots taken before the step stay valid
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = np.zeros_like(p.data)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
