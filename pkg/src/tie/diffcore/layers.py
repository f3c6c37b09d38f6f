from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, add, matmul


class Linear:
    def __init__(self, in_dim: int, out_dim: int, name: str = "linear"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        self.weight = Parameter(np.zeros((in_dim, out_dim)), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected input (B, {self.in_dim}), got {x.shape}")
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]
